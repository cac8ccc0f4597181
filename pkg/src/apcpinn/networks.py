"""tanh multilayer perceptrons with inverted dropout, L2 penalty and Adam.

Arrays are feature-major: a batch of ``n`` inputs is ``(1, n)`` and network
outputs are ``(output_dim, n)``.  Parameters live in one flat float64 vector,
layer by layer as ``W`` (fan_out x fan_in, row-major) followed by ``b``.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DivergenceError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    output_dim: int
    hidden_layers: int
    width: int
    dropout_p: float = 0.0
    l2_lambda: float = 0.0
    input_dim: int = 1

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1 or self.output_dim < 0:
            raise ConfigurationError(f"invalid network shape {self}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must lie in [0, 1)")
        if self.l2_lambda < 0:
            raise ConfigurationError("l2_lambda must be >= 0")

    @property
    def layer_shapes(self):
        sizes = [self.input_dim] + [self.width] * self.hidden_layers + [self.output_dim]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def n_params(self):
        return sum((fan_in + 1) * fan_out for fan_out, fan_in in self.layer_shapes)


@dataclass
class DropoutMask:
    """Per-hidden-layer multipliers ``keep / (1 - p)``; shape (width, 1) or (width, n)."""

    layers: list
    p: float

    @property
    def scale(self):
        return 1.0 / (1.0 - self.p)


def draw_mask(spec, rng, n_points=1):
    """Independent keep/drop flags for every hidden unit (and point, if n_points > 1)."""
    keep = 1.0 - spec.dropout_p
    layers = [
        (rng.random((spec.width, n_points)) < keep) / keep
        for _ in range(spec.hidden_layers)
    ]
    return DropoutMask(layers=layers, p=spec.dropout_p)


@dataclass
class Mlp:
    spec: MlpSpec
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ShapeError(f"expected {self.spec.n_params} parameters, got {self.params.shape}")
        self._offsets = []
        pos = 0
        for fan_out, fan_in in self.spec.layer_shapes:
            self._offsets.append((pos, pos + fan_out * fan_in, pos + fan_out * (fan_in + 1)))
            pos += fan_out * (fan_in + 1)

    @property
    def n_outputs(self):
        return self.spec.output_dim

    @property
    def n_layers(self):
        return len(self._offsets)

    def weights(self, layer):
        (fan_out, fan_in), (a, b, _) = self.spec.layer_shapes[layer], self._offsets[layer]
        return self.params[a:b].reshape(fan_out, fan_in)

    def bias(self, layer):
        fan_out = self.spec.layer_shapes[layer][0]
        _, b, c = self._offsets[layer]
        return self.params[b:c].reshape(fan_out, 1)

    def _check_mask(self, mask, n):
        if mask is None:
            return
        if len(mask.layers) != self.spec.hidden_layers:
            raise ShapeError("mask layer count does not match the network")
        for m in mask.layers:
            if m.shape[0] != self.spec.width or m.shape[1] not in (1, n):
                raise ShapeError(f"mask of shape {m.shape} does not fit width {self.spec.width}")

    def forward(self, x, mask=None):
        """Network output at points ``x`` (scalar or 1-D); shape (output_dim, n)."""
        h = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1)
        self._check_mask(mask, h.shape[1])
        last = self.n_layers - 1
        for layer in range(self.n_layers):
            h = self.weights(layer) @ h + self.bias(layer)
            if layer < last:
                h = np.tanh(h)
                if mask is not None:
                    h = h * mask.layers[layer]
        return h

    def forward_jet(self, x, mask=None):
        """Output and its first two x-derivatives, each (output_dim, n)."""
        v = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1)
        self._check_mask(mask, v.shape[1])
        d1 = np.ones_like(v)
        d2 = np.zeros_like(v)
        last = self.n_layers - 1
        for layer in range(self.n_layers):
            w = self.weights(layer)
            v, d1, d2 = w @ v + self.bias(layer), w @ d1, w @ d2
            if layer < last:
                t = np.tanh(v)
                s = 1.0 - t * t
                v, d1, d2 = t, s * d1, s * (d2 - 2.0 * t * d1 * d1)
                if mask is not None:
                    m = mask.layers[layer]
                    v, d1, d2 = v * m, d1 * m, d2 * m
        return v, d1, d2

    def build_graph(self, graph, x, prefix, dropout=True):
        """Append this network to ``graph`` applied to the input node ``x``.

        Creates parameters ``{prefix}.W{l}``/``{prefix}.b{l}`` and, when the
        network has dropout and ``dropout`` is set, mask inputs
        ``{prefix}.mask{l}`` that must be bound on every evaluation.
        Returns the output node.
        """
        n = graph.shape(x)[-1] if graph.shape(x) is not None else None
        h = x
        last = self.n_layers - 1
        use_mask = dropout and self.spec.dropout_p > 0
        for layer, (fan_out, fan_in) in enumerate(self.spec.layer_shapes):
            w = graph.parameter(f"{prefix}.W{layer}", shape=(fan_out, fan_in))
            b = graph.parameter(f"{prefix}.b{layer}", shape=(fan_out, 1))
            h = w @ h + b
            if layer < last:
                h = h.tanh()
                if use_mask:
                    shape = None if n is None else (fan_out, n)
                    h = h * graph.input(f"{prefix}.mask{layer}", shape=shape)
        return h

    def bindings(self, prefix):
        out = {}
        for layer in range(self.n_layers):
            out[f"{prefix}.W{layer}"] = self.weights(layer)
            out[f"{prefix}.b{layer}"] = self.bias(layer)
        return out

    def mask_bindings(self, prefix, mask):
        return {f"{prefix}.mask{i}": m for i, m in enumerate(mask.layers)}

    def flat_gradient(self, grads, prefix):
        """Gather ``{prefix}.W*``/``{prefix}.b*`` entries of ``grads`` into a flat vector."""
        out = np.zeros_like(self.params)
        for layer, (a, b, c) in enumerate(self._offsets):
            out[a:b] = grads[f"{prefix}.W{layer}"].ravel()
            out[b:c] = grads[f"{prefix}.b{layer}"].ravel()
        return out

    def copy(self):
        return Mlp(self.spec, self.params.copy())


def init_mlp(spec, seed):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    net = Mlp(spec, np.zeros(spec.n_params))
    for layer, (fan_out, fan_in) in enumerate(spec.layer_shapes):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        net.weights(layer)[...] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    return net


def l2_penalty(net):
    """lambda * sum of squared weights and biases."""
    lam = net.spec.l2_lambda
    return lam * float(net.params @ net.params) if lam else 0.0


def l2_gradient(net):
    return 2.0 * net.spec.l2_lambda * net.params


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0

    @classmethod
    def zeros(cls, n, learning_rate=1e-3, **kw):
        return cls(m=np.zeros(n), v=np.zeros(n), learning_rate=learning_rate, **kw)


def adam_step(net, grad, state):
    """One bias-corrected Adam update of ``net.params`` in place; returns ``(net, state)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.params.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {net.params.shape}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise DivergenceError(f"non-finite gradient at parameter {bad[0]}", index=int(bad[0]))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    net.params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return net, state


def save_checkpoint(net, path, **extra):
    """JSON header line (spec, version, size) followed by little-endian doubles."""
    header = {"format_version": CHECKPOINT_VERSION, "spec": asdict(net.spec),
              "n_params": int(net.params.size), **extra}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != header["n_params"]:
        raise ConfigurationError(f"{path}: truncated checkpoint")
    return Mlp(MlpSpec(**header["spec"]), data.astype(np.float64))
