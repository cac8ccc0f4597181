"""NN-aPC surrogate: mode networks, aPC-informed residual, composite loss, training.

The random input (k for the inverse problem, the forcing f for the forward one)
is reduced by PCA to whitened coordinates ``xi``; the solution is expanded in
the empirical aPC basis ``psi_alpha(xi)`` and every spatial mode function is a
network output.  Because the networks only see ``x``, the loss over ``N``
snapshots needs network evaluations at the sensor and collocation sites only;
snapshots enter through the matrix ``psi(xi_s)`` and the scaled ``xi``.
"""

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DualValue
from .errors import ConfigurationError, DivergenceError
from .networks import (
    AdamState,
    DropoutMask,
    Mlp,
    MlpSpec,
    adam_step,
    draw_mask,
    init_mlp,
    l2_gradient,
    l2_penalty,
    load_checkpoint,
    save_checkpoint,
)
from .reduction import ApcBasis, PcaModel, build_apc_basis, extract_xi, fit_pca

BUNDLE_VERSION = 1

KINDS = ("forward_poisson", "inverse_elliptic", "deterministic_poisson", "deterministic_elliptic")
ELLIPTIC = ("inverse_elliptic", "deterministic_elliptic")
STOCHASTIC = ("forward_poisson", "inverse_elliptic")


@dataclass(frozen=True)
class Profile:
    """``constant + amplitude * sin(frequency * pi * x)``."""

    constant: float = 0.0
    amplitude: float = 0.0
    frequency: float = 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.constant + self.amplitude * np.sin(self.frequency * np.pi * x)

    def d2(self, x):
        x = np.asarray(x, dtype=np.float64)
        w = self.frequency * np.pi
        return -self.amplitude * w * w * np.sin(w * x)


@dataclass(frozen=True)
class ProblemSpec:
    kind: str
    forcing: Profile = Profile(constant=10.0)
    boundary: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unsupported problem kind {self.kind!r}")

    @property
    def has_k(self):
        return self.kind in ELLIPTIC

    @property
    def stochastic(self):
        return self.kind in STOCHASTIC

    def to_dict(self):
        return {"kind": self.kind, "forcing": asdict(self.forcing), "boundary": list(self.boundary)}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], forcing=Profile(**d.get("forcing", {})),
                   boundary=tuple(d.get("boundary", (0.0, 0.0))))


@dataclass
class TrainingSet:
    """Snapshot data; row ``s`` of every matrix belongs to the same random event.

    ``k_weights`` gives the multiplicity of each (physical) k-sensor in the
    loss.  ``f_snapshots`` holds forcing readings at the collocation sites and
    is used only by the forward problem.
    """

    u_sensor_xs: np.ndarray
    u_snapshots: np.ndarray
    collocation_xs: np.ndarray
    k_sensor_xs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    k_snapshots: np.ndarray = None
    f_snapshots: np.ndarray = None
    k_weights: np.ndarray = None

    def __post_init__(self):
        self.u_sensor_xs = np.asarray(self.u_sensor_xs, dtype=np.float64)
        self.collocation_xs = np.asarray(self.collocation_xs, dtype=np.float64)
        self.k_sensor_xs = np.asarray(self.k_sensor_xs, dtype=np.float64)
        self.u_snapshots = np.atleast_2d(np.asarray(self.u_snapshots, dtype=np.float64))
        n = self.u_snapshots.shape[0]
        if self.k_snapshots is None:
            self.k_snapshots = np.zeros((n, self.k_sensor_xs.size))
        self.k_snapshots = np.asarray(self.k_snapshots, dtype=np.float64).reshape(n, -1)
        if self.f_snapshots is not None:
            self.f_snapshots = np.asarray(self.f_snapshots, dtype=np.float64).reshape(n, -1)
        if self.k_weights is None:
            self.k_weights = np.ones(self.k_sensor_xs.size, dtype=int)
        self.k_weights = np.asarray(self.k_weights, dtype=int)
        for xs in (self.u_sensor_xs, self.collocation_xs, self.k_sensor_xs):
            if np.any(np.abs(xs) > 1.0 + 1e-12):
                raise ConfigurationError("sensor and collocation sites must lie in [-1, 1]")
        if self.u_snapshots.shape[1] != self.u_sensor_xs.size:
            raise ConfigurationError("u_snapshots columns do not match u_sensor_xs")
        if self.k_snapshots.shape[1] != self.k_sensor_xs.size:
            raise ConfigurationError("k_snapshots columns do not match k_sensor_xs")
        if self.k_weights.shape != self.k_sensor_xs.shape or np.any(self.k_weights < 1):
            raise ConfigurationError("k_weights must be positive integers, one per k-sensor")

    @property
    def n_snapshots(self):
        return self.u_snapshots.shape[0]

    def expanded_k(self):
        """k-sensor sites and readings with each sensor repeated by its weight."""
        return (np.repeat(self.k_sensor_xs, self.k_weights),
                np.repeat(self.k_snapshots, self.k_weights, axis=1))


@dataclass(frozen=True)
class Architecture:
    """(hidden_layers, width) per network family plus dropout and L2 settings."""

    u_mean: tuple = (2, 4)
    u_modes: tuple = (4, 32)
    k_mean: tuple = (2, 4)
    k_modes: tuple = (4, 32)
    u_mean_dropout: float = 0.0
    k_mean_dropout: float = 0.0
    k_modes_dropout: float = 0.0
    l2_lambda: float = 0.0

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ClosedForm:
    """Fixed mode provider given by ``fn(x) -> (value, d1, d2)``, each (n_outputs, n)."""

    fn: object
    n_outputs: int = 1

    def forward_jet(self, x, mask=None):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        return tuple(np.broadcast_to(np.asarray(a, dtype=np.float64), (self.n_outputs, x.size))
                     for a in self.fn(x))

    def forward(self, x, mask=None):
        return self.forward_jet(x)[0]


@dataclass
class SurrogateModel:
    """Mode networks plus the reduction (PCA, aPC basis) they are defined on.

    ``u_nets[g]`` outputs the modes of total order ``g`` in basis order.  For
    deterministic kinds the basis is the single constant polynomial and
    ``pca`` is ``None``.
    """

    u_nets: list
    basis: ApcBasis
    pca: PcaModel = None
    k_mean_net: object = None
    k_modes_net: object = None

    def __post_init__(self):
        sizes = self.basis.group_sizes()
        if [net.n_outputs for net in self.u_nets] != sizes:
            raise ConfigurationError(
                f"u network outputs {[n.n_outputs for n in self.u_nets]} do not match "
                f"basis groups {sizes}"
            )
        if self.k_modes_net is not None and self.k_modes_net.n_outputs != self.m:
            raise ConfigurationError("k mode network must output one mode per retained eigenvalue")

    @property
    def m(self):
        return self.basis.dim

    @property
    def xi(self):
        return self.basis.sample_set

    def named_nets(self):
        out = [(f"u{g}", net) for g, net in enumerate(self.u_nets)]
        if self.k_mean_net is not None:
            out.append(("k0", self.k_mean_net))
        if self.k_modes_net is not None and self.m > 0:
            out.append(("kmodes", self.k_modes_net))
        return out

    def trainable(self):
        return [(name, net) for name, net in self.named_nets() if isinstance(net, Mlp)]

    def sqrt_eigenvalues(self):
        if self.pca is None:
            return np.zeros(0)
        return np.sqrt(self.pca.retained_eigenvalues[: self.m])

    def copy(self):
        def cp(n):
            return n.copy() if isinstance(n, Mlp) else n
        return SurrogateModel(
            u_nets=[cp(n) for n in self.u_nets], basis=self.basis, pca=self.pca,
            k_mean_net=cp(self.k_mean_net), k_modes_net=cp(self.k_modes_net),
        )


@dataclass
class LossBreakdown:
    mse_u: float
    mse_k: float
    mse_f: float
    l2: float

    @property
    def total(self):
        return self.mse_u + self.mse_k + self.mse_f + self.l2

    def to_dict(self):
        return {"mse_u": self.mse_u, "mse_k": self.mse_k, "mse_f": self.mse_f,
                "l2": self.l2, "total": self.total}


def trivial_basis():
    """The single constant polynomial (zero random dimensions, one snapshot)."""
    one = np.ones((1, 1))
    return ApcBasis(indices=[()], coeffs=one, monomial_coeffs=one.copy(), sample_set=np.zeros((1, 0)))


def random_input_snapshots(problem, ts):
    """Sensor readings that drive the reduction: forcing (forward) or k (inverse)."""
    if problem.kind == "forward_poisson":
        if ts.f_snapshots is None:
            raise ConfigurationError("forward_poisson needs forcing snapshots at the collocation sites")
        return ts.f_snapshots
    return ts.k_snapshots


def _seed(seed, j):
    return [int(seed), int(j)]


def build_surrogate(problem, ts, arch=Architecture(), order=1, energy_threshold=0.99, seed=0):
    """Fit the reduction on the training snapshots and initialize the networks."""
    _check_groups(problem, ts)
    lam = arch.l2_lambda
    if problem.stochastic:
        pca = fit_pca(random_input_snapshots(problem, ts), energy_threshold)
        xi = extract_xi(pca, random_input_snapshots(problem, ts))
        basis = build_apc_basis(xi, order)
    else:
        pca, basis = None, trivial_basis()
    sizes = basis.group_sizes()
    u_nets = []
    for g, size in enumerate(sizes):
        layers, width = arch.u_mean if g == 0 else arch.u_modes
        p = arch.u_mean_dropout if g == 0 else 0.0
        u_nets.append(init_mlp(MlpSpec(size, layers, width, p, lam), _seed(seed, g)))
    k_mean = k_modes = None
    if problem.has_k:
        layers, width = arch.k_mean
        k_mean = init_mlp(MlpSpec(1, layers, width, arch.k_mean_dropout, lam), _seed(seed, 100))
        # start k at the sensor average instead of 0, where the sign of k is undetermined
        k_mean.bias(k_mean.n_layers - 1)[...] = ts.k_snapshots.mean()
        if basis.dim > 0:
            layers, width = arch.k_modes
            k_modes = init_mlp(MlpSpec(basis.dim, layers, width, arch.k_modes_dropout, lam),
                               _seed(seed, 101))
    return SurrogateModel(u_nets=u_nets, basis=basis, pca=pca, k_mean_net=k_mean, k_modes_net=k_modes)


def _check_groups(problem, ts):
    if ts.u_sensor_xs.size == 0:
        raise ConfigurationError(f"{problem.kind} needs u-sensors (at least the boundary)")
    if ts.collocation_xs.size == 0:
        raise ConfigurationError(f"{problem.kind} needs collocation points")
    if problem.has_k and ts.k_sensor_xs.size == 0:
        raise ConfigurationError(f"{problem.kind} needs k-sensors")
    if problem.kind == "forward_poisson":
        if ts.f_snapshots is None or ts.f_snapshots.shape[1] != ts.collocation_xs.size:
            raise ConfigurationError("forward_poisson needs f readings at every collocation site")
    if not problem.stochastic and ts.n_snapshots != 1:
        raise ConfigurationError(f"{problem.kind} takes exactly one snapshot")


# -- pointwise reconstruction ---------------------------------------------------


def _jets(provider, x):
    return provider.forward_jet(x)


def reconstruct_k(model, x, xi):
    """k~(x) = k0_net(x) + sum_i sqrt(lambda_i) kmodes_i(x) xi_i, with x-derivatives."""
    if model.k_mean_net is None:
        raise ConfigurationError("model has no k networks")
    v, d1, d2 = (a[0] for a in _jets(model.k_mean_net, x))
    if model.m > 0 and model.k_modes_net is not None:
        c = model.sqrt_eigenvalues() * np.asarray(xi, dtype=np.float64).reshape(-1)[: model.m]
        mv, m1, m2 = _jets(model.k_modes_net, x)
        v, d1, d2 = v + c @ mv, d1 + c @ m1, d2 + c @ m2
    return DualValue(v, d1, d2)


def u_mode_jets(model, x):
    """All u modes (P+1, n) and their first/second x-derivatives."""
    parts = [_jets(net, x) for net in model.u_nets]
    return tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(3))


def reconstruct_u(model, x, xi):
    """u~(x) = sum_alpha u_alpha(x) psi_alpha(xi), with x-derivatives."""
    psi = model.basis.evaluate(np.asarray(xi, dtype=np.float64).reshape(1, -1))[0]
    v, d1, d2 = u_mode_jets(model, x)
    return DualValue(psi @ v, psi @ d1, psi @ d2)


@dataclass
class SnapshotContext:
    """Random event at which a residual is evaluated.

    ``forcing`` overrides the problem's forcing profile at the query points
    (the forward problem passes its reconstructed forcing here).
    """

    xi: np.ndarray = None
    forcing: np.ndarray = None


def residual(model, problem, x, context=None):
    """Pointwise PDE residual of the surrogate at ``x`` for one random event."""
    context = context or SnapshotContext()
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    xi = np.zeros(model.m) if context.xi is None else context.xi
    f = problem.forcing(x) if context.forcing is None else np.asarray(context.forcing)
    u = reconstruct_u(model, x, xi)
    if problem.kind in ("forward_poisson", "deterministic_poisson"):
        if problem.kind == "forward_poisson" and context.forcing is None:
            raise ConfigurationError("forward_poisson residual needs the reconstructed forcing")
        return -u.d2_dx2 - f
    if problem.kind in ELLIPTIC:
        k = reconstruct_k(model, x, xi)
        return -k.d_dx * u.d_dx - k.value * u.d2_dx2 - f
    raise ConfigurationError(f"unsupported problem kind {problem.kind!r}")


# -- loss program ---------------------------------------------------------------


def _index_of(points, xs):
    return np.minimum(np.searchsorted(points, xs), points.size - 1)


def _unmasked(spec, n):
    return DropoutMask(layers=[np.ones((spec.width, n)) for _ in range(spec.hidden_layers)],
                       p=spec.dropout_p)


class LossProgram:
    """Composite loss of one (model, problem, training set), compiled once.

    Networks are evaluated only at the union of sensor and collocation sites.
    The graph holds the network parameters as variables, so every call binds
    the current parameters (and dropout masks) and re-runs the same graph.
    Snapshot-dependent matrices (``psi``, scaled ``xi``, data) are inputs,
    which also allows evaluating a subset of snapshot rows.
    """

    def __init__(self, model, problem, ts):
        _check_groups(problem, ts)
        self.model, self.problem, self.ts = model, problem, ts
        k_xs, k_data = ts.expanded_k()
        self.points = np.unique(np.concatenate([ts.u_sensor_xs, ts.collocation_xs, k_xs]))
        n = self.points.size
        u_idx = _index_of(self.points, ts.u_sensor_xs)
        c_idx = _index_of(self.points, ts.collocation_xs)
        k_idx = _index_of(self.points, k_xs)

        g = self.graph = ad.Graph()
        x = g.input("x", shape=(1, n))
        psi = g.input("psi")

        u_jets = [self._jet(g, x, f"u{j}", net, 2) for j, net in enumerate(model.u_nets)]
        if len(u_jets) == 1:
            u0, u2, u1 = u_jets[0].value, u_jets[0].d2, u_jets[0].d1
        else:
            u0 = g.concat([j.value for j in u_jets])
            u1 = g.concat([j.d1 for j in u_jets])
            u2 = g.concat([j.d2 for j in u_jets])

        mse_u = ((psi @ u0.take(u_idx) - g.input("u_data")) ** 2).mean()
        u2c = psi @ u2.take(c_idx)
        mse_k = g.constant(0.0)
        if problem.kind == "forward_poisson":
            res = -u2c - g.input("f_data")
        else:
            fx = g.constant(problem.forcing(ts.collocation_xs)[None, :])
            if problem.kind == "deterministic_poisson":
                res = -u2c - fx
            else:
                k0 = self._jet(g, x, "k0", model.k_mean_net, 1)
                kv_s, kv_c, k1_c = k0.value.take(k_idx), k0.value.take(c_idx), k0.d1.take(c_idx)
                if model.m > 0:
                    km = self._jet(g, x, "kmodes", model.k_modes_net, 1)
                    xis = g.input("xis")
                    kv_s = kv_s + xis @ km.value.take(k_idx)
                    kv_c = kv_c + xis @ km.value.take(c_idx)
                    k1_c = k1_c + xis @ km.d1.take(c_idx)
                mse_k = ((kv_s - g.input("k_data")) ** 2).mean()
                res = -(k1_c * (psi @ u1.take(c_idx))) - kv_c * u2c - fx
        mse_f = (res ** 2).mean()
        self.terms = [mse_u, mse_k, mse_f]
        self.data_loss = mse_u + mse_k
        self.loss = self.data_loss + mse_f

        self._fixed = {"x": self.points[None, :]}
        self._rows = {"psi": model.basis.evaluate(model.xi), "u_data": ts.u_snapshots}
        if problem.kind == "forward_poisson":
            self._rows["f_data"] = model.pca.reconstruct(model.xi)
        if problem.has_k:
            self._rows["k_data"] = k_data
            if model.m > 0:
                self._rows["xis"] = model.xi * model.sqrt_eigenvalues()
        self.nets = model.trainable()
        self._dropout = [(name, net) for name, net in self.nets if net.spec.dropout_p > 0]
        self._no_mask = {name: _unmasked(net.spec, n) for name, net in self._dropout}

    def _jet(self, g, x, prefix, provider, order):
        if isinstance(provider, Mlp):
            return ad.input_derivatives(g, provider.build_graph(g, x, prefix), wrt=x, order=order)
        v, d1, d2 = provider.forward_jet(self.points)
        return ad.Jet(g.constant(v), g.constant(d1), g.constant(d2))

    @property
    def has_dropout(self):
        return bool(self._dropout)

    def draw_masks(self, rng):
        """Fresh independent masks per (hidden unit, evaluation site)."""
        return {name: draw_mask(net.spec, rng, self.points.size) for name, net in self._dropout}

    def bindings(self, masks=None, rows=None):
        b = dict(self._fixed)
        for name, net in self.nets:
            b.update(net.bindings(name))
        for key, val in self._rows.items():
            b[key] = val if rows is None else val[rows]
        for name, net in self._dropout:
            mask = (masks or {}).get(name) or self._no_mask[name]
            b.update(net.mask_bindings(name, mask))
        return b

    def _breakdown(self, values):
        l2 = sum(l2_penalty(net) for _, net in self.nets)
        return LossBreakdown(*(float(v) for v in values), l2=float(l2))

    def breakdown(self, masks=None, rows=None):
        """Loss terms; without ``masks`` every dropout net runs unmasked."""
        return self._breakdown(ad.evaluate(self.graph, self.terms, self.bindings(masks, rows)))

    def value_and_grad(self, masks=None, rows=None, data_only=False):
        """Loss breakdown and one flat gradient per trainable network (L2 included).

        With ``data_only`` the gradient ignores the residual term (the
        breakdown still reports it).
        """
        target = self.data_loss if data_only else self.loss
        _, grads, terms = ad.value_and_gradient(self.graph, target, self.bindings(masks, rows),
                                                aux=self.terms)
        flat = {}
        for name, net in self.nets:
            gvec = net.flat_gradient(grads, name)
            if net.spec.l2_lambda:
                gvec += l2_gradient(net)
            flat[name] = gvec
        return self._breakdown(terms), flat


def composite_loss(model, problem, ts):
    """Mean-squared u, k and residual terms over all snapshots plus the L2 penalties."""
    return LossProgram(model, problem, ts).breakdown()


# -- training -------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    epochs: int = 20000
    learning_rate: float = 1e-3
    seed: int = 0
    batch_size: int = 0
    log_every: int = 100
    warmup_epochs: int = 0

    def __post_init__(self):
        if (self.epochs < 0 or self.learning_rate <= 0 or self.batch_size < 0
                or self.log_every < 1 or self.warmup_epochs < 0):
            raise ConfigurationError(f"invalid schedule {self}")


@dataclass
class TrainResult:
    model: SurrogateModel
    history: list
    final: LossBreakdown


def train(model, problem, ts, schedule=Schedule(), program=None):
    """Adam descent on the composite loss; updates the model's networks in place.

    The loss is recorded every ``log_every`` epochs (before that epoch's
    update).  Dropout masks are redrawn every epoch.  ``batch_size`` > 0
    samples that many snapshot rows per epoch without replacement.  The
    first ``warmup_epochs`` epochs (counted within ``epochs``) descend on the
    data terms only: for the inverse problems, starting on the full loss lets
    the residual drive k through zero into a basin that ignores the data.
    """
    program = program or LossProgram(model, problem, ts)
    states = {name: AdamState.zeros(net.spec.n_params, schedule.learning_rate)
              for name, net in program.nets}
    mask_rng = np.random.default_rng([schedule.seed, 1])
    row_rng = np.random.default_rng([schedule.seed, 2])
    n = ts.n_snapshots
    batch = schedule.batch_size if 0 < schedule.batch_size < n else 0
    history = []
    for epoch in range(schedule.epochs):
        masks = program.draw_masks(mask_rng) if program.has_dropout else None
        rows = np.sort(row_rng.choice(n, batch, replace=False)) if batch else None
        loss, grads = program.value_and_grad(masks, rows, data_only=epoch < schedule.warmup_epochs)
        if not np.isfinite(loss.total):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        if epoch % schedule.log_every == 0:
            history.append((epoch, loss))
        for name, net in program.nets:
            try:
                adam_step(net, grads[name], states[name])
            except DivergenceError as exc:
                raise DivergenceError(f"{name}: {exc} at epoch {epoch}", epoch=epoch,
                                      index=exc.index) from None
    final = program.breakdown()
    if not np.isfinite(final.total):
        raise DivergenceError("non-finite final loss", epoch=schedule.epochs)
    history.append((schedule.epochs, final))
    return TrainResult(model=model, history=history, final=final)


def candidate_seed(seed, j):
    """Initialization seed of restart candidate ``j``; candidate 0 keeps ``seed``."""
    return int(seed) if j == 0 else int(np.random.SeedSequence([int(seed), j]).generate_state(1)[0])


def fit_surrogate(problem, ts, arch=Architecture(), order=1, energy_threshold=0.99, seed=0,
                  schedule=Schedule(), restarts=1, trial_epochs=0):
    """Build and train a surrogate, choosing among ``restarts`` initializations.

    Each candidate trains for ``trial_epochs`` under ``schedule``; the one with
    the lowest total training loss is rebuilt and trained for the full
    schedule.  Test data plays no part in the choice.
    """
    best_j = 0
    if restarts > 1 and trial_epochs > 0:
        trial = replace(schedule, epochs=min(trial_epochs, schedule.epochs),
                        warmup_epochs=min(schedule.warmup_epochs, trial_epochs))
        scores = []
        for j in range(restarts):
            model = build_surrogate(problem, ts, arch, order, energy_threshold, candidate_seed(seed, j))
            try:
                scores.append(train(model, problem, ts, trial).final.total)
            except DivergenceError:
                scores.append(np.inf)
        best_j = int(np.argmin(scores))
    model = build_surrogate(problem, ts, arch, order, energy_threshold, candidate_seed(seed, best_j))
    return model, train(model, problem, ts, schedule)


# -- prediction and statistics ----------------------------------------------------


@dataclass
class Prediction:
    xs: np.ndarray
    xi: np.ndarray
    u: np.ndarray
    k: np.ndarray = None


def predict_snapshots(model, problem, readings, query_xs):
    """k~ and u~ curves for new sensor snapshots (one row per snapshot).

    ``readings`` are k-sensor readings for the inverse problem and forcing
    readings at the collocation sites for the forward problem; deterministic
    models take no readings.
    """
    xs = np.atleast_1d(np.asarray(query_xs, dtype=np.float64))
    if model.pca is None:
        xi = np.zeros((1, 0))
    else:
        xi = np.atleast_2d(extract_xi(model.pca, np.atleast_2d(readings)))
    psi = model.basis.evaluate(xi)
    u = psi @ u_mode_jets(model, xs)[0]
    k = None
    if model.k_mean_net is not None:
        k = np.broadcast_to(model.k_mean_net.forward(xs)[0], (xi.shape[0], xs.size)).copy()
        if model.m > 0:
            k = k + (xi * model.sqrt_eigenvalues()) @ model.k_modes_net.forward(xs)
    return Prediction(xs=xs, xi=xi, u=u, k=k)


def predict_snapshot(model, problem, readings, query_xs):
    """Single-snapshot form of :func:`predict_snapshots`: returns ``(k curve, u curve)``."""
    p = predict_snapshots(model, problem, readings, query_xs)
    return (None if p.k is None else p.k[0]), p.u[0]


@dataclass
class Statistics:
    xs: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray
    k_mean: np.ndarray = None
    k_std: np.ndarray = None


def statistics(model, query_xs):
    """Mean and std curves from the expansion coefficients (orthonormal basis)."""
    xs = np.atleast_1d(np.asarray(query_xs, dtype=np.float64))
    modes = u_mode_jets(model, xs)[0]
    out = Statistics(xs=xs, u_mean=modes[0], u_std=np.sqrt(np.sum(modes[1:] ** 2, axis=0)))
    if model.k_mean_net is not None:
        out.k_mean = model.k_mean_net.forward(xs)[0]
        if model.m > 0:
            km = model.k_modes_net.forward(xs)
            out.k_std = np.sqrt(model.pca.retained_eigenvalues[: model.m] @ (km ** 2))
        else:
            out.k_std = np.zeros_like(xs)
    return out


def empirical_statistics(model, query_xs, xi=None):
    """Sample mean and population std of k~, u~ over a set of xi (default: training xi)."""
    xs = np.atleast_1d(np.asarray(query_xs, dtype=np.float64))
    xi = model.xi if xi is None else np.atleast_2d(xi)
    u = model.basis.evaluate(xi) @ u_mode_jets(model, xs)[0]
    out = Statistics(xs=xs, u_mean=u.mean(axis=0), u_std=u.std(axis=0))
    if model.k_mean_net is not None:
        k = model.k_mean_net.forward(xs)[0][None, :]
        if model.m > 0:
            k = k + (xi * model.sqrt_eigenvalues()) @ model.k_modes_net.forward(xs)
        out.k_mean, out.k_std = k.mean(axis=0), k.std(axis=0)
    return out


def u_modes(model, query_xs):
    """Learned u modes, shape (P+1, n), in basis order."""
    return u_mode_jets(model, query_xs)[0]


def k_modes(model, query_xs):
    """Learned k modes (unscaled KL eigenfunction nets), shape (M, n)."""
    if model.k_modes_net is None or model.m == 0:
        return np.zeros((0, np.size(query_xs)))
    return model.k_modes_net.forward(query_xs)


# -- bundles ----------------------------------------------------------------------


def save_bundle(model, problem, path, **manifest):
    """Write checkpoints, ``pca.csv``, ``basis.csv``, ``xi.csv`` and ``manifest.json``."""
    os.makedirs(path, exist_ok=True)
    nets = {}
    for name, net in model.named_nets():
        if not isinstance(net, Mlp):
            raise ConfigurationError(f"network {name!r} is closed-form and cannot be saved")
        fname = f"{name}.ckpt"
        save_checkpoint(net, os.path.join(path, fname))
        nets[name] = fname
    if model.pca is not None:
        pca = model.pca
        data = np.column_stack([pca.k0, pca.eigenvalues, pca.eigenvectors])
        header = ",".join(["k0", "lambda"] + [f"phi_{j}" for j in range(pca.n_sensors)])
        np.savetxt(os.path.join(path, "pca.csv"), data, delimiter=",", header=header,
                   comments="", fmt="%.17g")
    model.basis.to_csv(os.path.join(path, "basis.csv"))
    xi = model.xi.reshape(len(model.xi), -1)
    header = ",".join(["snapshot"] + [f"xi_{j + 1}" for j in range(xi.shape[1])])
    np.savetxt(os.path.join(path, "xi.csv"), np.column_stack([np.arange(len(xi)), xi]),
               delimiter=",", fmt="%.17g", header=header, comments="")
    info = {
        "format_version": BUNDLE_VERSION,
        "problem": problem.to_dict(),
        "networks": nets,
        "pca": None if model.pca is None else {
            "m": model.pca.m, "energy_threshold": model.pca.energy_threshold},
        "n_snapshots": int(model.xi.shape[0]),
        **manifest,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True, default=_json_default)
    return info


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def load_bundle(path):
    """Inverse of :func:`save_bundle`; returns ``(model, problem, manifest)``."""
    with open(os.path.join(path, "manifest.json")) as fh:
        info = json.load(fh)
    if info.get("format_version") != BUNDLE_VERSION:
        raise ConfigurationError(f"{path}: unsupported bundle version {info.get('format_version')}")
    problem = ProblemSpec.from_dict(info["problem"])
    nets = {name: load_checkpoint(os.path.join(path, f)) for name, f in info["networks"].items()}
    pca = None
    if info["pca"] is not None:
        data = np.loadtxt(os.path.join(path, "pca.csv"), delimiter=",", skiprows=1, ndmin=2)
        pca = PcaModel(k0=data[:, 0].copy(), eigenvalues=data[:, 1].copy(),
                       eigenvectors=data[:, 2:].copy(), m=info["pca"]["m"],
                       energy_threshold=info["pca"]["energy_threshold"])
    indices, coeffs = ApcBasis.read_csv(os.path.join(path, "basis.csv"))
    xi = np.loadtxt(os.path.join(path, "xi.csv"), delimiter=",", skiprows=1, ndmin=2)[:, 1:]
    xi = xi.reshape(info["n_snapshots"], len(indices[0]))
    basis = ApcBasis.from_table(indices, coeffs, xi)
    n_groups = basis.order + 1
    model = SurrogateModel(
        u_nets=[nets[f"u{g}"] for g in range(n_groups)], basis=basis, pca=pca,
        k_mean_net=nets.get("k0"), k_modes_net=nets.get("kmodes"),
    )
    return model, problem, info
