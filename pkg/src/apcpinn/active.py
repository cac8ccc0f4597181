"""Monte Carlo dropout uncertainty and uncertainty-driven k-sensor placement."""

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nnapc
from .datasets import grid_indices, snap_to_grid, training_set
from .errors import ConfigurationError
from .evaluation import ERROR_COLUMNS, evaluate_model
from .networks import Mlp

LOG_VERSION = 1
LOCATION_TOL = 1e-9


@dataclass
class DropoutStats:
    xs: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    T: int


def _pass_masks(spec, seed, start, stop):
    """Masks of passes ``start..stop-1``; each pass uses its own substream and is shared over x."""
    keep = 1.0 - spec.dropout_p
    out = np.empty((spec.hidden_layers, stop - start, spec.width, 1))
    for j, t in enumerate(range(start, stop)):
        rng = np.random.default_rng([seed, t])
        out[:, j, :, 0] = (rng.random((spec.hidden_layers, spec.width)) < keep) / keep
    return out


def _batched_forward(net, xs, masks):
    """Outputs for a batch of masks: (B, output_dim, n)."""
    h = xs.reshape(1, -1)
    last = net.n_layers - 1
    for layer in range(net.n_layers):
        h = net.weights(layer) @ h + net.bias(layer)
        if layer < last:
            h = np.tanh(h) * masks[layer]
    return h


def mc_dropout_stats(net, query_xs, T, seed, output=0, batch=500):
    """Pointwise sample mean and population std of ``net`` output over ``T`` dropout passes.

    Pass ``t`` draws its mask from the substream ``(seed, t)``, so results do
    not depend on ``batch``.  Batches are merged with the pairwise mean/M2
    update.
    """
    if T < 2:
        raise ConfigurationError("need at least two dropout passes")
    xs = np.atleast_1d(np.asarray(query_xs, dtype=np.float64))
    if not isinstance(net, Mlp) or net.spec.dropout_p == 0:
        y = net.forward(xs)[output]
        return DropoutStats(xs=xs, mean=y, std=np.zeros_like(y), T=T)
    count, mean, m2 = 0, np.zeros(xs.size), np.zeros(xs.size)
    for start in range(0, T, batch):
        stop = min(T, start + batch)
        y = _batched_forward(net, xs, _pass_masks(net.spec, seed, start, stop))[:, output, :]
        nb = stop - start
        mb = y.mean(axis=0)
        m2b = ((y - mb) ** 2).sum(axis=0)
        delta = mb - mean
        total = count + nb
        mean = mean + delta * (nb / total)
        m2 = m2 + m2b + delta * delta * (count * nb / total)
        count = total
    return DropoutStats(xs=xs, mean=mean, std=np.sqrt(np.maximum(m2 / count, 0.0)), T=T)


@dataclass
class SensorBook:
    """Physical k-sensor sites and the multiplicity of each in the loss."""

    locations: list
    weights: list = None

    def __post_init__(self):
        self.locations = [float(x) for x in self.locations]
        if self.weights is None:
            self.weights = [1] * len(self.locations)
        self.weights = [int(w) for w in self.weights]
        if len(self.weights) != len(self.locations) or any(w < 1 for w in self.weights):
            raise ConfigurationError("one positive weight per sensor is required")
        locs = np.sort(self.locations)
        if np.any(np.diff(locs) <= LOCATION_TOL):
            raise ConfigurationError("sensor locations must be unique")

    def copy(self):
        return SensorBook(list(self.locations), list(self.weights))

    @property
    def n_physical(self):
        return len(self.locations)

    def to_dict(self):
        return {"locations": self.locations, "weights": self.weights}


@dataclass(frozen=True)
class Decision:
    kind: str  # "new" or "duplicate"
    x: float
    sensor: float


def propose_sensor(stats, book, rho):
    """Place at the std maximum, or count the nearest sensor again when within ``rho``.

    Returns ``(decision, updated_book)``; ``book`` itself is not modified.
    """
    xs, std = np.asarray(stats.xs), np.asarray(stats.std)
    if xs.size == 0:
        raise ConfigurationError("empty uncertainty curve")
    top = np.flatnonzero(std == std.max())
    x_star = float(xs[top[np.argmin(xs[top])]])
    new = book.copy()
    if book.locations:
        locs = np.asarray(book.locations)
        dist = np.abs(locs - x_star)
        if dist.min() < rho:
            near = np.flatnonzero(dist == dist.min())
            i = int(near[np.argmin(locs[near])])
            new.weights[i] += 1
            return Decision("duplicate", x_star, float(locs[i])), new
    new.locations.append(x_star)
    new.weights.append(1)
    return Decision("new", x_star, x_star), new


@dataclass
class LogEntry:
    step: int
    book: SensorBook
    errors: dict
    decision: Decision = None


@dataclass
class ActiveLearningLog:
    entries: list = field(default_factory=list)
    config_hash: str = ""

    def __len__(self):
        return len(self.entries)

    def column(self, name):
        return np.array([e.errors.get(name, np.nan) for e in self.entries])

    def new_sensor_count(self):
        if not self.entries:
            return 0
        return self.entries[-1].book.n_physical - self.entries[0].book.n_physical

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "n_sensors", "decision", "x_star", *ERROR_COLUMNS])
            for e in self.entries:
                d = e.decision
                w.writerow([e.step, e.book.n_physical, "" if d is None else d.kind,
                            "" if d is None else repr(d.x),
                            *(repr(float(e.errors.get(c, np.nan))) for c in ERROR_COLUMNS)])

    def to_json(self, path):
        data = {
            "format_version": LOG_VERSION,
            "config_hash": self.config_hash,
            "steps": [
                {"step": e.step, "book": e.book.to_dict(),
                 "errors": {k: v for k, v in e.errors.items() if np.isscalar(v)},
                 "decision": None if e.decision is None else
                 {"kind": e.decision.kind, "x": e.decision.x, "sensor": e.decision.sensor}}
                for e in self.entries
            ],
        }
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True, default=float)


@dataclass
class ActiveSetup:
    """Everything one active-learning run needs besides the loop settings."""

    problem: nnapc.ProblemSpec
    truth: object
    u_xs: np.ndarray
    collocation_xs: np.ndarray
    book: SensorBook
    arch: nnapc.Architecture
    schedule: nnapc.Schedule
    test_truth: object = None
    order: int = 1
    energy_threshold: float = 0.99
    seed: int = 0
    restarts: int = 1
    trial_epochs: int = 0


@dataclass(frozen=True)
class ActiveSettings:
    iterations: int = 15
    rho: float = 0.03
    mc_passes: int = 10000
    query_points: int = 201
    patience: int = 0  # 0 disables the early stop on k prediction error


def placement_net(model, problem):
    """Network whose dropout spread drives placement, with the output index to use."""
    if problem.stochastic:
        if model.k_modes_net is None:
            raise ConfigurationError("stochastic placement needs a k mode network")
        return model.k_modes_net, 0
    return model.k_mean_net, 0


def _fit(setup, book, step):
    ts = training_set(setup.problem.kind, setup.truth, setup.u_xs, setup.collocation_xs,
                      book.locations, book.weights)
    model, _ = nnapc.fit_surrogate(setup.problem, ts, setup.arch, setup.order, setup.energy_threshold,
                                   setup.seed, setup.schedule, setup.restarts, setup.trial_epochs)
    return model, ts


def active_learning_loop(setup, settings=ActiveSettings(), on_step=None):
    """Train, estimate dropout spread, place or duplicate one k-sensor, repeat.

    Every step retrains from a fresh initialization on the current sensor
    book (the reduction is refit, so the eigenstructure may change).  New
    sites snap to the ground-truth grid.  With ``patience`` > 0 the loop also
    stops once the k prediction error has not improved for that many steps.
    """
    if setup.problem.kind not in ("deterministic_elliptic", "inverse_elliptic"):
        raise ConfigurationError("active learning places k-sensors of an elliptic problem")
    grid = setup.truth.grid
    query = np.linspace(-1.0, 1.0, settings.query_points)
    log = ActiveLearningLog()
    book = setup.book.copy()
    grid_indices(grid, book.locations)
    best, stale = np.inf, 0
    for step in range(settings.iterations + 1):
        model, ts = _fit(setup, book, step)
        errors = evaluate_model(model, setup.problem, ts, setup.truth, setup.test_truth)
        net, out = placement_net(model, setup.problem)
        stats = mc_dropout_stats(net, query, settings.mc_passes, seed=setup.seed * 1000 + step,
                                 output=out)
        decision, proposed = propose_sensor(stats, book, settings.rho)
        entry = LogEntry(step=step, book=book.copy(), errors=errors, decision=decision)
        log.entries.append(entry)
        if on_step is not None:
            on_step(entry, model, stats)
        if step == settings.iterations:
            break
        k_err = errors.get("k_pred", np.nan)
        if k_err < best:
            best, stale = k_err, 0
        else:
            stale += 1
        if settings.patience and stale >= settings.patience:
            break
        if decision.kind == "new":
            x = snap_to_grid(grid, decision.x)
            if any(abs(x - loc) <= LOCATION_TOL for loc in book.locations):
                i = int(np.argmin(np.abs(np.asarray(book.locations) - x)))
                proposed = book.copy()
                proposed.weights[i] += 1
            else:
                proposed = replace(proposed, locations=book.locations + [x],
                                   weights=book.weights + [1])
        book = proposed
    return log
