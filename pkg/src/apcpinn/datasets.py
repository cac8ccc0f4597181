"""Ground-truth ensembles and sensor snapshots for the benchmark problems."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataAvailabilityError
from .fields import (
    DEFAULT_GRID_POINTS,
    FieldEnsemble,
    KernelSpec,
    sample_gp,
    solve_elliptic_ensemble,
    solve_poisson_ensemble,
    uniform_grid,
)
from .nnapc import Profile, TrainingSet

EVAL_POINTS = 101
TRAIN_STREAM = 0
TEST_STREAM = 1
GRID_TOL = 1e-9


def equidistant(n):
    """``n`` equally spaced sites on [-1, 1] including both ends."""
    if n < 1:
        raise ConfigurationError("need at least one site")
    return np.array([0.0]) if n == 1 else np.linspace(-1.0, 1.0, n)


def eval_grid():
    return np.linspace(-1.0, 1.0, EVAL_POINTS)


def grid_indices(grid, xs, tol=GRID_TOL):
    """Indices of ``xs`` on a uniform ``grid``; every site must be a grid node."""
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    h = (grid[-1] - grid[0]) / (grid.size - 1)
    idx = np.rint((xs - grid[0]) / h).astype(int)
    bad = (idx < 0) | (idx >= grid.size)
    idx = np.clip(idx, 0, grid.size - 1)
    bad |= np.abs(grid[idx] - xs) > tol
    if np.any(bad):
        raise DataAvailabilityError(f"sites {xs[bad].tolist()} are not on the generation grid")
    return idx


def snap_to_grid(grid, x):
    """Nearest generation-grid node to ``x`` (ties to the left)."""
    i = int(np.argmin(np.abs(grid - x)))
    return float(grid[i])


@dataclass
class Ensemble:
    """Ground-truth trajectories on the generation grid (one row per event)."""

    grid: np.ndarray
    u: np.ndarray
    k: np.ndarray = None
    f: np.ndarray = None

    def __len__(self):
        return self.u.shape[0]

    def read(self, name, xs):
        values = getattr(self, name)
        if values is None:
            raise DataAvailabilityError(f"ensemble has no {name} trajectories")
        return values[:, grid_indices(self.grid, xs)]

    def on(self, name, xs):
        """Trajectories restricted to arbitrary sites by linear interpolation."""
        values = getattr(self, name)
        if values is None:
            raise DataAvailabilityError(f"ensemble has no {name} trajectories")
        xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
        try:
            return values[:, grid_indices(self.grid, xs)]
        except DataAvailabilityError:
            return np.stack([np.interp(xs, self.grid, row) for row in values])

    def rows(self, idx):
        def pick(a):
            return None if a is None else a[idx]
        return Ensemble(self.grid, self.u[idx], pick(self.k), pick(self.f))


def forward_ensemble(n, seed, stream=TRAIN_STREAM, kernel=KernelSpec(1.0, 0.5),
                     mean=Profile(amplitude=10.0, frequency=1.0), grid_points=DEFAULT_GRID_POINTS):
    """Gaussian forcing trajectories and their Poisson solutions."""
    grid = uniform_grid(grid_points)
    f = sample_gp(mean, kernel, grid, n, seed, stream=stream)
    u = solve_poisson_ensemble(f)
    return Ensemble(grid=grid, u=u.trajectories, f=f.trajectories)


def inverse_ensemble(n, seed, stream=TRAIN_STREAM, kernel=KernelSpec(0.1, 1.0),
                     log_mean=Profile(amplitude=0.2, frequency=1.5), forcing=Profile(constant=10.0),
                     grid_points=DEFAULT_GRID_POINTS):
    """Log-normal coefficient trajectories and their elliptic solutions."""
    grid = uniform_grid(grid_points)
    k = sample_gp(log_mean, kernel, grid, n, seed, log_normal=True, stream=stream)
    u = solve_elliptic_ensemble(k, forcing(grid))
    return Ensemble(grid=grid, u=u.trajectories, k=k.trajectories)


def deterministic_poisson_truth(forcing, solution=None, grid_points=DEFAULT_GRID_POINTS):
    """Single trajectory: closed-form ``solution`` when given, else an FD solve."""
    grid = uniform_grid(grid_points)
    f = forcing(grid)[None, :]
    if solution is not None:
        u = np.asarray(solution(grid), dtype=np.float64)[None, :]
    else:
        u = solve_poisson_ensemble(FieldEnsemble(grid, f)).trajectories
    return Ensemble(grid=grid, u=u, f=f)


def deterministic_elliptic_truth(k_fn, forcing, grid_points=DEFAULT_GRID_POINTS):
    grid = uniform_grid(grid_points)
    k = np.asarray(k_fn(grid), dtype=np.float64)[None, :]
    u = solve_elliptic_ensemble(FieldEnsemble(grid, k), forcing(grid)).trajectories
    return Ensemble(grid=grid, u=u, k=k)


def training_set(kind, ensemble, u_xs, collocation_xs, k_xs=(), k_weights=None):
    """Sensor snapshots read from ``ensemble`` at the given sites."""
    k_xs = np.asarray(k_xs, dtype=np.float64)
    k_snap = ensemble.read("k", k_xs) if k_xs.size else None
    f_snap = ensemble.read("f", collocation_xs) if kind == "forward_poisson" else None
    return TrainingSet(
        u_sensor_xs=np.asarray(u_xs, dtype=np.float64),
        u_snapshots=ensemble.read("u", u_xs),
        collocation_xs=np.asarray(collocation_xs, dtype=np.float64),
        k_sensor_xs=k_xs,
        k_snapshots=k_snap,
        f_snapshots=f_snap,
        k_weights=k_weights,
    )
