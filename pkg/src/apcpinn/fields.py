"""Synthetic random fields on [-1, 1] and finite-difference reference solvers."""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import CoefficientError, ConfigurationError, GridSizeError, NumericalError

DOMAIN = (-1.0, 1.0)
DEFAULT_GRID_POINTS = 1201
JITTER_START = 1e-12
JITTER_FACTOR = 10.0
JITTER_MAX = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    """Squared-exponential kernel parameters."""

    sigma: float
    lc: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.lc > 0):
            raise ConfigurationError(f"kernel needs sigma > 0 and lc > 0, got {self}")


@dataclass
class GridField:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grid.ndim != 1 or self.grid.shape != self.values.shape:
            raise GridSizeError("grid and values must be 1-D arrays of equal length")
        if np.any(np.diff(self.grid) <= 0):
            raise ConfigurationError("grid must be strictly increasing")
        if not (np.isclose(self.grid[0], DOMAIN[0]) and np.isclose(self.grid[-1], DOMAIN[1])):
            raise ConfigurationError("grid must include both endpoints -1 and 1")


@dataclass
class FieldEnsemble:
    """``n`` trajectories sampled on a shared grid (one row per trajectory)."""

    grid: np.ndarray
    trajectories: np.ndarray
    seed: int = 0
    jitter: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.trajectories.shape[0]

    def to_csv(self, path):
        """Columnar CSV: ``x,traj_0,...,traj_{N-1}``, one row per grid point."""
        data = np.column_stack([self.grid, self.trajectories.T])
        header = ",".join(["x"] + [f"traj_{i}" for i in range(len(self))])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path, seed=0):
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        if not header or header[0] != "x":
            raise ConfigurationError(f"{path}: not an ensemble CSV")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(grid=data[:, 0].copy(), trajectories=data[:, 1:].T.copy(), seed=seed)


def uniform_grid(n=DEFAULT_GRID_POINTS):
    if n < 2:
        raise GridSizeError("a grid needs at least 2 points")
    return np.linspace(DOMAIN[0], DOMAIN[1], n)


def se_covariance(x, x2, kernel):
    """sigma^2 exp(-(x - x2)^2 / lc^2), broadcasting over array arguments."""
    d = np.subtract(x, x2)
    return kernel.sigma ** 2 * np.exp(-(d * d) / kernel.lc ** 2)


def kernel_matrix(grid, kernel):
    grid = np.asarray(grid, dtype=np.float64)
    return se_covariance(grid[:, None], grid[None, :], kernel)


def jittered_cholesky(cov, scale):
    """Lower Cholesky factor of ``cov + jitter*I``; returns ``(L, jitter)``.

    Jitter runs from ``1e-12*scale`` up by factors of 10 to ``1e-6*scale``.
    """
    n = cov.shape[0]
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            if jitter == 0.0:
                jitter = JITTER_START * scale
            elif jitter * JITTER_FACTOR <= JITTER_MAX * scale * (1 + 1e-9):
                jitter *= JITTER_FACTOR
            else:
                raise NumericalError(
                    f"Cholesky failed with maximum jitter {jitter:.3g}"
                ) from None


def sample_gp(mean_fn, kernel, grid, n, seed, log_normal=False, stream=0):
    """Draw ``n`` GP trajectories on ``grid``.

    Row ``i`` uses the RNG substream ``(seed, stream, i)`` so that rows are
    independent of how many are drawn and different ``stream`` values give
    disjoint sample sets (training vs. test).  With ``log_normal`` the Gaussian
    draws are exponentiated.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 2:
        raise GridSizeError("sampling grid needs at least 2 points")
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    mean = np.broadcast_to(np.asarray(mean_fn(grid), dtype=np.float64), grid.shape)
    chol, jitter = jittered_cholesky(kernel_matrix(grid, kernel), kernel.sigma ** 2)
    z = np.empty((n, grid.size))
    for i in range(n):
        z[i] = np.random.default_rng([seed, stream, i]).standard_normal(grid.size)
    draws = mean + z @ chol.T
    if log_normal:
        draws = np.exp(draws)
    return FieldEnsemble(
        grid=grid.copy(), trajectories=draws, seed=seed, jitter=jitter,
        meta={"sigma": kernel.sigma, "lc": kernel.lc, "log_normal": log_normal, "stream": stream},
    )


def _spacing(grid):
    if grid.size < 3:
        raise GridSizeError("finite-difference solve needs at least 3 grid points")
    h = np.diff(grid)
    if not np.allclose(h, h[0], rtol=1e-9, atol=0):
        raise ConfigurationError("finite-difference solvers need a uniform grid")
    return h[0]


def solve_poisson_fd(f):
    """Solve -u'' = f with u(-1) = u(1) = 0 by second-order central differences."""
    h = _spacing(f.grid)
    return GridField(f.grid, _poisson_rows(f.values[None, :], h)[0])


def _poisson_rows(f_rows, h):
    m = f_rows.shape[1] - 2
    ab = np.empty((3, m))
    ab[0] = -1.0
    ab[1] = 2.0
    ab[2] = -1.0
    u = np.zeros_like(f_rows)
    u[:, 1:-1] = solve_banded((1, 1), ab, (h * h) * f_rows[:, 1:-1].T).T
    return u


def _elliptic_bands(k, h):
    if np.any(k <= 0):
        raise CoefficientError("diffusion coefficient must be strictly positive")
    kh = 0.5 * (k[1:] + k[:-1])  # k_{i+1/2}, i = 0..n-2
    m = k.size - 2
    ab = np.zeros((3, m))
    ab[1] = kh[:-1] + kh[1:]
    ab[0, 1:] = -kh[1:-1]
    ab[2, :-1] = -kh[1:-1]
    return ab


def solve_elliptic_fd(k, f):
    """Solve -(k u')' = f with zero Dirichlet data, conservative midpoint fluxes."""
    if not np.array_equal(k.grid, f.grid):
        raise ConfigurationError("k and f must share a grid")
    h = _spacing(k.grid)
    u = np.zeros_like(f.values)
    u[1:-1] = solve_banded((1, 1), _elliptic_bands(k.values, h), (h * h) * f.values[1:-1])
    return GridField(k.grid, u)


def elliptic_operator(k, u):
    """Discrete -(k u')' at interior nodes (same stencil as :func:`solve_elliptic_fd`)."""
    h = _spacing(k.grid)
    kh = 0.5 * (k.values[1:] + k.values[:-1])
    flux = kh * np.diff(u.values) / h
    return -np.diff(flux) / h


def solve_poisson_ensemble(forcing):
    """FD solution for every trajectory of a forcing ensemble."""
    h = _spacing(forcing.grid)
    return FieldEnsemble(forcing.grid, _poisson_rows(forcing.trajectories, h), seed=forcing.seed)


def solve_elliptic_ensemble(coefficients, f_values):
    """FD solution for every coefficient trajectory with a shared forcing."""
    grid = coefficients.grid
    fv = np.broadcast_to(np.asarray(f_values, dtype=np.float64), grid.shape)
    out = np.empty_like(coefficients.trajectories)
    f = GridField(grid, fv)
    for i, row in enumerate(coefficients.trajectories):
        out[i] = solve_elliptic_fd(GridField(grid, row), f).values
    return FieldEnsemble(grid, out, seed=coefficients.seed)
