"""PCA whitening of sensor snapshots and the empirical-measure aPC basis.

All second moments use the ``1/N`` weight of the discrete snapshot measure, so
whitened training coordinates have exactly zero mean and identity covariance,
and the polynomial basis is orthonormal under the same measure.
"""

import csv
from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb

import numpy as np

from .errors import (AlignmentError, ConfigurationError, DegeneracyError, DegenerateMeasureError,
                     WhiteningError)

EIG_CLAMP = 1e-12
WHITEN_MIN_EIG = 1e-12
GS_MIN_NORM = 1e-10


@dataclass
class PcaModel:
    """Sensor mean, eigenpairs (columns of ``eigenvectors``) and kept dimension."""

    k0: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    m: int
    energy_threshold: float

    @property
    def n_sensors(self):
        return self.k0.size

    @property
    def retained_eigenvalues(self):
        return self.eigenvalues[: self.m]

    @property
    def retained_vectors(self):
        return self.eigenvectors[:, : self.m]

    def reconstruct(self, xi, m=None):
        """k0 + Phi_M sqrt(Lambda_M) xi for one (M,) or many (n, M) xi vectors."""
        m = self.m if m is None else m
        xi = np.asarray(xi, dtype=np.float64)
        scale = self.eigenvectors[:, :m] * np.sqrt(self.eigenvalues[:m])
        return self.k0 + xi[..., :m] @ scale.T


def fit_pca(snapshots, energy_threshold=0.99):
    """Eigendecomposition of the (1/N) sample covariance of the sensor columns.

    ``m`` is the smallest count of leading eigenvalues whose sum reaches
    ``energy_threshold`` of the total; each eigenvector is signed so that its
    largest-magnitude entry is positive.
    """
    x = np.asarray(snapshots, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
        raise ConfigurationError("need an N x N_k snapshot matrix with N >= 2")
    if not 0 < energy_threshold <= 1:
        raise ConfigurationError("energy_threshold must lie in (0, 1]")
    k0 = x.mean(axis=0)
    xc = x - k0
    cov = xc.T @ xc / x.shape[0]
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    vals = np.where(vals < 0, 0.0, vals)
    total = vals.sum()
    if not total > EIG_CLAMP * max(1.0, np.abs(k0).max()) ** 2:
        raise DegeneracyError("snapshots have zero total variance")
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    vecs = vecs * np.where(signs == 0, 1.0, signs)
    energy = np.cumsum(vals) / total
    m = int(np.searchsorted(energy, energy_threshold * (1 - 1e-12)) + 1)
    return PcaModel(k0=k0, eigenvalues=vals, eigenvectors=vecs, m=min(m, vals.size),
                    energy_threshold=float(energy_threshold))


def extract_xi(model, snapshot):
    """Whitened coordinates Lambda_M^{-1/2} Phi_M^T (k - k0) of one or many snapshots."""
    lam = model.retained_eigenvalues
    if np.any(lam < WHITEN_MIN_EIG):
        raise WhiteningError(f"retained eigenvalue {lam.min():.3g} too small to whiten")
    k = np.asarray(snapshot, dtype=np.float64)
    if k.shape[-1] != model.n_sensors:
        raise AlignmentError(f"expected {model.n_sensors} sensor readings, got {k.shape[-1]}")
    return (k - model.k0) @ model.retained_vectors / np.sqrt(lam)


def graded_lex_indices(m, order):
    """Multi-indices of total order <= ``order`` in graded lexicographic order.

    >>> graded_lex_indices(2, 2)
    [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    """
    out = [tuple([0] * m)]
    for total in range(1, order + 1):
        level = []
        for combo in combinations_with_replacement(range(m), total):
            e = [0] * m
            for i in combo:
                e[i] += 1
            level.append(tuple(e))
        out.extend(sorted(level, reverse=True))
    return out


def basis_size(m, order):
    """P + 1 = (r + M)! / (r! M!)."""
    return comb(order + m, m)


def monomials(xi, indices):
    """Columns prod_i xi_i^alpha_i for each multi-index (rows = samples)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    out = np.ones((xi.shape[0], len(indices)))
    for j, alpha in enumerate(indices):
        for i, p in enumerate(alpha):
            if p:
                out[:, j] *= xi[:, i] ** p
    return out


@dataclass
class ApcBasis:
    """Orthonormal polynomials under the empirical measure of ``sample_set``.

    ``coeffs`` is the recursion table: row ``a`` holds ``w[a, a]`` on the
    diagonal and ``w[a, b]`` (b < a) such that
    ``psi_a = w[a, a] * monomial_a - sum_b w[a, b] * psi_b``.
    ``monomial_coeffs`` expresses the same polynomials directly in the
    monomial basis and is what :meth:`evaluate` uses.
    """

    indices: list
    coeffs: np.ndarray
    monomial_coeffs: np.ndarray
    sample_set: np.ndarray

    @property
    def dim(self):
        return self.sample_set.shape[1]

    @property
    def order(self):
        return max(sum(a) for a in self.indices)

    def __len__(self):
        return len(self.indices)

    def group_sizes(self):
        """Number of multi-indices of each total order 0..r."""
        sizes = [0] * (self.order + 1)
        for a in self.indices:
            sizes[sum(a)] += 1
        return sizes

    def evaluate(self, xi):
        """psi_alpha(xi) for 1-D (single point) or 2-D (rows) input; shape (n, P+1)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
        if xi.shape[1] != self.dim:
            raise AlignmentError(f"expected {self.dim}-dimensional xi, got {xi.shape[1]}")
        return monomials(xi, self.indices) @ self.monomial_coeffs.T

    def evaluate_recursive(self, xi):
        """Evaluate through the recursion table instead of monomial coefficients."""
        mono = monomials(xi, self.indices)
        psi = np.empty_like(mono)
        for a in range(len(self.indices)):
            psi[:, a] = self.coeffs[a, a] * mono[:, a] - psi[:, :a] @ self.coeffs[a, :a]
        return psi

    def gram(self):
        psi = self.evaluate(self.sample_set)
        return psi.T @ psi / psi.shape[0]

    def to_csv(self, path):
        n = len(self.indices)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"alpha_{i}" for i in range(self.dim)] + [f"w_{j}" for j in range(n)])
            for a, alpha in enumerate(self.indices):
                w.writerow(list(alpha) + [repr(float(c)) for c in self.coeffs[a]])

    @classmethod
    def from_table(cls, indices, coeffs, sample_set):
        """Rebuild a basis from its recursion table (as stored by :meth:`to_csv`)."""
        w = np.asarray(coeffs, dtype=np.float64)
        c = np.zeros_like(w)
        for a in range(w.shape[0]):
            c[a, a] = w[a, a]
            c[a] -= w[a, :a] @ c[:a]
        return cls(indices=list(indices), coeffs=w, monomial_coeffs=c,
                   sample_set=np.asarray(sample_set, dtype=np.float64))

    @staticmethod
    def read_csv(path):
        """Return ``(indices, coeffs)`` stored by :meth:`to_csv`."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        m = sum(1 for h in rows[0] if h.startswith("alpha_"))
        indices = [tuple(int(v) for v in r[:m]) for r in rows[1:]]
        coeffs = np.array([[float(v) for v in r[m:]] for r in rows[1:]])
        return indices, coeffs


def build_apc_basis(xi_samples, order):
    """Modified Gram-Schmidt over graded-lex monomials, one re-orthogonalization pass."""
    xi = np.asarray(xi_samples, dtype=np.float64)
    if xi.ndim != 2:
        raise ConfigurationError("xi_samples must be an N x M array")
    n, m = xi.shape
    indices = graded_lex_indices(m, order)
    size = len(indices)
    if n <= size:
        raise ConfigurationError(f"need more than {size} samples for {size} basis functions, got {n}")
    mono = monomials(xi, indices)
    psi = np.empty_like(mono)
    w = np.zeros((size, size))
    c = np.zeros((size, size))
    for a in range(size):
        v = mono[:, a].copy()
        proj = np.zeros(a)
        for _ in range(2):
            for b in range(a):
                coef = psi[:, b] @ v / n
                v -= coef * psi[:, b]
                proj[b] += coef
        norm = np.sqrt(v @ v / n)
        if norm < GS_MIN_NORM:
            raise DegenerateMeasureError(
                f"candidate polynomial {indices[a]} has norm {norm:.3g}; "
                "samples lie on a low-dimensional variety"
            )
        psi[:, a] = v / norm
        w[a, a] = 1.0 / norm
        w[a, :a] = proj / norm
        c[a, a] = w[a, a]
        c[a] -= w[a, :a] @ c[:a]
    return ApcBasis(indices=indices, coeffs=w, monomial_coeffs=c, sample_set=xi.copy())


def project_modes(values, basis):
    """aPC modes g_alpha = (1/N) sum_s psi_alpha(xi_s) g_s.

    ``values`` is ``(N,)`` or ``(N, n_points)``; the result is ``(P+1,)`` or
    ``(P+1, n_points)``.
    """
    g = np.asarray(values, dtype=np.float64)
    n = basis.sample_set.shape[0]
    if g.shape[0] != n:
        raise AlignmentError(f"{g.shape[0]} values for {n} basis samples")
    psi = basis.evaluate(basis.sample_set)
    return psi.T @ g / n
