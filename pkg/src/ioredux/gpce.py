"""Orthonormal shifted-Legendre polynomial chaos on [0, 1]^m.

The basis is ``L_n(x) = sqrt(2n + 1) * P_n(2x - 1)`` so that
``int_0^1 L_i L_j dx = delta_ij``. Multivariate terms are tensor products
``L_alpha(theta) = prod_j L_{alpha_j}(theta_j)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .sparsegrid import SparseGrid

MAX_DEGREE = 64
MAX_INDEX_SET = 100_000
PRUNE_RTOL = 1e-14


def _check_unit(x: np.ndarray) -> None:
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("points must lie in the closed unit cube [0, 1]")


def legendre_table(n_max: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Values and first derivatives of ``L_0..L_{n_max}`` at ``x``.

    Returns two arrays of shape ``x.shape + (n_max + 1,)``. Derivatives use
    ``P'_{n+1} = P'_{n-1} + (2n + 1) P_n``, which has no singularity at the
    interval ends.
    """
    x = np.asarray(x, dtype=float)
    t = 2.0 * x - 1.0
    p = np.zeros(x.shape + (n_max + 1,))
    dp = np.zeros_like(p)
    p[..., 0] = 1.0
    if n_max >= 1:
        p[..., 1] = t
        dp[..., 1] = 1.0
    for n in range(1, n_max):
        p[..., n + 1] = ((2 * n + 1) * t * p[..., n] - n * p[..., n - 1]) / (n + 1)
        dp[..., n + 1] = dp[..., n - 1] + (2 * n + 1) * p[..., n]
    norm = np.sqrt(2.0 * np.arange(n_max + 1) + 1.0)
    # chain rule: d/dx = 2 d/dt
    return p * norm, 2.0 * dp * norm


def _check_degree(n: int) -> None:
    if not 0 <= n <= MAX_DEGREE:
        raise ValueError(f"degree must be in [0, {MAX_DEGREE}], got {n}")


def legendre_eval(n: int, x):
    _check_degree(n)
    x_arr = np.asarray(x, dtype=float)
    _check_unit(x_arr)
    val = legendre_table(n, x_arr)[0][..., n]
    return float(val) if val.ndim == 0 else val


def legendre_deriv(n: int, x):
    _check_degree(n)
    x_arr = np.asarray(x, dtype=float)
    _check_unit(x_arr)
    val = legendre_table(n, x_arr)[1][..., n]
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True)
class MultiIndexSet:
    dim: int
    indices: np.ndarray  # (s, dim) integer array
    max_total_degree: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    def position(self, alpha) -> int:
        hits = np.flatnonzero(np.all(self.indices == np.asarray(alpha), axis=1))
        if hits.size == 0:
            raise KeyError(tuple(alpha))
        return int(hits[0])


def _compositions(dim: int, total: int):
    if dim == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(dim - 1, total - first):
            yield (first, *rest)


def total_degree_set(dim: int, degree: int, max_size: int = MAX_INDEX_SET) -> MultiIndexSet:
    """All multi-indices with total degree ``<= degree``, graded then
    reverse-lexicographic (so ``(1, 0, ...)`` precedes ``(0, 1, ...)``)."""
    if dim < 1 or degree < 0:
        raise ValueError(f"need dim >= 1 and degree >= 0, got dim={dim}, degree={degree}")
    size = comb(dim + degree, degree)
    if size > max_size:
        raise ValueError(f"total-degree set (dim={dim}, degree={degree}) has {size} terms, above the cap of {max_size}")
    rows = [alpha for q in range(degree + 1) for alpha in _compositions(dim, q)]
    return MultiIndexSet(dim=dim, indices=np.array(rows, dtype=int).reshape(size, dim), max_total_degree=degree)


def basis_matrix(index_set: MultiIndexSet, theta) -> np.ndarray:
    """Evaluate every basis term at every point: shape ``(n_points, s)``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    vals, _ = legendre_table(index_set.max_total_degree, theta)  # (n, m, q+1)
    out = np.ones((theta.shape[0], len(index_set)))
    for j in range(index_set.dim):
        out *= vals[:, j, index_set.indices[:, j]]
    return out


def basis_gradient(index_set: MultiIndexSet, theta) -> np.ndarray:
    """Partial derivatives of every basis term: shape ``(n_points, m, s)``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    vals, ders = legendre_table(index_set.max_total_degree, theta)
    n, m = theta.shape
    factors = np.stack([vals[:, j, index_set.indices[:, j]] for j in range(m)], axis=1)  # (n, m, s)
    dfactors = np.stack([ders[:, j, index_set.indices[:, j]] for j in range(m)], axis=1)
    out = np.empty((n, m, len(index_set)))
    for j in range(m):
        prod = dfactors[:, j, :].copy()
        for l in range(m):
            if l != j:
                prod *= factors[:, l, :]
        out[:, j, :] = prod
    return out


@dataclass(frozen=True)
class Surrogate:
    index_set: MultiIndexSet
    coeffs: np.ndarray  # (p, s)
    provenance: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dim(self) -> int:
        return self.index_set.dim


def fit_gpce(grid: SparseGrid, reduced_outputs, index_set: MultiIndexSet,
             design_hash: str | None = None) -> Surrogate:
    """Coefficients by discrete projection with the sparse-grid quadrature:
    ``c[i, alpha] = sum_q w_q * y_i(theta_q) * L_alpha(theta_q)``."""
    y = np.atleast_2d(np.asarray(reduced_outputs, dtype=float))
    if y.shape[1] != grid.n_points:
        raise ValueError(f"reduced outputs have {y.shape[1]} columns but the grid has {grid.n_points} points")
    if index_set.dim != grid.dim:
        raise ValueError(f"index set dim {index_set.dim} != grid dim {grid.dim}")
    return _project_coefficients(grid.points, grid.weights, y, index_set,
                                 design_hash if design_hash is not None else grid.content_hash())


def _project_coefficients(points, weights, y, index_set, design_hash):
    psi = basis_matrix(index_set, points)  # (k, s)
    coeffs = (y * weights) @ psi
    if not np.all(np.isfinite(coeffs)):
        raise ValueError("non-finite gPCE coefficients")
    cmax = np.max(np.abs(coeffs)) if coeffs.size else 0.0
    coeffs[np.abs(coeffs) < PRUNE_RTOL * cmax] = 0.0
    residual = float(np.max(np.abs(coeffs @ psi.T - y))) if y.size else 0.0
    scale = float(np.max(np.abs(y))) if y.size else 0.0
    return Surrogate(index_set=index_set, coeffs=coeffs, provenance={
        "design_hash": design_hash,
        "fit_residual": residual,
        "relative_fit_residual": residual / scale if scale > 0 else 0.0,
        "n_terms": len(index_set),
    })


def eval_surrogate(s: Surrogate, theta) -> np.ndarray:
    """Surrogate value(s): length-p vector for one point, ``(n, p)`` for many."""
    theta = np.asarray(theta, dtype=float)
    _check_unit(theta)
    out = basis_matrix(s.index_set, theta) @ s.coeffs.T
    return out[0] if theta.ndim == 1 else out


def grad_surrogate(s: Surrogate, theta) -> np.ndarray:
    """Jacobian ``d Phi_i / d theta_j``: ``(p, m)`` for one point, ``(n, p, m)`` for many."""
    theta = np.asarray(theta, dtype=float)
    _check_unit(theta)
    g = np.einsum("nms,ps->npm", basis_gradient(s.index_set, theta), s.coeffs)
    return g[0] if theta.ndim == 1 else g


class LegendrePCE(RegressorMixin, BaseEstimator):
    """Total-degree Legendre chaos fitted by quadrature projection.

    ``fit`` requires quadrature weights for the training points (for a sparse
    grid, ``grid.weights``); it is not a least-squares fit.
    """

    def __init__(self, degree: int = 2):
        self.degree = degree

    def fit(self, X, y, sample_weight=None):
        X = check_array(X)
        _check_unit(X)
        y = np.asarray(y, dtype=float)
        self._single_output = y.ndim == 1
        y2 = y.reshape(len(y), -1)
        if sample_weight is None:
            raise ValueError("LegendrePCE.fit needs quadrature weights via sample_weight")
        w = np.asarray(sample_weight, dtype=float)
        if w.shape != (X.shape[0],):
            raise ValueError(f"expected {X.shape[0]} weights, got shape {w.shape}")
        self.index_set_ = total_degree_set(X.shape[1], self.degree)
        self.surrogate_ = _project_coefficients(X, w, y2.T, self.index_set_, None)
        self.coef_ = self.surrogate_.coeffs
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "surrogate_")
        out = eval_surrogate(self.surrogate_, check_array(X))
        return out[:, 0] if self._single_output else out

    def jacobian(self, X):
        check_is_fitted(self, "surrogate_")
        return grad_surrogate(self.surrogate_, check_array(X))
