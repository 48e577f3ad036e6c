"""Output-space reduction: row standardization, truncated PCA, projection and
the Moore-Penrose pseudoinverse.

Snapshot matrices follow the column-sample convention, shape ``(d, k)``: one
row per outcome, one column per design point. The estimator wrapper
:class:`OutputPCA` uses the usual scikit-learn orientation ``(n_samples, d)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DegenerateSnapshotError

#: Rows whose standard deviation falls below ``FLOOR_RTOL * max(1, |mean|)``
#: are treated as constant and get unit scale.
FLOOR_RTOL = 1e-12
#: Relative singular-value cutoff for the pseudoinverse.
PINV_RCOND = 1e-10


@dataclass(frozen=True)
class SnapshotMatrix:
    """Outcome vectors gathered column-wise over a sampling design."""

    data: np.ndarray
    row_labels: tuple[str, ...]
    design_ids: tuple[str, ...]

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 2:
            raise ValueError(f"snapshot data must be 2-D, got shape {data.shape}")
        d, k = data.shape
        if d < 1 or k < 1:
            raise ValueError(f"snapshot matrix must be non-empty, got shape {data.shape}")
        _check_finite(data)
        labels = tuple(str(s) for s in self.row_labels)
        ids = tuple(str(s) for s in self.design_ids)
        if len(labels) != d:
            raise ValueError(f"expected {d} row labels, got {len(labels)}")
        if len(ids) != k:
            raise ValueError(f"expected {k} design ids, got {len(ids)}")
        if len(set(ids)) != k:
            raise ValueError("design ids must be unique")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "row_labels", labels)
        object.__setattr__(self, "design_ids", ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def column(self, design_id: str) -> np.ndarray:
        return self.data[:, self.design_ids.index(design_id)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["design_id", *self.row_labels])
        for j, pid in enumerate(self.design_ids):
            writer.writerow([pid, *(repr(float(v)) for v in self.data[:, j])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SnapshotMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:1] != ["design_id"]:
            raise ValueError("snapshot CSV must start with a 'design_id' header")
        labels = rows[0][1:]
        ids, cols = [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != len(labels) + 1:
                raise ValueError(f"line {lineno}: expected {len(labels) + 1} fields, got {len(row)}")
            ids.append(row[0])
            cols.append([float(v) for v in row[1:]])
        return cls(np.array(cols, dtype=float).T.reshape(len(labels), len(ids)), labels, ids)


@dataclass(frozen=True)
class Standardization:
    means: np.ndarray
    scales: np.ndarray

    def apply(self, y: np.ndarray) -> np.ndarray:
        """Standardize a length-d vector or a (d, k) matrix."""
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            return (y - self.means) / self.scales
        return (y - self.means[:, None]) / self.scales[:, None]

    def invert(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return z * self.scales + self.means
        return z * self.scales[:, None] + self.means[:, None]


@dataclass(frozen=True)
class PCABasis:
    u: np.ndarray
    singular_values: np.ndarray
    p: int
    retained_variance: float
    standardization: Standardization
    threshold: float = field(default=1.0)

    @property
    def d(self) -> int:
        return self.u.shape[0]


def _check_finite(a: np.ndarray) -> None:
    bad = np.argwhere(~np.isfinite(a))
    if bad.size:
        loc = tuple(int(i) for i in bad[0])
        raise ValueError(f"non-finite entry {a[loc]!r} at row {loc[0]}, column {loc[1] if len(loc) > 1 else 0}")


def standardize_rows(y: SnapshotMatrix | np.ndarray) -> tuple[np.ndarray, Standardization]:
    """Center each row and scale it to unit population standard deviation.

    Rows that are constant up to round-off are mapped to zeros (scale 1).
    """
    data = y.data if isinstance(y, SnapshotMatrix) else np.asarray(y, dtype=float)
    if data.ndim != 2:
        raise ValueError(f"expected a (d, k) matrix, got shape {data.shape}")
    _check_finite(data)
    means = data.mean(axis=1)
    stds = data.std(axis=1)
    floor = FLOOR_RTOL * np.maximum(1.0, np.abs(means))
    scales = np.where(stds < floor, 1.0, stds)
    std = Standardization(means=means, scales=scales)
    return std.apply(data), std


def _fix_signs(u: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column made positive (first one on ties).
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def truncated_pca(
    ystd: np.ndarray,
    variance_threshold: float = 0.95,
    standardization: Standardization | None = None,
) -> PCABasis:
    """Keep the smallest number of left singular vectors retaining
    ``variance_threshold`` of the total squared singular mass."""
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError(f"variance_threshold must lie in (0, 1], got {variance_threshold}")
    ystd = np.asarray(ystd, dtype=float)
    _check_finite(ystd)
    d = ystd.shape[0]
    if not np.any(ystd):
        raise DegenerateSnapshotError("degenerate snapshot matrix: all standardized entries are zero")
    u, s, _ = np.linalg.svd(ystd, full_matrices=False)
    energy = np.cumsum(s**2)
    ratio = energy / energy[-1]
    p = int(np.searchsorted(ratio, variance_threshold, side="left")) + 1
    p = min(p, len(s))
    u_p = _fix_signs(u[:, :p])
    if standardization is None:
        standardization = Standardization(means=np.zeros(d), scales=np.ones(d))
    return PCABasis(
        u=u_p,
        singular_values=s,
        p=p,
        retained_variance=float(ratio[p - 1]),
        standardization=standardization,
        threshold=float(variance_threshold),
    )


def project(basis: PCABasis, y: np.ndarray) -> np.ndarray:
    """Reduced coordinates ``U_p^T standardize(y)`` of a vector or (d, k) matrix."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] != basis.d:
        raise ValueError(f"dimension mismatch: basis has d={basis.d}, got leading dimension {y.shape[0]}")
    if not np.all(np.isfinite(y)):
        raise ValueError("cannot project non-finite outputs")
    return basis.u.T @ basis.standardization.apply(y)


def reconstruct(basis: PCABasis, z: np.ndarray) -> np.ndarray:
    """Map reduced coordinates back to physical outputs (inverse of ``project``
    on the retained subspace)."""
    z = np.asarray(z, dtype=float)
    return basis.standardization.invert(basis.u @ z)


def pseudoinverse(j: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Moore-Penrose pseudoinverse via the SVD.

    Singular values below ``rcond * sigma_max`` are treated as zero, so
    rank-deficient inputs get the pseudoinverse of their numerical-rank part.
    """
    j = np.asarray(j, dtype=float)
    if j.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {j.shape}")
    _check_finite(j)
    if not np.any(j):
        return np.zeros(j.T.shape)
    u, s, vt = np.linalg.svd(j, full_matrices=False)
    keep = s > rcond * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


def numerical_rank(j: np.ndarray, rcond: float = PINV_RCOND) -> int:
    s = np.linalg.svd(np.asarray(j, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rcond * s[0]))


def null_space_basis(j: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Orthonormal basis (columns) of the numerical null space of ``j``."""
    j = np.asarray(j, dtype=float)
    _, s, vt = np.linalg.svd(j, full_matrices=True)
    r = int(np.sum(s > rcond * s[0])) if s.size and s[0] > 0 else 0
    return vt[r:].T


class OutputPCA(TransformerMixin, BaseEstimator):
    """Standardize outputs and project them onto their leading principal axes.

    Parameters
    ----------
    variance_threshold : float, default=0.95
        Fraction of total variance the retained components must capture.

    Attributes
    ----------
    basis_ : PCABasis
    n_components_ : int
    components_ : ndarray of shape (n_components_, n_outputs)
    singular_values_ : ndarray
    retained_variance_ : float
    """

    def __init__(self, variance_threshold: float = 0.95):
        self.variance_threshold = variance_threshold

    def fit(self, Y, y=None):
        Y = check_array(Y, ensure_min_samples=2)
        ystd, std = standardize_rows(Y.T)
        self.basis_ = truncated_pca(ystd, self.variance_threshold, std)
        self.n_components_ = self.basis_.p
        self.components_ = self.basis_.u.T
        self.singular_values_ = self.basis_.singular_values
        self.retained_variance_ = self.basis_.retained_variance
        self.n_features_in_ = Y.shape[1]
        return self

    def transform(self, Y):
        check_is_fitted(self, "basis_")
        Y = check_array(Y)
        return project(self.basis_, Y.T).T

    def inverse_transform(self, Z):
        check_is_fitted(self, "basis_")
        Z = check_array(Z)
        return reconstruct(self.basis_, Z.T).T

    def loadings(self) -> np.ndarray:
        check_is_fitted(self, "basis_")
        return self.basis_.u * self.basis_.singular_values[: self.basis_.p]


def as_snapshot(data: np.ndarray, row_labels: Sequence[str] | None = None,
                design_ids: Sequence[str] | None = None) -> SnapshotMatrix:
    data = np.asarray(data, dtype=float)
    d, k = data.shape
    return SnapshotMatrix(
        data,
        tuple(row_labels) if row_labels is not None else tuple(f"y_{i + 1}" for i in range(d)),
        tuple(design_ids) if design_ids is not None else tuple(f"p{j:05d}" for j in range(k)),
    )
