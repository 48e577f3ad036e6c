"""Input-output reduced-order model.

Outputs are reduced by PCA, a Legendre chaos surrogate maps the unit cube to
the reduced outputs, and the pseudoinverse of its Jacobian at a reference
point turns each reduced output axis into a minimum-norm input direction.
Those directions verify against the model and turn output targets into input
plans without any iterative solve.
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import __version__
from .exceptions import (CubeViolationError, DegenerateSnapshotError, RankDeficiencyWarning,
                         ReachabilityWarning)
from .gpce import MultiIndexSet, Surrogate, eval_surrogate, fit_gpce, grad_surrogate, total_degree_set
from .model import ParameterSpace, from_unit
from .reduction import (PINV_RCOND, PCABasis, SnapshotMatrix, Standardization, numerical_rank,
                        project, pseudoinverse, reconstruct, standardize_rows, truncated_pca)
from .sparsegrid import SparseGrid

logger = logging.getLogger(__name__)

ROM_FORMAT = "ioredux-rom/1"
#: A plan whose unclamped coordinates leave the cube by more than this is
#: reported as possibly unreachable.
REACH_TOL = 0.25


@dataclass(frozen=True)
class ReducedRom:
    basis: PCABasis
    surrogate: Surrogate
    theta0: np.ndarray
    jacobian: np.ndarray
    jacobian_pinv: np.ndarray
    directions: np.ndarray
    design_hash: str
    space: ParameterSpace
    output_labels: tuple[str, ...]
    diagnostics: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.basis.p

    @property
    def m(self) -> int:
        return self.theta0.size

    def to_dict(self) -> dict:
        b, s = self.basis, self.surrogate
        return {
            "format": ROM_FORMAT,
            "tool_version": __version__,
            "parameter_space": self.space.to_dict(),
            "output_labels": list(self.output_labels),
            "standardization": {"means": b.standardization.means.tolist(),
                                "scales": b.standardization.scales.tolist()},
            "basis": {"u": b.u.tolist(), "singular_values": b.singular_values.tolist(), "p": b.p,
                      "retained_variance": b.retained_variance, "threshold": b.threshold},
            "surrogate": {"index_set": s.index_set.indices.tolist(),
                          "max_total_degree": s.index_set.max_total_degree,
                          "coefficients": s.coeffs.tolist(), "provenance": s.provenance},
            "theta0": self.theta0.tolist(),
            "jacobian": self.jacobian.tolist(),
            "jacobian_pinv": self.jacobian_pinv.tolist(),
            "directions": self.directions.tolist(),
            "design_hash": self.design_hash,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ReducedRom":
        if d.get("format") != ROM_FORMAT:
            raise ValueError(f"unsupported ROM format {d.get('format')!r}")
        std = Standardization(np.array(d["standardization"]["means"], float),
                              np.array(d["standardization"]["scales"], float))
        bd = d["basis"]
        p = int(bd["p"])
        basis = PCABasis(u=np.array(bd["u"], float).reshape(-1, p),
                         singular_values=np.array(bd["singular_values"], float), p=p,
                         retained_variance=float(bd["retained_variance"]), standardization=std,
                         threshold=float(bd["threshold"]))
        space = ParameterSpace.from_dict(d["parameter_space"])
        sd = d["surrogate"]
        idx = np.array(sd["index_set"], dtype=int).reshape(-1, space.dim)
        surrogate = Surrogate(MultiIndexSet(space.dim, idx, int(sd["max_total_degree"])),
                              np.array(sd["coefficients"], float).reshape(p, -1), dict(sd["provenance"]))
        m = space.dim
        return cls(basis=basis, surrogate=surrogate, theta0=np.array(d["theta0"], float),
                   jacobian=np.array(d["jacobian"], float).reshape(p, m),
                   jacobian_pinv=np.array(d["jacobian_pinv"], float).reshape(m, p),
                   directions=np.array(d["directions"], float).reshape(m, p),
                   design_hash=str(d["design_hash"]), space=space,
                   output_labels=tuple(d["output_labels"]), diagnostics=dict(d["diagnostics"]))

    @classmethod
    def from_json(cls, text: str) -> "ReducedRom":
        return cls.from_dict(json.loads(text))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _check_interior(theta0: np.ndarray, m: int) -> np.ndarray:
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    if theta0.size != m:
        raise ValueError(f"theta0 must have length {m}, got {theta0.size}")
    if np.any(~(theta0 > 0.0)) or np.any(~(theta0 < 1.0)):
        raise ValueError("theta0 must lie strictly inside the unit cube")
    return theta0


def directions_from_jacobian(jacobian, rcond: float = PINV_RCOND) -> tuple[np.ndarray, np.ndarray]:
    """Pseudoinverse of a (p, m) Jacobian and the directions ``tau_j = J^+ e_j``
    as columns of an (m, p) matrix."""
    jacobian = np.asarray(jacobian, dtype=float)
    pinv = pseudoinverse(jacobian, rcond)
    return pinv, pinv @ np.eye(jacobian.shape[0])


def build_rom(snapshots: SnapshotMatrix, grid: SparseGrid, threshold: float = 0.95,
              theta0=None, degree: int | None = None, space: ParameterSpace | None = None,
              rcond: float = PINV_RCOND) -> ReducedRom:
    """Assemble the reduced-order model from snapshots on a sparse-grid design.

    The chaos degree defaults to the grid level, and ``theta0`` to the cube
    center. A rank-deficient Jacobian still yields directions (cutoff
    pseudoinverse) but raises a :class:`RankDeficiencyWarning` that is also
    recorded in the diagnostics.
    """
    if tuple(snapshots.design_ids) != tuple(grid.point_ids):
        raise ValueError("snapshot columns are not aligned with the design points")
    if snapshots.shape[1] < 2:
        raise DegenerateSnapshotError("degenerate snapshot matrix: need at least two samples")
    m = grid.dim
    theta0 = _check_interior(np.full(m, 0.5) if theta0 is None else theta0, m)
    space = space or ParameterSpace.unit(m)
    if space.dim != m:
        raise ValueError(f"parameter space has dim {space.dim}, design has dim {m}")

    ystd, std = standardize_rows(snapshots)
    basis = truncated_pca(ystd, threshold, std)
    reduced = basis.u.T @ ystd
    design_hash = grid.content_hash()
    index_set = total_degree_set(m, grid.level if degree is None else degree)
    surrogate = fit_gpce(grid, reduced, index_set, design_hash=design_hash)

    jac = grad_surrogate(surrogate, theta0)
    pinv, directions = directions_from_jacobian(jac, rcond)
    rank = numerical_rank(jac, rcond)
    residual = float(np.max(np.abs(jac @ directions - np.eye(basis.p))))
    diag_warnings = []
    if rank < basis.p:
        msg = (f"Jacobian at theta0 has numerical rank {rank} < p={basis.p}; "
               "directions use the cutoff pseudoinverse")
        warnings.warn(msg, RankDeficiencyWarning, stacklevel=2)
        diag_warnings.append(msg)
    diagnostics = {
        "p": basis.p,
        "retained_variance": basis.retained_variance,
        "jacobian_rank": rank,
        "jacobian_singular_values": np.linalg.svd(jac, compute_uv=False).tolist(),
        "direction_residual": residual,
        "fit_residual": surrogate.provenance["fit_residual"],
        "rcond": rcond,
        "warnings": diag_warnings,
    }
    return ReducedRom(basis=basis, surrogate=surrogate, theta0=theta0, jacobian=jac,
                      jacobian_pinv=pinv, directions=directions, design_hash=design_hash,
                      space=space, output_labels=snapshots.row_labels, diagnostics=diagnostics)


def reduced_directions(rom: ReducedRom) -> np.ndarray:
    return rom.directions


def export_loadings(rom: ReducedRom) -> np.ndarray:
    """Principal-component loadings: column j of U scaled by singular value j."""
    return rom.basis.u * rom.basis.singular_values[: rom.p]


def _run(runner: Callable, rom: ReducedRom, thetas: np.ndarray, ids) -> np.ndarray:
    out = np.asarray(runner(from_unit(rom.space, np.atleast_2d(thetas)), list(ids)), dtype=float)
    return out


def verify_directions(rom: ReducedRom, runner: Callable, delta: float = 1.0) -> np.ndarray:
    """Projected model response to a ``delta`` step along each direction.

    Column j is ``(project(y(theta0 + delta tau_j)) - project(y(theta0))) / delta``;
    a near-identity matrix confirms the directions.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    steps = rom.theta0[:, None] + delta * rom.directions  # (m, p)
    if np.any(steps < 0.0) or np.any(steps > 1.0):
        worst = float(np.max(np.maximum(-steps, steps - 1.0)))
        raise CubeViolationError(
            f"theta0 + delta*tau leaves the unit cube by {worst:.3g} at delta={delta}; use a smaller delta"
        )
    thetas = np.vstack([rom.theta0[None, :], steps.T])
    ids = ["theta0", *(f"tau_{j + 1}" for j in range(rom.p))]
    y = _run(runner, rom, thetas, ids)
    z = project(rom.basis, y.T)
    return (z[:, 1:] - z[:, :1]) / delta


@dataclass(frozen=True)
class PlanResult:
    target: np.ndarray
    coefficients: np.ndarray
    theta_unclamped: np.ndarray
    theta_plan: np.ndarray
    clamped: np.ndarray
    predicted_reduced: np.ndarray
    theta_hat: np.ndarray
    warnings: tuple[str, ...] = ()
    achieved_outputs: np.ndarray | None = None

    @property
    def reachable(self) -> bool:
        return not any(w.startswith("unreachable") for w in self.warnings)

    def relative_errors(self) -> np.ndarray:
        if self.achieved_outputs is None:
            raise ValueError("plan has not been evaluated")
        return np.abs(self.achieved_outputs - self.target) / np.abs(self.target)


def plan_for_target(rom: ReducedRom, y_target, reach_tol: float = REACH_TOL) -> PlanResult:
    """Map an output target to an input plan through the pseudoinverse Jacobian.

    The target is projected with the stored standardization and measured from
    the surrogate value at ``theta0``; the plan is
    ``clamp(theta0 + J^+ a)`` with clamped coordinates flagged.
    """
    y_target = np.asarray(y_target, dtype=float).reshape(-1)
    if y_target.size != rom.basis.d:
        raise ValueError(f"target must have length {rom.basis.d}, got {y_target.size}")
    if not np.all(np.isfinite(y_target)):
        raise ValueError("target must be finite")
    a = project(rom.basis, y_target) - eval_surrogate(rom.surrogate, rom.theta0)
    raw = rom.theta0 + rom.jacobian_pinv @ a
    plan = np.clip(raw, 0.0, 1.0)
    clamped = plan != raw
    notes = []
    excess = float(np.max(np.abs(raw - plan)))
    if clamped.any():
        names = [rom.space.names[i] for i in np.flatnonzero(clamped)]
        notes.append(f"clamped to the unit cube: {', '.join(names)}")
    if excess > reach_tol:
        msg = (f"unreachable target: the unclamped plan leaves the unit cube by {excess:.3g} "
               f"(tolerance {reach_tol})")
        warnings.warn(msg, ReachabilityWarning, stacklevel=2)
        notes.append(msg)
    for note in notes:
        logger.info(note)
    return PlanResult(target=y_target, coefficients=a, theta_unclamped=raw, theta_plan=plan,
                      clamped=clamped, predicted_reduced=eval_surrogate(rom.surrogate, plan),
                      theta_hat=from_unit(rom.space, plan), warnings=tuple(notes))


def evaluate_plans(rom: ReducedRom, plans: list[PlanResult], runner: Callable,
                   ids=None) -> list[PlanResult]:
    """Run the model at each plan and attach the achieved outputs."""
    if not plans:
        return []
    ids = list(ids) if ids is not None else [f"plan_{i + 1}" for i in range(len(plans))]
    y = _run(runner, rom, np.array([pl.theta_plan for pl in plans]), ids)
    return [PlanResult(**{**pl.__dict__, "achieved_outputs": y[i]}) for i, pl in enumerate(plans)]


def reconstruct_outputs(rom: ReducedRom, reduced) -> np.ndarray:
    """Physical outputs whose projection equals ``reduced``."""
    return reconstruct(rom.basis, reduced)


class InputOutputROM(BaseEstimator):
    """Scikit-learn style wrapper around :func:`build_rom`.

    ``fit(X, Y, sample_weight)`` takes design points ``X`` (k, m) in the unit
    cube, outputs ``Y`` (k, d) and the design's quadrature weights. Passing a
    :class:`SparseGrid` through ``grid`` instead keeps its provenance hash.

    Parameters
    ----------
    variance_threshold : float, default=0.95
    degree : int or None
        Total degree of the chaos; defaults to the grid level.
    theta0 : array-like or None
        Reference point; defaults to the cube center.
    rcond : float, default=1e-10
    """

    def __init__(self, variance_threshold: float = 0.95, degree: int | None = None,
                 theta0=None, rcond: float = PINV_RCOND):
        self.variance_threshold = variance_threshold
        self.degree = degree
        self.theta0 = theta0
        self.rcond = rcond

    def fit(self, X=None, Y=None, sample_weight=None, grid: SparseGrid | None = None,
            space: ParameterSpace | None = None, output_labels=None):
        if grid is None:
            X = check_array(X)
            if sample_weight is None:
                raise ValueError("quadrature weights (sample_weight) are required without a grid")
            ids = tuple(f"p{i:04d}" for i in range(X.shape[0]))
            level = self.degree if self.degree is not None else 2
            grid = SparseGrid(dim=X.shape[1], level=level, points=X,
                              weights=np.asarray(sample_weight, float), point_ids=ids)
        Y = check_array(Y, ensure_min_samples=2)
        labels = tuple(output_labels) if output_labels is not None else tuple(
            f"y_{i + 1}" for i in range(Y.shape[1]))
        snaps = SnapshotMatrix(Y.T, labels, grid.point_ids)
        self.rom_ = build_rom(snaps, grid, self.variance_threshold, self.theta0, self.degree, space,
                              self.rcond)
        self.n_features_in_ = grid.dim
        self.n_components_ = self.rom_.p
        self.directions_ = self.rom_.directions
        self.jacobian_ = self.rom_.jacobian
        return self

    def transform(self, Y):
        """Reduced coordinates of output vectors, shape (n, p)."""
        check_is_fitted(self, "rom_")
        return project(self.rom_.basis, check_array(Y).T).T

    def predict(self, X):
        """Surrogate reduced outputs at unit-cube inputs, shape (n, p)."""
        check_is_fitted(self, "rom_")
        return eval_surrogate(self.rom_.surrogate, check_array(X))

    def plan(self, Y_targets):
        """Unit-cube input plans for each target row, shape (n, m)."""
        check_is_fitted(self, "rom_")
        return np.array([plan_for_target(self.rom_, y).theta_plan for y in check_array(Y_targets)])
