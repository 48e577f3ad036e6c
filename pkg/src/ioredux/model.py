"""Parameterized dynamical model: parameter box, synthetic stratified
transmission model, outcome functionals and model runners.

The built-in model has four transmission groups, each split into susceptible
(S), on prophylaxis (P), infected undiagnosed (IU), diagnosed untreated (ID)
and treated (IT) compartments. Ten intervention levers (prophylaxis uptake
per group, treatment uptake and testing rates with the two heterosexual-like
groups B and C sharing a lever) form the input vector; six outcomes (new
infections per group, their total and total spending) form the output.
"""
from __future__ import annotations

import csv
import io
import os
import subprocess
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .exceptions import IntegrationError, ModelEvaluationError
from .reduction import SnapshotMatrix

N_COMPARTMENTS = 5  # S, P, IU, ID, IT
COMPARTMENT_NAMES = ("S", "P", "IU", "ID", "IT")
N_ACCUMULATORS = 6  # infections, P time, ID time, IT time, tests, diagnoses
NEGATIVITY_TOL = 1e-9
LEVER_KINDS = ("prophylaxis", "treatment", "testing")


@dataclass(frozen=True)
class ParameterSpace:
    """Box of physical parameter values and its affine map onto [0, 1]^m."""

    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    density: tuple[str, ...] = ()

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        if lower.shape != upper.shape or lower.ndim != 1 or len(self.names) != lower.size:
            raise ValueError("names, lower and upper must have the same length")
        if np.any(~(lower < upper)):
            i = int(np.flatnonzero(~(lower < upper))[0])
            raise ValueError(f"parameter {self.names[i]!r}: lower bound {lower[i]} is not below upper bound {upper[i]}")
        density = tuple(self.density) or ("uniform",) * lower.size
        if any(d != "uniform" for d in density):
            raise ValueError("only uniform parameter densities are supported")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "density", density)

    @property
    def dim(self) -> int:
        return self.lower.size

    @classmethod
    def unit(cls, dim: int) -> "ParameterSpace":
        return cls(tuple(f"theta_{i + 1}" for i in range(dim)), np.zeros(dim), np.ones(dim))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "lower": self.lower.tolist(),
                "upper": self.upper.tolist(), "density": list(self.density)}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSpace":
        return cls(tuple(d["names"]), np.array(d["lower"], float), np.array(d["upper"], float),
                   tuple(d.get("density", ())))


def to_unit(space: ParameterSpace, theta_hat) -> np.ndarray:
    theta_hat = np.asarray(theta_hat, dtype=float)
    bad = (theta_hat < space.lower) | (theta_hat > space.upper)
    if np.any(bad):
        i = int(np.flatnonzero(np.atleast_2d(bad).any(axis=0))[0])
        raise ValueError(
            f"parameter {space.names[i]!r} outside its box [{space.lower[i]}, {space.upper[i]}]"
        )
    return (theta_hat - space.lower) / (space.upper - space.lower)


def from_unit(space: ParameterSpace, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if np.any(~np.isfinite(theta)) or np.any(theta < 0.0) or np.any(theta > 1.0):
        raise ValueError("normalized parameters must lie in the closed unit cube")
    return space.lower + theta * (space.upper - space.lower)


# --------------------------------------------------------------------------
# Synthetic model configuration


@dataclass(frozen=True)
class Lever:
    name: str
    kind: str
    groups: tuple[int, ...]
    baseline: float


@dataclass(frozen=True)
class ModelConfig:
    groups: tuple[str, ...]
    population: np.ndarray
    initial_prevalence: np.ndarray
    initial_care_split: np.ndarray
    transmission: np.ndarray
    mixing: np.ndarray
    infectiousness: np.ndarray
    prophylaxis_efficacy: float
    prophylaxis_discontinuation: float
    levers: tuple[Lever, ...]
    box_multiplier: float
    costs: dict
    spending_unit: float = 1.0
    horizon: float = 8.0
    step: float = 0.01

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        groups = tuple(str(g) for g in raw["groups"])
        g = len(groups)
        levers = []
        for item in raw["parameters"]:
            if item["kind"] not in LEVER_KINDS:
                raise ValueError(f"lever {item['name']!r}: unknown kind {item['kind']!r}")
            try:
                idx = tuple(groups.index(str(x)) for x in item["groups"])
            except ValueError as exc:
                raise ValueError(f"lever {item['name']!r} refers to an unknown group") from exc
            levers.append(Lever(str(item["name"]), item["kind"], idx, float(item["baseline"])))
        cfg = cls(
            groups=groups,
            population=np.array(raw["population"], dtype=float),
            initial_prevalence=np.array(raw["initial_prevalence"], dtype=float),
            initial_care_split=np.array(raw["initial_care_split"], dtype=float),
            transmission=np.array(raw["transmission"], dtype=float),
            mixing=np.array(raw["mixing"], dtype=float),
            infectiousness=np.array(raw["infectiousness"], dtype=float),
            prophylaxis_efficacy=float(raw["prophylaxis_efficacy"]),
            prophylaxis_discontinuation=float(raw.get("prophylaxis_discontinuation", 0.0)),
            levers=tuple(levers),
            box_multiplier=float(raw.get("box_multiplier", 3.0)),
            costs={k: float(v) for k, v in raw["costs"].items()},
            spending_unit=float(raw.get("spending_unit", 1.0)),
            horizon=float(raw.get("horizon", 8.0)),
            step=float(raw.get("step", 0.01)),
        )
        for name, arr in (("population", cfg.population), ("initial_prevalence", cfg.initial_prevalence),
                          ("transmission", cfg.transmission)):
            if arr.shape != (g,):
                raise ValueError(f"{name} must have one entry per group ({g})")
        if cfg.mixing.shape != (g, g):
            raise ValueError(f"mixing must be {g}x{g}")
        if cfg.initial_care_split.shape != (3,) or cfg.infectiousness.shape != (3,):
            raise ValueError("initial_care_split and infectiousness need 3 entries (undiagnosed, diagnosed, treated)")
        for kind in LEVER_KINDS:
            covered = sorted(i for lv in cfg.levers if lv.kind == kind for i in lv.groups)
            if covered != list(range(g)):
                raise ValueError(f"{kind} levers must cover every group exactly once")
        missing = {"prophylaxis", "diagnosed", "treatment", "test", "diagnosis"} - set(cfg.costs)
        if missing:
            raise ValueError(f"missing cost constants: {sorted(missing)}")
        return cfg

    @classmethod
    def from_yaml(cls, path: str | os.PathLike) -> "ModelConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    @classmethod
    def default(cls) -> "ModelConfig":
        text = resources.files("ioredux").joinpath("data/default_model.yaml").read_text()
        return cls.from_dict(yaml.safe_load(text))

    @property
    def parameter_names(self) -> tuple[str, ...]:
        return tuple(lv.name for lv in self.levers)

    def parameter_space(self) -> ParameterSpace:
        base = np.array([lv.baseline for lv in self.levers])
        return ParameterSpace(self.parameter_names, base, base * self.box_multiplier)

    def with_costs(self, factor: float) -> "ModelConfig":
        return replace(self, costs={k: v * factor for k, v in self.costs.items()})

    def with_transmission(self, factor: float) -> "ModelConfig":
        return replace(self, transmission=self.transmission * factor)


OUTCOME_LABELS = ("infections_A", "infections_B", "infections_C", "infections_D",
                  "infections_total", "spending")


def outcome_labels(cfg: ModelConfig) -> tuple[str, ...]:
    return (*(f"infections_{g}" for g in cfg.groups), "infections_total", "spending")


# --------------------------------------------------------------------------
# Integration


def rk4_integrate(f: Callable, x0, horizon: float, step: float, t0: float = 0.0,
                  post_step: Callable | None = None):
    """Classical fixed-step fourth-order Runge-Kutta.

    ``f(t, x)`` returns dx/dt with the shape of ``x``. Returns ``(times, states)``
    with the initial state first and the terminal state last.
    """
    n_steps = horizon / step
    n = int(round(n_steps))
    if n < 1 or abs(n - n_steps) > 1e-9 * max(1.0, n_steps):
        raise ValueError(f"step {step} does not divide horizon {horizon}")
    x = np.array(x0, dtype=float)
    states = np.empty((n + 1,) + x.shape)
    states[0] = x
    h = horizon / n
    for i in range(n):
        t = t0 + i * h
        k1 = f(t, x)
        k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = f(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if post_step is not None:
            x = post_step(t + h, x)
        states[i + 1] = x
    return t0 + h * np.arange(n + 1), states


def lever_rates(cfg: ModelConfig, theta_hat: np.ndarray) -> dict[str, np.ndarray]:
    """Expand the (n, m) lever matrix into per-group rate arrays of shape (n, G)."""
    theta_hat = np.atleast_2d(theta_hat)
    n, g = theta_hat.shape[0], len(cfg.groups)
    rates = {kind: np.zeros((n, g)) for kind in LEVER_KINDS}
    for j, lv in enumerate(cfg.levers):
        for gi in lv.groups:
            rates[lv.kind][:, gi] = theta_hat[:, j]
    return rates


def initial_state(cfg: ModelConfig, n: int = 1) -> np.ndarray:
    g = len(cfg.groups)
    x = np.zeros((n, g, N_COMPARTMENTS + N_ACCUMULATORS))
    infected = cfg.population * cfg.initial_prevalence
    x[:, :, 0] = cfg.population - infected
    x[:, :, 2] = infected * cfg.initial_care_split[0]
    x[:, :, 3] = infected * cfg.initial_care_split[1]
    x[:, :, 4] = infected * cfg.initial_care_split[2]
    return x


def _make_rhs(cfg: ModelConfig, rates: dict[str, np.ndarray]):
    psi, alpha, kappa = rates["prophylaxis"], rates["treatment"], rates["testing"]
    beta = cfg.transmission
    mix = cfg.mixing
    w_u, w_d, w_t = cfg.infectiousness
    leak = 1.0 - cfg.prophylaxis_efficacy
    drop = cfg.prophylaxis_discontinuation
    pop = cfg.population
    n_groups = len(cfg.groups)

    def rhs(t, x):
        s, p, iu, idg, it = (x[:, :, c] for c in range(N_COMPARTMENTS))
        frac = (w_u * iu + w_d * idg + w_t * it) / pop
        # explicit sum keeps each point's arithmetic independent of batch shape
        pressure = np.zeros_like(frac)
        for h in range(n_groups):
            pressure = pressure + mix[:, h] * frac[:, h:h + 1]
        lam = beta * pressure
        inf_s = lam * s
        inf_p = lam * leak * p
        dx = np.empty_like(x)
        dx[:, :, 0] = -psi * s - inf_s + drop * p
        dx[:, :, 1] = psi * s - drop * p - inf_p
        dx[:, :, 2] = inf_s + inf_p - kappa * iu
        dx[:, :, 3] = kappa * iu - alpha * idg
        dx[:, :, 4] = alpha * idg
        dx[:, :, 5] = inf_s + inf_p
        dx[:, :, 6] = p
        dx[:, :, 7] = idg
        dx[:, :, 8] = it
        dx[:, :, 9] = kappa * (s + iu)
        dx[:, :, 10] = kappa * iu
        return dx

    return rhs


def _guard(t, x):
    comp = x[:, :, :N_COMPARTMENTS]
    if not np.all(np.isfinite(x)):
        bad = np.flatnonzero(~np.isfinite(x).all(axis=(1, 2)))
        raise IntegrationError(f"non-finite state at t={t:.4g} (point index {int(bad[0])})", )
    if np.any(comp < -NEGATIVITY_TOL):
        bad = np.flatnonzero((comp < -NEGATIVITY_TOL).any(axis=(1, 2)))
        err = IntegrationError(f"negative compartment at t={t:.4g}; step too large (point index {int(bad[0])})")
        err.index = int(bad[0])
        raise err
    x[:, :, :N_COMPARTMENTS] = np.maximum(comp, 0.0)
    return x


@dataclass(frozen=True)
class ModelState:
    compartments: np.ndarray          # (G, 5): S, P, IU, ID, IT per group
    cumulative_infections: np.ndarray  # (G,)
    cumulative_cost: float


@dataclass(frozen=True)
class Trajectory:
    """Batched trajectory: ``states`` has shape (n_times, n_points, G, 11)."""

    times: np.ndarray
    states: np.ndarray
    config: ModelConfig = field(repr=False)

    @property
    def n_points(self) -> int:
        return self.states.shape[1]

    def compartments(self) -> np.ndarray:
        return self.states[..., :N_COMPARTMENTS]

    def cumulative_infections(self) -> np.ndarray:
        return self.states[..., 5]

    def state(self, time_index: int = -1, point: int = 0) -> ModelState:
        x = self.states[time_index, point]
        return ModelState(x[:, :N_COMPARTMENTS].copy(), x[:, 5].copy(),
                          float(_spending(self.config, x[None])[0]))


def simulate(theta_hat, config: ModelConfig | None = None, horizon: float | None = None,
             step: float | None = None) -> Trajectory:
    """Integrate the synthetic model for one lever vector or an (n, m) batch.

    Points in a batch never interact, so results are identical whether points
    run together or one at a time.
    """
    cfg = config or ModelConfig.default()
    theta_hat = np.asarray(theta_hat, dtype=float)
    batch = np.atleast_2d(theta_hat)
    if batch.shape[1] != len(cfg.levers):
        raise ValueError(f"expected {len(cfg.levers)} parameters, got {batch.shape[1]}")
    if np.any(batch < 0):
        raise ValueError("rate parameters must be nonnegative")
    rhs = _make_rhs(cfg, lever_rates(cfg, batch))
    times, states = rk4_integrate(rhs, initial_state(cfg, batch.shape[0]),
                                  cfg.horizon if horizon is None else horizon,
                                  cfg.step if step is None else step, post_step=_guard)
    return Trajectory(times=times, states=states, config=cfg)


def _spending(cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    c = cfg.costs
    per_group = (c["prophylaxis"] * x[..., 6] + c["diagnosed"] * x[..., 7] + c["treatment"] * x[..., 8]
                 + c["test"] * x[..., 9] + c["diagnosis"] * x[..., 10])
    return per_group.sum(axis=-1) / cfg.spending_unit


def outcomes(trajectory: Trajectory, costs: dict | None = None) -> np.ndarray:
    """Outcome vectors at the horizon, shape (n_points, G + 2).

    Columns are new infections per group over the horizon, their total, and
    total spending. ``costs`` overrides the configured cost constants.
    """
    cfg = trajectory.config if costs is None else replace(trajectory.config, costs=dict(costs))
    final = trajectory.states[-1]
    inf = final[:, :, 5]
    return np.column_stack([inf, inf.sum(axis=1), _spending(cfg, final)])


# --------------------------------------------------------------------------
# Runners: callables ``runner(theta_hats (n, m), point_ids) -> (n, d)``


def _simulate_chunk(args):
    cfg, chunk = args
    return outcomes(simulate(chunk, cfg))


class BuiltinRunner:
    """Runs the synthetic model, optionally across worker processes."""

    def __init__(self, config: ModelConfig | None = None, jobs: int = 1, chunk_size: int = 32):
        self.config = config or ModelConfig.default()
        self.jobs = jobs
        self.chunk_size = chunk_size

    @property
    def output_labels(self) -> tuple[str, ...]:
        return outcome_labels(self.config)

    def __call__(self, theta_hats, point_ids: Sequence[str] | None = None) -> np.ndarray:
        theta_hats = np.atleast_2d(np.asarray(theta_hats, dtype=float))
        chunks = [theta_hats[i:i + self.chunk_size] for i in range(0, len(theta_hats), self.chunk_size)]
        try:
            if self.jobs > 1 and len(chunks) > 1:
                with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                    parts = list(pool.map(_simulate_chunk, [(self.config, c) for c in chunks]))
            else:
                parts = [_simulate_chunk((self.config, c)) for c in chunks]
        except IntegrationError as exc:
            # locate the failing point by rerunning one at a time
            for i, th in enumerate(theta_hats):
                try:
                    _simulate_chunk((self.config, th[None]))
                except IntegrationError as inner:
                    raise ModelEvaluationError(str(inner), index=i) from inner
            raise ModelEvaluationError(str(exc)) from exc
        return np.vstack(parts) if parts else np.zeros((0, len(self.output_labels)))


class FunctionRunner:
    """Wraps ``fn(theta_hat) -> outputs`` for a single point."""

    def __init__(self, fn: Callable, output_labels: Sequence[str] | None = None):
        self.fn = fn
        self.output_labels = tuple(output_labels) if output_labels else None

    def __call__(self, theta_hats, point_ids=None) -> np.ndarray:
        rows = []
        for i, th in enumerate(np.atleast_2d(theta_hats)):
            try:
                rows.append(np.asarray(self.fn(th), dtype=float))
            except Exception as exc:  # noqa: BLE001 - any user failure maps to one error type
                raise ModelEvaluationError(f"model failed: {exc}", index=i) from exc
        return np.vstack(rows)


EXTERNAL_COMMAND_ENV = "IOREDUX_MODEL_COMMAND"


class ExternalRunner:
    """Batch protocol for an external model.

    Writes ``batch_in.csv`` (``point_id,theta_hat_1..theta_hat_m``), runs the
    command in the batch directory with ``IOREDUX_BATCH_IN`` and
    ``IOREDUX_BATCH_OUT`` set, then reads ``batch_out.csv``
    (``point_id,y_1..y_d``). The environment variable ``IOREDUX_MODEL_COMMAND``
    overrides the configured command.
    """

    def __init__(self, command: str | None = None, workdir: str | os.PathLike | None = None,
                 timeout: float | None = None):
        self.command = os.environ.get(EXTERNAL_COMMAND_ENV) or command
        if not self.command:
            raise ValueError(f"no external model command configured (set {EXTERNAL_COMMAND_ENV})")
        self.workdir = workdir
        self.timeout = timeout
        self.output_labels = None

    def __call__(self, theta_hats, point_ids: Sequence[str] | None = None) -> np.ndarray:
        theta_hats = np.atleast_2d(np.asarray(theta_hats, dtype=float))
        ids = list(point_ids) if point_ids is not None else [f"q{i:05d}" for i in range(len(theta_hats))]
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            bin_, bout = Path(tmp, "batch_in.csv"), Path(tmp, "batch_out.csv")
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["point_id", *(f"theta_hat_{j + 1}" for j in range(theta_hats.shape[1]))])
            for pid, th in zip(ids, theta_hats):
                w.writerow([pid, *(repr(float(v)) for v in th)])
            bin_.write_text(buf.getvalue())
            env = dict(os.environ, IOREDUX_BATCH_IN=str(bin_), IOREDUX_BATCH_OUT=str(bout))
            proc = subprocess.run(self.command, shell=True, cwd=tmp, env=env, capture_output=True,
                                  text=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise ModelEvaluationError(
                    f"external model command failed with exit code {proc.returncode}: {proc.stderr.strip()}",
                    point_id=ids[0] if len(ids) == 1 else None)
            if not bout.exists():
                raise ModelEvaluationError("external model did not write batch_out.csv")
            return read_batch_output(bout.read_text(), ids)[0]


def read_batch_output(text: str, expected_ids: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or rows[0][:1] != ["point_id"]:
        raise ModelEvaluationError("batch_out.csv must start with a 'point_id' header")
    labels = rows[0][1:]
    found: dict[str, list[float]] = {}
    for r in rows[1:]:
        if r[0] in found:
            raise ModelEvaluationError(f"duplicate point_id {r[0]!r} in batch output", point_id=r[0])
        try:
            found[r[0]] = [float(v) for v in r[1:]]
        except ValueError as exc:
            raise ModelEvaluationError(f"unparseable output for point {r[0]!r}", point_id=r[0]) from exc
        if len(found[r[0]]) != len(labels):
            raise ModelEvaluationError(f"wrong number of outputs for point {r[0]!r}", point_id=r[0])
    for pid in expected_ids:
        if pid not in found:
            raise ModelEvaluationError(f"point_id {pid!r} missing from batch output", point_id=pid)
    extra = set(found) - set(expected_ids)
    if extra:
        raise ModelEvaluationError(f"unexpected point_id {sorted(extra)[0]!r} in batch output")
    return np.array([found[pid] for pid in expected_ids], dtype=float), labels


def evaluate_design(space: ParameterSpace, grid_points, runner: Callable,
                    point_ids: Sequence[str] | None = None,
                    row_labels: Sequence[str] | None = None) -> SnapshotMatrix:
    """Run the model at every design point; column j belongs to design point j."""
    pts = np.atleast_2d(np.asarray(grid_points, dtype=float))
    ids = tuple(point_ids) if point_ids is not None else tuple(f"p{j:04d}" for j in range(len(pts)))
    if len(ids) != len(pts):
        raise ValueError("one point id per design point is required")
    theta_hats = from_unit(space, pts)
    try:
        out = np.asarray(runner(theta_hats, ids), dtype=float)
    except ModelEvaluationError as exc:
        if exc.point_id is None and exc.index is not None:
            exc.point_id = ids[exc.index]
        raise ModelEvaluationError(f"evaluation failed at point {exc.point_id}: {exc}",
                                   point_id=exc.point_id, index=exc.index) from exc
    if out.shape[0] != len(pts):
        raise ModelEvaluationError(f"runner returned {out.shape[0]} rows for {len(pts)} points")
    bad = np.flatnonzero(~np.isfinite(out).all(axis=1))
    if bad.size:
        raise ModelEvaluationError(f"non-finite outputs at point {ids[bad[0]]}", point_id=ids[bad[0]])
    labels = row_labels or getattr(runner, "output_labels", None) or [f"y_{i + 1}" for i in range(out.shape[1])]
    return SnapshotMatrix(out.T, tuple(labels), ids)

