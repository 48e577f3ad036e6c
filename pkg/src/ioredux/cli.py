"""``ioredux`` command line: sample -> evaluate -> reduce -> verify / plan / report.

Every command writes its artifacts plus a ``<name>.manifest.json`` recording
the hashes of its inputs and outputs; downstream commands refuse artifacts
whose content no longer matches.

Exit codes: 0 ok, 2 config, 3 evaluation, 4 reduction, 5 verification
tolerance, 6 targets, 7 provenance.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .artifacts import RunManifest, check_artifact, check_derived_from, sha256_file, write_text
from .exceptions import (CubeViolationError, DegenerateSnapshotError, ModelEvaluationError,
                         ProvenanceError, ReachabilityWarning, SparseGridTooLarge)
from .model import BuiltinRunner, ExternalRunner, ModelConfig, ParameterSpace, evaluate_design
from .pipeline import (ReducedRom, build_rom, evaluate_plans, export_loadings, plan_for_target,
                       verify_directions)
from .reduction import SnapshotMatrix
from .sparsegrid import DEFAULT_POINT_CAP, SparseGrid, smolyak_grid

logger = logging.getLogger("ioredux")

EXIT_OK, EXIT_CONFIG, EXIT_EVAL, EXIT_REDUCE, EXIT_VERIFY, EXIT_TARGETS, EXIT_PROVENANCE = 0, 2, 3, 4, 5, 6, 7

DEFAULTS = {
    "dim": None,
    "level": 2,
    "max_points": DEFAULT_POINT_CAP,
    "threshold": 0.95,
    "theta0": None,
    "degree": None,
    "delta": 1.0,
    "jobs": 1,
    "reach_tol": 0.25,
    "verify": {"diag_tol": 0.1, "offdiag_tol": 0.05},
    "model": {"kind": "builtin", "config": None},
}


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _fmt(x: float) -> str:
    return f"{x:.4g}"


def _full(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# configuration


def load_config(args) -> tuple[dict, str | None, str | None]:
    cfg = json.loads(json.dumps(DEFAULTS))
    path = getattr(args, "config", None)
    chash = None
    if path:
        p = Path(path)
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise CLIError(f"cannot read config {path}: {exc}", EXIT_CONFIG) from exc
        if not isinstance(raw, dict):
            raise CLIError(f"config {path} must be a mapping", EXIT_CONFIG)
        for key, val in raw.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
        chash = sha256_file(p)
        base = p.resolve().parent
        mpath = cfg["model"].get("config")
        if mpath and not Path(mpath).is_absolute():
            cfg["model"]["config"] = str(base / mpath)
    for key in ("dim", "level", "threshold", "delta", "jobs", "degree", "max_points"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg, (str(path) if path else None), chash


def _model_config(cfg: dict) -> ModelConfig:
    mpath = cfg["model"].get("config")
    try:
        return ModelConfig.from_yaml(mpath) if mpath else ModelConfig.default()
    except (OSError, KeyError, ValueError, TypeError, yaml.YAMLError) as exc:
        raise CLIError(f"invalid model config: {exc}", EXIT_CONFIG) from exc


def parameter_space(cfg: dict) -> ParameterSpace:
    kind = cfg["model"].get("kind", "builtin")
    try:
        if kind == "builtin":
            return _model_config(cfg).parameter_space()
        if kind == "external":
            box = cfg["model"].get("parameter_space")
            if not box:
                raise CLIError("external models need model.parameter_space (names, lower, upper)", EXIT_CONFIG)
            return ParameterSpace.from_dict(box)
    except (KeyError, ValueError) as exc:
        raise CLIError(f"invalid parameter space: {exc}", EXIT_CONFIG) from exc
    raise CLIError(f"unknown model kind {kind!r}", EXIT_CONFIG)


def make_runner(cfg: dict, jobs: int | None = None):
    kind = cfg["model"].get("kind", "builtin")
    if kind == "builtin":
        return BuiltinRunner(_model_config(cfg), jobs=int(jobs or cfg["jobs"]))
    try:
        runner = ExternalRunner(cfg["model"].get("command"))
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc
    labels = cfg["model"].get("output_labels")
    runner.output_labels = tuple(labels) if labels else None
    return runner


def _design_dims(cfg: dict) -> tuple[int, int]:
    # an explicit dim wins; the model's parameter count is checked at evaluate time
    dim = cfg["dim"] if cfg["dim"] is not None else parameter_space(cfg).dim
    try:
        dim, level = int(dim), int(cfg["level"])
    except (TypeError, ValueError) as exc:
        raise CLIError(f"dim and level must be integers: {exc}", EXIT_CONFIG) from exc
    if dim < 1 or level < 0:
        raise CLIError(f"need dim >= 1 and level >= 0, got dim={dim}, level={level}", EXIT_CONFIG)
    return dim, level


# --------------------------------------------------------------------------
# loading artifacts


def grid_json_path(design: str | Path) -> Path:
    p = Path(design)
    return p.with_name(p.stem + ".grid.json")


def load_design(design: str | Path) -> tuple[SparseGrid, str]:
    dhash = check_artifact(design)
    gpath = grid_json_path(design)
    check_artifact(gpath)
    meta = json.loads(gpath.read_text())
    if meta.get("design_hash") != dhash:
        raise ProvenanceError(f"{gpath.name} describes a different design than {Path(design).name}")
    grid = SparseGrid.from_files(Path(design).read_text(), meta)
    if grid.content_hash() != dhash:
        raise ProvenanceError(f"{design} is not in canonical form")
    return grid, dhash


def load_rom(path: str | Path) -> tuple[ReducedRom, str]:
    rhash = check_artifact(path)
    try:
        return ReducedRom.from_json(Path(path).read_text()), rhash
    except (KeyError, ValueError) as exc:
        raise CLIError(f"invalid ROM artifact {path}: {exc}", EXIT_REDUCE) from exc


# --------------------------------------------------------------------------
# commands


def cmd_sample(args) -> int:
    cfg, cpath, chash = load_config(args)
    dim, level = _design_dims(cfg)
    try:
        grid = smolyak_grid(dim, level, max_points=int(cfg["max_points"]))
    except (SparseGridTooLarge, ValueError) as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from exc
    out = Path(args.out)
    man = RunManifest("sample", cpath, chash)
    man.outputs[out.name] = write_text(out, grid.to_csv())
    gpath = grid_json_path(out)
    man.outputs[gpath.name] = write_text(gpath, json.dumps(grid.manifest(), indent=1, sort_keys=True) + "\n")
    man.write(out)
    man_g = RunManifest("sample", cpath, chash, outputs={gpath.name: man.outputs[gpath.name]})
    man_g.write(gpath)
    print(f"wrote {grid.n_points} design points (dim={dim}, level={level}) to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, cpath, chash = load_config(args)
    grid, dhash = load_design(args.design)
    space = parameter_space(cfg)
    if space.dim != grid.dim:
        raise CLIError(f"design dim {grid.dim} does not match the model's {space.dim} parameters", EXIT_CONFIG)
    runner = make_runner(cfg, args.jobs)
    snaps = evaluate_design(space, grid.points, runner, grid.point_ids)
    out = Path(args.out)
    man = RunManifest("evaluate", cpath, chash, inputs={Path(args.design).name: dhash})
    man.outputs[out.name] = write_text(out, snaps.to_csv())
    man.write(out)
    print(f"wrote {snaps.shape[0]}x{snaps.shape[1]} snapshot matrix to {out}")
    return EXIT_OK


def rom_summary(rom: ReducedRom) -> str:
    d = rom.diagnostics
    s = rom.basis.singular_values
    lines = [
        f"reduced dimension p: {rom.p}",
        f"retained variance: {_fmt(rom.basis.retained_variance)} (threshold {_fmt(rom.basis.threshold)})",
        "singular values: " + ", ".join(_fmt(v) for v in s),
        f"jacobian rank: {d['jacobian_rank']} of {rom.p}",
        "jacobian singular values: " + ", ".join(_fmt(v) for v in d["jacobian_singular_values"]),
        f"surrogate fit residual: {_fmt(d['fit_residual'])}",
        f"max |J tau_j - e_j|: {_fmt(d['direction_residual'])}",
    ]
    lines += [f"warning: {w}" for w in d.get("warnings", [])]
    return "\n".join(lines) + "\n"


def cmd_reduce(args) -> int:
    cfg, cpath, chash = load_config(args)
    grid, dhash = load_design(args.design)
    shash = check_artifact(args.snapshots)
    check_derived_from(args.snapshots, args.design, dhash)
    try:
        snaps = SnapshotMatrix.from_csv(Path(args.snapshots).read_text())
    except ValueError as exc:
        raise CLIError(f"invalid snapshot file: {exc}", EXIT_REDUCE) from exc
    space = parameter_space(cfg)
    theta0 = cfg.get("theta0")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rom = build_rom(snaps, grid, float(cfg["threshold"]), theta0,
                        None if cfg["degree"] is None else int(cfg["degree"]), space)
    out = Path(args.out)
    man = RunManifest("reduce", cpath, chash,
                      inputs={Path(args.design).name: dhash, Path(args.snapshots).name: shash})
    man.outputs[out.name] = write_text(out, rom.to_json())
    summary = rom_summary(rom)
    spath = out.with_name(out.stem + ".summary.txt")
    man.outputs[spath.name] = write_text(spath, summary)
    man.write(out)
    sys.stdout.write(summary)
    return EXIT_OK


def _matrix_csv(row_name: str, rows, cols, mat) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([row_name, *cols])
    for r, vals in zip(rows, mat):
        w.writerow([r, *(_full(v) for v in vals)])
    return buf.getvalue()


def cmd_verify(args) -> int:
    cfg, cpath, chash = load_config(args)
    rom, rhash = load_rom(args.rom)
    runner = make_runner(cfg, args.jobs)
    delta = float(cfg["delta"])
    try:
        v = verify_directions(rom, runner, delta)
    except CubeViolationError as exc:
        raise CLIError(str(exc), EXIT_VERIFY) from exc
    p = rom.p
    cols = [f"tau_{j + 1}" for j in range(p)]
    out = Path(args.out)
    man = RunManifest("verify", cpath, chash, inputs={Path(args.rom).name: rhash})
    man.outputs[out.name] = write_text(out, _matrix_csv("component", [f"pc_{i + 1}" for i in range(p)], cols, v))
    man.write(out)
    diag_tol = float(cfg["verify"]["diag_tol"])
    off_tol = float(cfg["verify"]["offdiag_tol"])
    diag_err = float(np.max(np.abs(np.diag(v) - 1.0)))
    off = v - np.diag(np.diag(v))
    off_err = float(np.max(np.abs(off))) if p > 1 else 0.0
    print(f"verification matrix (delta={_fmt(delta)}):")
    for i in range(p):
        print("  " + "  ".join(f"{_fmt(x):>9}" for x in v[i]))
    ok = diag_err <= diag_tol and off_err <= off_tol
    print(f"max |diag - 1| = {_fmt(diag_err)} (tol {_fmt(diag_tol)}), "
          f"max |offdiag| = {_fmt(off_err)} (tol {_fmt(off_tol)}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def read_targets(path: str | Path, labels: tuple[str, ...]) -> tuple[list[str], np.ndarray]:
    try:
        rows = [r for r in csv.reader(io.StringIO(Path(path).read_text())) if r]
    except OSError as exc:
        raise CLIError(f"cannot read targets: {exc}", EXIT_TARGETS) from exc
    if not rows or rows[0][:1] != ["target_id"]:
        raise CLIError("targets file must start with a 'target_id' header", EXIT_TARGETS)
    header = tuple(rows[0][1:])
    if len(header) != len(labels):
        raise CLIError(f"targets need {len(labels)} outputs ({', '.join(labels)}), got {len(header)}", EXIT_TARGETS)
    if header != labels:
        raise CLIError(f"target columns {header} do not match ROM outputs {labels}", EXIT_TARGETS)
    if len(rows) < 2:
        raise CLIError("targets file has no target rows", EXIT_TARGETS)
    ids, vals = [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(labels) + 1:
            raise CLIError(f"targets line {lineno}: expected {len(labels) + 1} fields", EXIT_TARGETS)
        try:
            v = [float(x) for x in r[1:]]
        except ValueError as exc:
            raise CLIError(f"targets line {lineno}: {exc}", EXIT_TARGETS) from exc
        if not np.all(np.isfinite(v)):
            raise CLIError(f"targets line {lineno}: non-finite value", EXIT_TARGETS)
        ids.append(r[0])
        vals.append(v)
    if len(set(ids)) != len(ids):
        raise CLIError("duplicate target_id in targets file", EXIT_TARGETS)
    return ids, np.array(vals)


def cmd_plan(args) -> int:
    cfg, cpath, chash = load_config(args)
    rom, rhash = load_rom(args.rom)
    ids, targets = read_targets(args.targets, rom.output_labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ReachabilityWarning)
        plans = [plan_for_target(rom, t, float(cfg["reach_tol"])) for t in targets]
    if args.evaluate:
        plans = evaluate_plans(rom, plans, make_runner(cfg, args.jobs), ids)
    names = rom.space.names
    p = rom.p
    header = (["target_id"] + [f"theta_{n}" for n in names] + [f"theta_hat_{n}" for n in names]
              + [f"a_{j + 1}" for j in range(p)] + [f"clamped_{n}" for n in names]
              + [f"predicted_pc_{j + 1}" for j in range(p)])
    if args.evaluate:
        header += [f"achieved_{l}" for l in rom.output_labels] + [f"relerr_{l}" for l in rom.output_labels]
    header += ["reachable", "warnings"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    unreachable = []
    for tid, pl in zip(ids, plans):
        row = ([tid] + [_full(x) for x in pl.theta_plan] + [_full(x) for x in pl.theta_hat]
               + [_full(x) for x in pl.coefficients] + [str(int(c)) for c in pl.clamped]
               + [_full(x) for x in pl.predicted_reduced])
        if args.evaluate:
            row += [_full(x) for x in pl.achieved_outputs] + [_full(x) for x in pl.relative_errors()]
        row += [str(int(pl.reachable)), "; ".join(pl.warnings)]
        w.writerow(row)
        if not pl.reachable:
            unreachable.append(tid)
        print(f"{tid}: theta = [" + ", ".join(_fmt(x) for x in pl.theta_plan) + "]")
        if args.evaluate:
            print("  achieved = [" + ", ".join(_fmt(x) for x in pl.achieved_outputs) + "], max rel err "
                  + _fmt(float(np.max(pl.relative_errors()))))
        for note in pl.warnings:
            print(f"  warning: {note}")
    out = Path(args.out)
    man = RunManifest("plan", cpath, chash,
                      inputs={Path(args.rom).name: rhash, Path(args.targets).name: sha256_file(args.targets)})
    man.outputs[out.name] = write_text(out, buf.getvalue())
    man.write(out)
    if args.strict and unreachable:
        print(f"unreachable targets: {', '.join(unreachable)}", file=sys.stderr)
        return EXIT_TARGETS
    return EXIT_OK


def cmd_report(args) -> int:
    rom, rhash = load_rom(args.rom)
    outdir = Path(args.out_dir)
    p = rom.p
    loadings = export_loadings(rom)
    lpath, dpath = outdir / "loadings.csv", outdir / "directions.csv"
    man = RunManifest("report", None, None, inputs={Path(args.rom).name: rhash})
    man.outputs[lpath.name] = write_text(
        lpath, _matrix_csv("output", rom.output_labels, [f"pc_{j + 1}" for j in range(p)], loadings))
    man.outputs[dpath.name] = write_text(
        dpath, _matrix_csv("parameter", rom.space.names, [f"tau_{j + 1}" for j in range(p)], rom.directions))
    man.write(lpath)
    print(f"wrote {lpath} and {dpath}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ioredux", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="pipeline config (YAML)")
        sp.set_defaults(func=func)
        return sp

    sp = add("sample", cmd_sample, "generate the sparse-grid design")
    sp.add_argument("--dim", type=int)
    sp.add_argument("--level", type=int)
    sp.add_argument("--max-points", dest="max_points", type=int)
    sp.add_argument("--out", default="design.csv")

    sp = add("evaluate", cmd_evaluate, "run the model on the design")
    sp.add_argument("--design", default="design.csv")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--out", default="snapshots.csv")

    sp = add("reduce", cmd_reduce, "build the reduced-order model")
    sp.add_argument("--design", default="design.csv")
    sp.add_argument("--snapshots", default="snapshots.csv")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--degree", type=int)
    sp.add_argument("--out", default="rom.json")

    sp = add("verify", cmd_verify, "check the reduced input directions against the model")
    sp.add_argument("--rom", default="rom.json")
    sp.add_argument("--delta", type=float)
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--out", default="verification.csv")

    sp = add("plan", cmd_plan, "turn output targets into input plans")
    sp.add_argument("--rom", default="rom.json")
    sp.add_argument("--targets", required=True)
    sp.add_argument("--evaluate", action="store_true", help="run the model at each plan")
    sp.add_argument("--strict", action="store_true", help="exit nonzero if any target is unreachable")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--out", default="plans.csv")

    sp = add("report", cmd_report, "export loadings and directions")
    sp.add_argument("--rom", default="rom.json")
    sp.add_argument("--out-dir", dest="out_dir", default=".")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ProvenanceError as exc:
        print(f"provenance error: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except ModelEvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except DegenerateSnapshotError as exc:
        print(f"reduction error: {exc}", file=sys.stderr)
        return EXIT_REDUCE
    except FileNotFoundError as exc:
        print(f"error: missing file {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
