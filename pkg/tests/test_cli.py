import csv
import io
import json
import shutil
import subprocess
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest
import yaml

from ioredux.cli import main
from ioredux.gpce import eval_surrogate
from ioredux.model import ModelConfig, from_unit, outcomes, simulate
from ioredux.pipeline import ReducedRom, reconstruct_outputs
from ioredux.reduction import SnapshotMatrix

LABELS = ("infections_A", "infections_B", "infections_C", "infections_D", "infections_total", "spending")


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    return rows[0], rows[1:]


def write_targets(path, rows):
    lines = ["target_id," + ",".join(LABELS)]
    lines += [f"{tid}," + ",".join(repr(float(v)) for v in vals) for tid, vals in rows]
    Path(path).write_text("\n".join(lines) + "\n")


@pytest.fixture(scope="session")
def pipeline_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("sample", "--dim", 10, "--level", 2, "--out", d / "design.csv") == 0
    assert run("evaluate", "--design", d / "design.csv", "--out", d / "snapshots.csv") == 0
    assert run("reduce", "--design", d / "design.csv", "--snapshots", d / "snapshots.csv",
               "--out", d / "rom.json") == 0
    return d


@pytest.fixture
def workdir(pipeline_dir, tmp_path):
    """A private copy of the pipeline artifacts that a test may tamper with."""
    for f in pipeline_dir.iterdir():
        shutil.copy(f, tmp_path / f.name)
    return tmp_path


@pytest.fixture(scope="session")
def y0():
    cfg = ModelConfig.default()
    return outcomes(simulate(from_unit(cfg.parameter_space(), np.full(10, 0.5)), cfg))[0]


# sample ----------------------------------------------------------------------------


def test_sample_221_and_artifacts(pipeline_dir):
    header, rows = read_csv(pipeline_dir / "design.csv")
    assert header == ["point_id"] + [f"theta_{i}" for i in range(1, 11)]
    assert len(rows) == 221
    for name in ("design.manifest.json", "design.grid.json", "design.grid.manifest.json"):
        assert (pipeline_dir / name).exists()
    man = json.loads((pipeline_dir / "design.manifest.json").read_text())
    assert man["command"] == "sample" and "design.csv" in man["outputs"]


def test_sample_defaults_dim_from_model(tmp_path):
    assert run("sample", "--out", tmp_path / "d.csv") == 0
    assert len(read_csv(tmp_path / "d.csv")[1]) == 221


def test_sample_one_point(tmp_path):
    assert run("sample", "--dim", 1, "--level", 0, "--out", tmp_path / "d.csv") == 0
    assert read_csv(tmp_path / "d.csv")[1] == [["p0000", "0.5"]]


def test_sample_is_byte_identical(pipeline_dir, tmp_path):
    assert run("sample", "--dim", 10, "--level", 2, "--out", tmp_path / "design.csv") == 0
    assert (tmp_path / "design.csv").read_bytes() == (pipeline_dir / "design.csv").read_bytes()
    assert (tmp_path / "design.grid.json").read_bytes() == (pipeline_dir / "design.grid.json").read_bytes()


def test_sample_from_config_file(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"dim": 3, "level": 1}))
    assert run("sample", "--config", cfg, "--out", tmp_path / "d.csv") == 0
    assert len(read_csv(tmp_path / "d.csv")[1]) == 7
    # flags override the file
    assert run("sample", "--config", cfg, "--level", 2, "--out", tmp_path / "e.csv") == 0
    assert len(read_csv(tmp_path / "e.csv")[1]) == 25
    man = json.loads((tmp_path / "d.manifest.json").read_text())
    assert man["config_hash"] and man["config_path"].endswith("run.yaml")


@pytest.mark.parametrize("argv", [
    ["--dim", 0],
    ["--level", -1],
    ["--dim", 10, "--level", 4, "--max-points", 1000],
])
def test_sample_config_errors(tmp_path, argv, capsys):
    assert run("sample", *argv, "--out", tmp_path / "d.csv") == 2
    assert "error" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    assert run("sample", "--config", bad, "--out", tmp_path / "d.csv") == 2
    assert run("sample", "--config", tmp_path / "missing.yaml", "--out", tmp_path / "d.csv") == 2


# evaluate -----------------------------------------------------------------------------


def test_evaluate_snapshot_shape(pipeline_dir):
    snaps = SnapshotMatrix.from_csv((pipeline_dir / "snapshots.csv").read_text())
    assert snaps.shape == (6, 221)
    assert snaps.row_labels == LABELS
    man = json.loads((pipeline_dir / "snapshots.manifest.json").read_text())
    assert man["inputs"]["design.csv"] == man_hash(pipeline_dir / "design.csv")


def man_hash(path):
    return json.loads(Path(path).with_name(Path(path).stem + ".manifest.json").read_text())["outputs"][Path(path).name]


def test_evaluate_jobs_parity(pipeline_dir, tmp_path):
    for f in ("design.csv", "design.manifest.json", "design.grid.json", "design.grid.manifest.json"):
        shutil.copy(pipeline_dir / f, tmp_path / f)
    assert run("evaluate", "--design", tmp_path / "design.csv", "--jobs", 8, "--out", tmp_path / "s8.csv") == 0
    assert (tmp_path / "s8.csv").read_bytes() == (pipeline_dir / "snapshots.csv").read_bytes()


def test_evaluate_one_point_matches_simulate(tmp_path):
    cfg_file = tmp_path / "one.yaml"
    cfg_file.write_text(yaml.safe_dump({"level": 0}))
    assert run("sample", "--config", cfg_file, "--out", tmp_path / "d.csv") == 0
    assert run("evaluate", "--design", tmp_path / "d.csv", "--out", tmp_path / "s.csv") == 0
    snaps = SnapshotMatrix.from_csv((tmp_path / "s.csv").read_text())
    cfg = ModelConfig.default()
    direct = outcomes(simulate(from_unit(cfg.parameter_space(), np.full(10, 0.5)), cfg))[0]
    np.testing.assert_array_equal(snaps.data[:, 0], direct)


def test_evaluate_dim_mismatch(tmp_path):
    assert run("sample", "--dim", 3, "--level", 1, "--out", tmp_path / "d.csv") == 0
    assert run("evaluate", "--design", tmp_path / "d.csv", "--out", tmp_path / "s.csv") == 2


EXTERNAL_SCRIPT = textwrap.dedent("""
    import csv, os, sys
    mode = sys.argv[1]
    rows = list(csv.reader(open(os.environ["IOREDUX_BATCH_IN"])))[1:]
    if mode == "fail":
        sys.exit(4)
    with open(os.environ["IOREDUX_BATCH_OUT"], "w") as f:
        f.write("point_id,u,v\\n")
        for r in rows:
            x = [float(t) for t in r[1:]]
            out = (1.0, 2.0) if mode == "const" else (x[0] + 2 * x[1], x[0] * x[1])
            f.write(f"{r[0]},{out[0]!r},{out[1]!r}\\n")
""")


def external_config(tmp_path, mode):
    script = tmp_path / "ext.py"
    script.write_text(EXTERNAL_SCRIPT)
    cfg = {
        "level": 2,
        "model": {
            "kind": "external",
            "command": f"{sys.executable} {script} {mode}",
            "output_labels": ["u", "v"],
            "parameter_space": {"names": ["a", "b"], "lower": [1.0, 10.0], "upper": [2.0, 30.0]},
        },
    }
    path = tmp_path / f"ext_{mode}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_external_model_passthrough(tmp_path, monkeypatch):
    monkeypatch.delenv("IOREDUX_MODEL_COMMAND", raising=False)
    cfg = external_config(tmp_path, "ok")
    assert run("sample", "--config", cfg, "--out", tmp_path / "d.csv") == 0
    assert run("evaluate", "--config", cfg, "--design", tmp_path / "d.csv", "--out", tmp_path / "s.csv") == 0
    snaps = SnapshotMatrix.from_csv((tmp_path / "s.csv").read_text())
    assert snaps.row_labels == ("u", "v")
    _, design = read_csv(tmp_path / "d.csv")
    theta = np.array([[float(x) for x in r[1:]] for r in design])
    a, b = 1.0 + theta[:, 0], 10.0 + 20.0 * theta[:, 1]
    np.testing.assert_allclose(snaps.data[0], a + 2 * b, rtol=1e-15)
    np.testing.assert_allclose(snaps.data[1], a * b, rtol=1e-15)
    assert run("reduce", "--config", cfg, "--design", tmp_path / "d.csv", "--snapshots", tmp_path / "s.csv",
               "--out", tmp_path / "rom.json") == 0


def test_external_model_failure_exit_3(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("IOREDUX_MODEL_COMMAND", raising=False)
    cfg = external_config(tmp_path, "fail")
    assert run("sample", "--config", cfg, "--out", tmp_path / "d.csv") == 0
    assert run("evaluate", "--config", cfg, "--design", tmp_path / "d.csv", "--out", tmp_path / "s.csv") == 3
    assert "exit code 4" in capsys.readouterr().err


def test_external_model_env_override(tmp_path, monkeypatch):
    cfg = external_config(tmp_path, "fail")
    assert run("sample", "--config", cfg, "--out", tmp_path / "d.csv") == 0
    monkeypatch.setenv("IOREDUX_MODEL_COMMAND", f"{sys.executable} {tmp_path / 'ext.py'} ok")
    assert run("evaluate", "--config", cfg, "--design", tmp_path / "d.csv", "--out", tmp_path / "s.csv") == 0


# reduce ------------------------------------------------------------------------------


def test_reduce_writes_rom_and_summary(pipeline_dir):
    rom = ReducedRom.from_json((pipeline_dir / "rom.json").read_text())
    assert 1 <= rom.p <= 6 and rom.basis.retained_variance >= 0.95
    summary = (pipeline_dir / "rom.summary.txt").read_text()
    assert f"reduced dimension p: {rom.p}" in summary
    assert "jacobian rank" in summary and "singular values" in summary
    man = json.loads((pipeline_dir / "rom.manifest.json").read_text())
    assert set(man["inputs"]) == {"design.csv", "snapshots.csv"}


def test_reduce_is_byte_identical(workdir, pipeline_dir):
    assert run("reduce", "--design", workdir / "design.csv", "--snapshots", workdir / "snapshots.csv",
               "--out", workdir / "rom2.json") == 0
    assert (workdir / "rom2.json").read_bytes() == (pipeline_dir / "rom.json").read_bytes()


def test_reduce_degenerate_exit_4(tmp_path, monkeypatch):
    monkeypatch.delenv("IOREDUX_MODEL_COMMAND", raising=False)
    cfg = external_config(tmp_path, "const")
    assert run("sample", "--config", cfg, "--out", tmp_path / "d.csv") == 0
    assert run("evaluate", "--config", cfg, "--design", tmp_path / "d.csv", "--out", tmp_path / "s.csv") == 0
    assert run("reduce", "--config", cfg, "--design", tmp_path / "d.csv", "--snapshots", tmp_path / "s.csv",
               "--out", tmp_path / "rom.json") == 4


# verify ------------------------------------------------------------------------------


def test_verify_passes(workdir, capsys):
    assert run("verify", "--rom", workdir / "rom.json", "--out", workdir / "v.csv") == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    header, rows = read_csv(workdir / "v.csv")
    v = np.array([[float(x) for x in r[1:]] for r in rows])
    assert v.shape[0] == v.shape[1] == len(header) - 1
    assert np.all(np.abs(np.diag(v) - 1) <= 0.1)


def test_verify_tolerance_failure_exit_5(workdir, capsys):
    cfg = workdir / "tight.yaml"
    cfg.write_text(yaml.safe_dump({"verify": {"diag_tol": 1e-9, "offdiag_tol": 1e-9}}))
    assert run("verify", "--config", cfg, "--rom", workdir / "rom.json", "--out", workdir / "v.csv") == 5
    assert "FAIL" in capsys.readouterr().out


def test_verify_delta_too_large_exit_5(workdir, capsys):
    assert run("verify", "--rom", workdir / "rom.json", "--delta", 100, "--out", workdir / "v.csv") == 5
    assert "smaller delta" in capsys.readouterr().err


# plan --------------------------------------------------------------------------------


def plan_targets(y0):
    rows = []
    for tid, inf, spend in [("t1", 0.97, 0.96), ("t2", 0.97, 1.06), ("t3", 0.95, 1.0), ("t4", 0.95, 1.1)]:
        t = y0.copy()
        t[:5] *= inf
        t[5] *= spend
        rows.append((tid, t))
    return rows


def test_plan_four_targets(workdir, y0):
    write_targets(workdir / "targets.csv", plan_targets(y0))
    assert run("plan", "--rom", workdir / "rom.json", "--targets", workdir / "targets.csv", "--evaluate",
               "--out", workdir / "plans.csv") == 0
    header, rows = read_csv(workdir / "plans.csv")
    names = ModelConfig.default().parameter_names
    col = {h: i for i, h in enumerate(header)}
    theta = np.array([[float(r[col[f"theta_{n}"]]) for n in names] for r in rows])
    assert len({tuple(np.round(t, 12)) for t in theta}) == 4
    relerr = np.array([[float(r[col[f"relerr_{l}"]]) for l in LABELS] for r in rows])
    assert relerr.max() <= 0.05
    achieved_spend = [float(r[col["achieved_spending"]]) for r in rows]
    assert achieved_spend[0] < achieved_spend[1] and achieved_spend[2] < achieved_spend[3]
    # the cheaper plan leans on treatment rather than prophylaxis
    psi = [col[f"theta_{n}"] for n in names if n.startswith("psi")]
    alpha = [col[f"theta_{n}"] for n in names if n.startswith("alpha")]
    lo, hi = rows[0], rows[1]
    assert sum(float(lo[i]) for i in psi) < sum(float(hi[i]) for i in psi)
    assert sum(float(lo[i]) for i in alpha) > sum(float(hi[i]) for i in alpha)
    assert all(r[col["reachable"]] == "1" for r in rows)


def test_plan_fixed_point(workdir):
    rom = ReducedRom.from_json((workdir / "rom.json").read_text())
    y_fp = reconstruct_outputs(rom, eval_surrogate(rom.surrogate, rom.theta0))
    write_targets(workdir / "fp.csv", [("fp", y_fp)])
    assert run("plan", "--rom", workdir / "rom.json", "--targets", workdir / "fp.csv", "--out",
               workdir / "fp_plan.csv") == 0
    header, rows = read_csv(workdir / "fp_plan.csv")
    theta = [float(rows[0][header.index(f"theta_{n}")]) for n in rom.space.names]
    np.testing.assert_allclose(theta, 0.5, atol=1e-10)


def test_plan_unreachable_target(workdir, y0, capsys):
    target = y0.copy()
    target[:5] = 0.0  # the zero-transmission floor; no lever setting gets there
    write_targets(workdir / "floor.csv", [("floor", target)])
    args = ["plan", "--rom", workdir / "rom.json", "--targets", workdir / "floor.csv", "--out", workdir / "p.csv"]
    assert run(*args) == 0
    assert "unreachable" in capsys.readouterr().out
    header, rows = read_csv(workdir / "p.csv")
    assert rows[0][header.index("reachable")] == "0"
    assert any(rows[0][header.index(f"clamped_{n}")] == "1" for n in ModelConfig.default().parameter_names)
    assert run(*args, "--strict") == 6


@pytest.mark.parametrize("content", [
    "",
    "id,a\nx,1\n",
    "target_id," + ",".join(LABELS[:5]) + "\nx,1,2,3,4,5\n",
    "target_id," + ",".join(reversed(LABELS)) + "\nx,1,2,3,4,5,6\n",
    "target_id," + ",".join(LABELS) + "\n",
    "target_id," + ",".join(LABELS) + "\nx,1,2,3,4,5\n",
    "target_id," + ",".join(LABELS) + "\nx,1,2,3,4,5,abc\n",
    "target_id," + ",".join(LABELS) + "\nx,1,2,3,4,5,nan\n",
    "target_id," + ",".join(LABELS) + "\nx,1,2,3,4,5,6\nx,1,2,3,4,5,6\n",
])
def test_plan_malformed_targets_exit_6(workdir, content):
    (workdir / "bad.csv").write_text(content)
    assert run("plan", "--rom", workdir / "rom.json", "--targets", workdir / "bad.csv",
               "--out", workdir / "p.csv") == 6


# report ------------------------------------------------------------------------------


def test_report_csvs(workdir):
    assert run("report", "--rom", workdir / "rom.json", "--out-dir", workdir / "rep") == 0
    rom = ReducedRom.from_json((workdir / "rom.json").read_text())
    header, rows = read_csv(workdir / "rep" / "directions.csv")
    assert header == ["parameter"] + [f"tau_{j + 1}" for j in range(rom.p)]
    assert [r[0] for r in rows] == list(rom.space.names)
    np.testing.assert_array_equal(np.array([[float(x) for x in r[1:]] for r in rows]), rom.directions)
    header, rows = read_csv(workdir / "rep" / "loadings.csv")
    load = np.array([[float(x) for x in r[1:]] for r in rows])
    assert [r[0] for r in rows] == list(LABELS)
    np.testing.assert_allclose(np.linalg.norm(load, axis=0), rom.basis.singular_values[: rom.p], rtol=1e-12)


# provenance ----------------------------------------------------------------------------


def test_tampered_design_exit_7(workdir, capsys):
    text = (workdir / "design.csv").read_text().replace("0.5", "0.25", 1)
    (workdir / "design.csv").write_text(text)
    assert run("evaluate", "--design", workdir / "design.csv", "--out", workdir / "s.csv") == 7
    assert "hash mismatch" in capsys.readouterr().err


def test_tampered_snapshots_exit_7(workdir):
    lines = (workdir / "snapshots.csv").read_text().splitlines()
    lines[1] = lines[1].rsplit(",", 1)[0] + ",1.0"
    (workdir / "snapshots.csv").write_text("\n".join(lines) + "\n")
    assert run("reduce", "--design", workdir / "design.csv", "--snapshots", workdir / "snapshots.csv",
               "--out", workdir / "r.json") == 7


def test_snapshots_from_other_design_exit_7(workdir):
    # regenerate a different design under the same name; the old snapshots no longer belong to it
    assert run("sample", "--dim", 10, "--level", 1, "--out", workdir / "design.csv") == 0
    assert run("reduce", "--design", workdir / "design.csv", "--snapshots", workdir / "snapshots.csv",
               "--out", workdir / "r.json") == 7


def test_tampered_rom_exit_7(workdir, y0):
    rom = json.loads((workdir / "rom.json").read_text())
    rom["theta0"] = [0.4] * 10
    (workdir / "rom.json").write_text(json.dumps(rom))
    write_targets(workdir / "t.csv", plan_targets(y0)[:1])
    assert run("plan", "--rom", workdir / "rom.json", "--targets", workdir / "t.csv", "--out", workdir / "p.csv") == 7
    assert run("verify", "--rom", workdir / "rom.json", "--out", workdir / "v.csv") == 7
    assert run("report", "--rom", workdir / "rom.json", "--out-dir", workdir) == 7


def test_missing_manifest_exit_7(workdir):
    (workdir / "rom.manifest.json").unlink()
    assert run("verify", "--rom", workdir / "rom.json", "--out", workdir / "v.csv") == 7


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("ioredux")
    if exe is None:
        pytest.skip("console script not installed")
    proc = subprocess.run([exe, "sample", "--dim", "2", "--level", "1", "--out", str(tmp_path / "d.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "5 design points" in proc.stdout
