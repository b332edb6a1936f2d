"""End-to-end tests for the batch front end: config parsing, artifacts, exit codes."""

import json
import re
import subprocess
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest

from forwardreg import cli

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def write_config(tmp_path, body, name="run.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body))
    return str(path)


SCALAR_INI = """\
    [plant]
    kind = scalar_linear
    a = 2
    b = 1
    c = 1

    [forwarding]
    dt_quad = 0.01

    [scenario.1]
    y_ref = 0.2
    d_norm = 0.05
    t = 150
    dt = 0.05
    t_budget = 400

    [output]
    dir = unused
    seed = 0
    """


# -- config parsing -------------------------------------------------------------


def test_load_config_sections_and_scenarios(tmp_path):
    path = write_config(
        tmp_path,
        """\
        [plant]
        kind = scalar_linear

        [forwarding]
        dt_quad = 0.02

        [scenario.b]
        y_ref = 0.1

        [scenario.a]
        y_ref = 0.2

        [sweep]
        workers = 3

        [output]
        dir = somewhere
        seed = 7
        """,
    )
    cfg = cli.load_config(path)
    assert cfg.plant["kind"] == "scalar_linear"
    assert cfg.forwarding["dt_quad"] == "0.02"
    # scenario sections come back sorted by section name, labelled by suffix
    assert [sc["label"] for sc in cfg.scenarios] == ["a", "b"]
    assert cfg.scenarios[0]["y_ref"] == "0.2"
    assert cfg.seed == 7
    assert cfg.workers == 3
    assert cfg.outdir.name == "somewhere"
    assert re.fullmatch(r"[0-9a-f]{16}", cfg.sha256)


def test_load_config_overrides(tmp_path):
    path = write_config(tmp_path, SCALAR_INI)
    cfg = cli.load_config(path, out_override="elsewhere", seed_override=3,
                          workers_override=5)
    assert cfg.outdir.name == "elsewhere"
    assert cfg.seed == 3
    assert cfg.workers == 5
    # the hash covers the config text plus the effective seed
    assert cfg.sha256 != cli.load_config(path).sha256


def test_load_config_requires_plant_section(tmp_path):
    path = write_config(tmp_path, "[forwarding]\ndt_quad = 0.01\n")
    with pytest.raises(ValueError):
        cli.load_config(path)


def test_main_bad_inputs_exit_2(tmp_path, capsys):
    assert cli.main(["gains", "--config", str(tmp_path / "missing.ini")]) == 2

    bad_kind = write_config(
        tmp_path, "[plant]\nkind = maglev\n\n[forwarding]\ndt_quad = 0.01\n"
    )
    assert cli.main(["gains", "--config", bad_kind, "--out", str(tmp_path / "o")]) == 2

    no_quad = write_config(tmp_path, "[plant]\nkind = scalar_linear\n", name="nq.ini")
    assert cli.main(["gains", "--config", no_quad, "--out", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err


# -- gains ----------------------------------------------------------------------


def test_gains_artifact_and_formulas(tmp_path):
    path = write_config(tmp_path, SCALAR_INI)
    out = tmp_path / "out"
    assert cli.main(["gains", "--config", path, "--out", str(out)]) == 0

    doc = json.loads((out / "gains.json").read_text())
    assert doc["feasible"] is True
    assert doc["alpha"] == 2.0
    assert doc["lambda"] == 0.25
    # emitted constants must satisfy the design formulas exactly
    assert doc["lambda_tilde"] == doc["lambda"] / 3.0
    assert doc["kappa"] == min(doc["alpha"] / 4.0, doc["lambda_tilde"] / 4.0)
    assert doc["rho"] == doc["b_norm"] ** 2 * max(1.0, 2.0 / doc["alpha"])
    assert doc["dim_Z"] == 1
    assert "config_sha256=" in doc["meta"]


def test_gains_infeasible_exit_2(tmp_path):
    path = write_config(
        tmp_path,
        """\
        [plant]
        kind = scalar_linear
        a = 2
        b = 1
        c = 0

        [forwarding]
        dt_quad = 0.01
        """,
    )
    out = tmp_path / "out"
    assert cli.main(["gains", "--config", path, "--out", str(out)]) == 2
    doc = json.loads((out / "gains.json").read_text())
    assert doc["feasible"] is False
    assert doc["lambda"] == 0.0


# -- simulate -------------------------------------------------------------------


def test_simulate_artifacts(tmp_path):
    path = write_config(tmp_path, SCALAR_INI)
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", path, "--out", str(out)]) == 0

    lines = (out / "scenario_1.csv").read_text().splitlines()
    assert re.fullmatch(r"# config_sha256=[0-9a-f]{16} version=\S+ seed=0", lines[0])
    header = lines[1].split(",")
    assert header == ["t", "w_norm", "z_0", "y_0", "u_0", "V", "eta_norm",
                      "dev_rho", "dev_flat"]
    first = [float(v) for v in lines[2].split(",")]
    assert first[0] == 0.0 and first[1] == 0.0
    last = [float(v) for v in lines[-1].split(",")]
    assert last[0] == pytest.approx(150.0)
    assert abs(last[header.index("y_0")] - 0.2) < 1e-6

    rep = json.loads((out / "scenario_1_report.json").read_text())
    assert rep["aborted"] is False
    assert rep["steps"] == 3000
    assert rep["final_output_error"] < 1e-6
    assert rep["equilibrium"]["converged"] is True


def test_simulate_deterministic(tmp_path):
    path = write_config(tmp_path, SCALAR_INI)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--config", path, "--out", str(out1)]) == 0
    assert cli.main(["simulate", "--config", path, "--out", str(out2)]) == 0
    assert (out1 / "scenario_1.csv").read_bytes() == \
        (out2 / "scenario_1.csv").read_bytes()
    assert (out1 / "scenario_1_report.json").read_bytes() == \
        (out2 / "scenario_1_report.json").read_bytes()


def test_simulate_divergence_exit_3(tmp_path, capsys):
    # b = c = 2 makes the integrator feedback stiff; dt = 1.0 is far beyond
    # the explicit z-step stability limit, so the run must abort with code 3
    path = write_config(
        tmp_path,
        """\
        [plant]
        kind = scalar_linear
        a = 2
        b = 2
        c = 2

        [forwarding]
        dt_quad = 0.01

        [scenario.blowup]
        y_ref = 0.3
        t = 200
        dt = 1.0
        """,
    )
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", path, "--out", str(out)]) == 3
    assert "DIVERGED" in capsys.readouterr().out
    rep = json.loads((out / "scenario_blowup_report.json").read_text())
    assert rep["aborted"] is True


def test_simulate_no_scenarios_exit_2(tmp_path):
    path = write_config(
        tmp_path, "[plant]\nkind = scalar_linear\n\n[forwarding]\ndt_quad = 0.01\n"
    )
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / "o")]) == 2


# -- verify ---------------------------------------------------------------------


def test_verify_scalar_passes(tmp_path, capsys):
    path = write_config(tmp_path, SCALAR_INI)
    out = tmp_path / "out"
    assert cli.main(["verify", "--config", path, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "overall: PASS" in text
    assert "FAIL" not in text

    doc = json.loads((out / "verify.json").read_text())
    assert doc["overall"] is True
    for entry in doc["checks"].values():
        assert entry["pass"] is True


def test_verify_infeasible_plant_exit_1(tmp_path, capsys):
    # stiffness 0.25 exceeds the feasibility threshold for this wave plant,
    # so no contraction certificate exists and the battery must say so
    path = write_config(
        tmp_path,
        """\
        [plant]
        kind = sine_gordon
        n = 30
        gamma = 0.25

        [forwarding]
        dt_quad = 0.5
        tau_max = 40

        [verify]
        funceq_samples = 1
        duality_pairs = 1
        """,
    )
    out = tmp_path / "out"
    with pytest.warns(UserWarning):
        code = cli.main(["verify", "--config", path, "--out", str(out)])
    assert code == 1
    assert "FAIL monotonicity" in capsys.readouterr().out
    doc = json.loads((out / "verify.json").read_text())
    assert doc["overall"] is False
    assert doc["checks"]["monotonicity"]["pass"] is False


def test_verify_rank_deficient_exit_1(tmp_path):
    path = write_config(
        tmp_path,
        """\
        [plant]
        kind = linear_benchmark
        dim = 12
        alpha = 0.8
        seed = 1
        dim_out = 2
        rank_deficient = true

        [forwarding]
        dt_quad = 0.01

        [verify]
        funceq_samples = 1
        duality_pairs = 1
        """,
    )
    out = tmp_path / "out"
    assert cli.main(["verify", "--config", path, "--out", str(out)]) == 1
    doc = json.loads((out / "verify.json").read_text())
    assert doc["checks"]["range_condition"]["pass"] is False
    # open-loop structure is untouched, so the contraction check still holds
    assert doc["checks"]["contraction"]["pass"] is True


# -- sweep ----------------------------------------------------------------------


def test_sweep_grid(tmp_path, capsys):
    path = write_config(
        tmp_path,
        """\
        [plant]
        kind = scalar_linear
        a = 2
        b = 1
        c = 1

        [forwarding]
        dt_quad = 0.01

        [sweep]
        d_norms = 0, 0.05
        y_ref_norms = 0, 0.1
        dt = 0.05
        t_budget = 300
        res_tol = 1e-4

        [output]
        seed = 0
        """,
    )
    out = tmp_path / "out"
    assert cli.main(["sweep", "--config", path, "--out", str(out)]) == 0
    assert "4/4 cells succeeded" in capsys.readouterr().out

    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    header = lines[1].split(",")
    assert header[:4] == ["d_norm", "y_ref_norm", "success", "converged"]
    assert len(lines) == 2 + 4
    table = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    assert np.all(table[:, header.index("success")] == 1.0)
    assert np.all(table[:, header.index("output_residual")] <= 1e-4)
    # every cell of this loop contracts at the slow closed-loop mode
    rates = table[:, header.index("fitted_rate")]
    assert np.all(rates[np.isfinite(rates)] > 0.2)


def test_sweep_parallel_matches_serial(tmp_path):
    body = """\
        [plant]
        kind = scalar_linear

        [forwarding]
        dt_quad = 0.01

        [sweep]
        d_norms = 0, 0.05
        y_ref_norms = 0.1
        dt = 0.05
        t_budget = 200
        """
    path = write_config(tmp_path, body)
    serial, parallel = tmp_path / "s", tmp_path / "p"
    assert cli.main(["sweep", "--config", path, "--out", str(serial),
                     "--workers", "1"]) == 0
    assert cli.main(["sweep", "--config", path, "--out", str(parallel),
                     "--workers", "2"]) == 0
    assert (serial / "sweep.csv").read_bytes() == (parallel / "sweep.csv").read_bytes()


def test_sweep_infeasible_exit_2(tmp_path):
    path = write_config(
        tmp_path,
        "[plant]\nkind = scalar_linear\nc = 0\n\n[forwarding]\ndt_quad = 0.01\n",
    )
    assert cli.main(["sweep", "--config", path, "--out", str(tmp_path / "o")]) == 2


# -- shipped configs ------------------------------------------------------------


def test_shipped_linear_config_verifies(tmp_path, capsys):
    cfg = CONFIG_DIR / "linear.ini"
    assert cli.main(["verify", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert "overall: PASS" in capsys.readouterr().out


def test_shipped_negative_config_fails(tmp_path):
    cfg = CONFIG_DIR / "sine_gordon_infeasible.ini"
    with pytest.warns(UserWarning):
        code = cli.main(["verify", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 1
    with pytest.warns(UserWarning):
        assert cli.main(["gains", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_shipped_sine_gordon_config_gains(tmp_path):
    cfg = CONFIG_DIR / "sine_gordon.ini"
    assert cli.main(["gains", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "gains.json").read_text())
    assert doc["feasible"] is True and doc["kappa"] > 0


# -- installed entry point ------------------------------------------------------


def test_console_script_smoke(tmp_path):
    path = write_config(tmp_path, SCALAR_INI)
    out = tmp_path / "out"
    proc = subprocess.run(
        [sys.executable, "-c",
         "import sys; from forwardreg.cli import main; sys.exit(main(sys.argv[1:]))",
         "gains", "--config", path, "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "feasible = True" in proc.stdout
    assert (out / "gains.json").exists()
