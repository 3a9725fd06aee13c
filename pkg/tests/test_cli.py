import io
import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from fabsae.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main


@pytest.fixture
def areas(tmp_path):
    rng = np.random.default_rng(0)
    m = 16
    x = rng.normal(size=m)
    df = pd.DataFrame(
        {
            "area_id": [f"a{i:02d}" for i in range(m)],
            "y": 0.5 * x + rng.normal(size=m) * 1.3,
            "sigma2": 1.0,
            "x1": x,
        }
    )
    p = tmp_path / "areas.csv"
    df.to_csv(p, index=False)
    return p


@pytest.fixture
def households(tmp_path):
    rng = np.random.default_rng(1)
    rows = []
    for i in range(12):
        n = 1 if i == 0 else int(rng.integers(3, 9))
        mu = rng.normal()
        rows += [(f"c{i:02d}", float(np.exp(mu + 0.6 * rng.normal()))) for _ in range(n)]
    p = tmp_path / "house.csv"
    pd.DataFrame(rows, columns=["area_id", "value"]).to_csv(p, index=False)
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_fit_json(areas, capsys):
    code, out, _ = run(["fit", "--input", areas, "--spec", "full", "--w", "lattice:4x4"], capsys)
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["schema"] == "fabsae/1" and rep["converged"]
    assert len(rep["beta"]) == 2 and -1 < rep["rho"] < 1 and rep["tau2"] > 0


def test_intervals_direct_values(areas, capsys):
    code, out, _ = run(["intervals", "--input", areas, "--method", "direct"], capsys)
    assert code == EXIT_OK
    df = pd.read_csv(io.StringIO(out))
    assert np.allclose(df.width, 2 * 1.959963984540054, atol=1e-8)


def test_intervals_deterministic(areas, capsys):
    argv = ["intervals", "--input", areas, "--method", "fab-z", "--spec", "covariate"]
    _, a, _ = run(argv, capsys)
    _, b, _ = run(argv, capsys)
    assert a == b
    df = pd.read_csv(io.StringIO(a))
    assert (df.method == "fab-z").all() and (df.lower < df.upper).all()


def test_intervals_json_and_out_file(areas, tmp_path, capsys):
    dest = tmp_path / "o.json"
    code, out, _ = run(["intervals", "--input", areas, "--format", "json", "--out", dest], capsys)
    assert code == EXIT_OK and out == ""
    payload = json.loads(dest.read_text())
    assert payload["method"] == "fab-z" and len(payload["rows"]) == 16


def test_single_fit_caveat(areas, capsys):
    code, _, err = run(["intervals", "--input", areas, "--single-fit"], capsys)
    assert code == EXIT_OK and "warning" in err


def test_ingest_then_fab_t(households, tmp_path, capsys):
    area_csv = tmp_path / "areas.csv"
    code, _, err = run(["ingest", "--input", households, "--out", area_csv], capsys)
    assert code == EXIT_OK and "ineligible" in err
    df = pd.read_csv(area_csv)
    assert len(df) == 12 and df.eligible.sum() == 11
    code, out, err = run(["intervals", "--input", area_csv, "--method", "fab-t"], capsys)
    assert code == EXIT_OK
    res = pd.read_csv(io.StringIO(out))
    assert res.loc[0, "method"] == "direct" or np.isnan(res.loc[0, "lower"])
    assert (res.method.iloc[1:] == "fab-t").all()
    assert "c00" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["intervals", "--input", "/nonexistent.csv"],
        ["intervals", "--method", "nope", "--input", "x.csv"],
        ["fit", "--spec", "spatial"],
        ["simulate", "--tau2", "-1", "--reps", "1"],
    ],
)
def test_input_errors(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == EXIT_INPUT and err


def test_spatial_without_w_is_input_error(areas, capsys):
    code, _, err = run(["fit", "--input", areas, "--spec", "spatial"], capsys)
    assert code == EXIT_INPUT


def test_malformed_csv(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("area_id,y\na,1\n")
    code, _, _ = run(["intervals", "--input", p], capsys)
    assert code == EXIT_INPUT


def test_nonconvergence_exit_code(areas, capsys, monkeypatch):
    import fabsae.estimation as est

    orig = est.fit_ml_batch
    monkeypatch.setattr(est, "fit_ml_batch", lambda *a, **k: orig(*a, **{**k, "maxiter": 1}))
    code, out, _ = run(["fit", "--input", areas, "--spec", "full", "--w", "lattice:4x4"], capsys)
    assert code == EXIT_NUMERIC
    assert json.loads(out)["converged"] is False


def test_simulate_single_setting(capsys):
    argv = ["simulate", "--reps", "3", "--m", "16", "--tau2", "0.5", "--spec", "exchangeable"]
    code, a, _ = run(argv, capsys)
    assert code == EXIT_OK
    _, b, _ = run(argv, capsys)
    assert a == b
    df = pd.read_csv(io.StringIO(a))
    assert df.loc[0, "spec"] == "exchangeable" and df.loc[0, "n_reps"] == 3


def test_coverage_subcommand(capsys):
    code, out, _ = run(["coverage", "--reps", "3", "--m", "16", "--method", "eb", "--bins=-2,2,1"], capsys)
    assert code == EXIT_OK
    df = pd.read_csv(io.StringIO(out))
    assert len(df) == 4 and "analytic" in df.columns


def test_module_entry_point(areas):
    r = subprocess.run(
        [sys.executable, "-m", "fabsae", "intervals", "--input", str(areas), "--method", "direct"],
        capture_output=True,
        text=True,
    )
    assert r.returncode == 0 and r.stdout.startswith("area_id,")
