import csv
import json

import numpy as np
import pytest

from gpsedf.cli import main, resolve_config
from gpsedf.fesolver import canonical_problem, solve_static
from gpsedf.kinematics import GOH_TRUTH

SMALL = {
    "GPSEDF_DATASET__ELL": "2",
    "GPSEDF_DATASET__STEPS": "6",
    "GPSEDF_TRAINING__WARMUP_ITERS": "20",
    "GPSEDF_TRAINING__ITERS_PER_GAMMA": "4",
    "GPSEDF_TRAINING__N_INDUCING": "[4, 4]",
    "GPSEDF_TRAINING__GAMMA_LADDER": "[1e-8, 1e-6]",
}


@pytest.fixture
def small_env(monkeypatch):
    for k, v in SMALL.items():
        monkeypatch.setenv(k, v)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_data_counts(tmp_path):
    out = tmp_path / "a" / "b"
    assert main(["generate-data", "--seed", "7", "--out", str(out)]) == 0
    rows = read_csv(out / "observations.csv")
    manifest = json.loads((out / "protocols.json").read_text())
    assert len(rows) == 200 and len(manifest["protocols"]) == 10
    assert len({r["protocol_id"] for r in rows}) == 10
    assert (out / "config.toml").exists()


def test_noise_free_data_equals_truth(tmp_path, monkeypatch):
    monkeypatch.setenv("GPSEDF_DATASET__NOISE", "0.0")
    assert main(["generate-data", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "observations.csv")
    lx = np.array([float(r["lambda_x"]) for r in rows])
    ly = np.array([float(r["lambda_y"]) for r in rows])
    Pxx, Pyy = GOH_TRUTH.stresses(lx, ly)
    sheared = np.array([r["protocol_id"] for r in rows])
    # the pure-shear rows use the same biaxial stretch map
    assert np.allclose([float(r["Pxx"]) for r in rows], Pxx, rtol=0, atol=1e-12), sheared[:1]
    assert np.allclose([float(r["Pyy"]) for r in rows], Pyy, rtol=0, atol=1e-12)


def test_echoed_config_reproduces(tmp_path, monkeypatch):
    monkeypatch.setenv("GPSEDF_DATASET__ELL", "3")
    monkeypatch.setenv("GPSEDF_DATASET__NOISE", "0.1")
    assert main(["generate-data", "--seed", "11", "--out", str(tmp_path / "one")]) == 0
    monkeypatch.delenv("GPSEDF_DATASET__ELL")
    monkeypatch.delenv("GPSEDF_DATASET__NOISE")
    cfg = tmp_path / "one" / "config.toml"
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "two")]) == 0
    a = (tmp_path / "one" / "observations.csv").read_bytes()
    assert a == (tmp_path / "two" / "observations.csv").read_bytes()
    assert cfg.read_bytes().replace(b"/one", b"/two") == (tmp_path / "two" / "config.toml").read_bytes()


def test_train_is_deterministic(tmp_path, small_env):
    for name in ("r1", "r2"):
        assert main(["train", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "r1" / "state.json").read_bytes()
    assert a == (tmp_path / "r2" / "state.json").read_bytes()
    trace = read_csv(tmp_path / "r1" / "trace.csv")
    assert len(trace) == 20 + 2 * 4
    state = json.loads(a)
    assert state["format"] == "gpsedf.variational_state" and len(state["Z"]) == 16


def test_no_convexity_flag(tmp_path, small_env):
    assert main(["train", "--no-convexity", "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "trace.csv")) == 20


@pytest.fixture(scope="module")
def exact_state(tmp_path_factory):
    out = tmp_path_factory.mktemp("exact")
    assert main(["train", "--exact", "--out", str(out)]) == 0
    return out / "state.json"


def test_exact_flag(exact_state):
    state = json.loads(exact_state.read_text())
    assert state["exact"] is True and state["format"] == "gpsedf.exact_state"
    assert len(state["observations"]) == 200


def test_evaluate_outputs(exact_state, tmp_path):
    assert main(["evaluate", "--state", str(exact_state), "--skip-models", "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["fit"]["R2"] > 0.99
    assert set(metrics["grid_error"]) == {"val", "d1", "d4"}
    assert len(read_csv(tmp_path / "grid_mean_val.csv")) == 2500
    assert {"path_t", "mean", "std"} <= set(read_csv(tmp_path / "protocol_1_Pxx.csv")[0])


def test_compare_models(tmp_path, small_env):
    assert main(["compare-models", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "models.csv")
    assert len(rows) == 7 and all(np.isfinite(float(r["L2"])) for r in rows)


@pytest.fixture(scope="module")
def analytic_canonical():
    mesh, bcs = canonical_problem(16)
    return solve_static(mesh, bcs, GOH_TRUTH).displacement


def mean_displacement(out):
    stats = json.loads((out / "statistics.json").read_text())
    return stats, np.array(stats["fields"]["1"]["mean_displacement"]).ravel()


def test_sfea_truth_spline_matches_analytic(tmp_path, analytic_canonical):
    assert main(["sfea", "--truth", "--out", str(tmp_path)]) == 0
    stats, u = mean_displacement(tmp_path)
    assert stats["ensemble"]["m"] == 0
    assert len(list((tmp_path / "members").iterdir())) == 1
    assert [float(s) for s in stats["snapshots"]] == pytest.approx([0.0, 1 / 3, 2 / 3, 1.0])
    ua = analytic_canonical
    assert np.linalg.norm(u - ua) / np.linalg.norm(ua) < 0.01
    assert all(np.all(np.array(f["std_displacement"]) == 0.0) for f in stats["fields"].values())


def test_sfea_deterministic_gp_mean(exact_state, tmp_path, analytic_canonical):
    assert main(["sfea", "--state", str(exact_state), "--deterministic", "--out", str(tmp_path)]) == 0
    stats, u = mean_displacement(tmp_path)
    assert stats["ensemble"]["m"] == 0
    ua = analytic_canonical
    assert np.linalg.norm(u - ua) / np.linalg.norm(ua) < 0.05
    assert main(["export-spline", "--out", str(tmp_path / "x")]) == 2


def test_sfea_member_count(exact_state, tmp_path, monkeypatch):
    monkeypatch.setenv("GPSEDF_SFEA__N", "6")
    assert main(["sfea", "--state", str(exact_state), "--out", str(tmp_path)]) == 0
    stats = json.loads((tmp_path / "statistics.json").read_text())
    m = stats["ensemble"]["m"]
    assert len(list((tmp_path / "members").iterdir())) == 2 * m + 1
    sedf = json.loads((tmp_path / "sedf.json").read_text())
    assert len(sedf["modes"]) == m


def test_exit_codes(tmp_path, monkeypatch, exact_state):
    bad = tmp_path / "bad.toml"
    bad.write_text("[dataset]\nnot_a_key = 1\n")
    assert main(["generate-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--state", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    broken = tmp_path / "broken.csv"
    broken.write_text("protocol_id,lambda_x,lambda_y,Pxx,Pyy\n0,1.1,oops,1,2\n")
    monkeypatch.setenv("GPSEDF_DATASET__CSV", f'"{broken}"')
    assert main(["train", "--exact", "--out", str(tmp_path)]) == 4
    monkeypatch.delenv("GPSEDF_DATASET__CSV")
    monkeypatch.setenv("GPSEDF_SFEA__TRACTION", "[200.0, 100.0]")
    monkeypatch.setenv("GPSEDF_SFEA__N", "4")
    assert main(["sfea", "--state", str(exact_state), "--deterministic", "--out", str(tmp_path)]) == 3
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2


def test_env_override_types(monkeypatch):
    monkeypatch.setenv("GPSEDF_SEED", "5")
    monkeypatch.setenv("GPSEDF_REDUCTION__TOL", "0.1")
    cfg = resolve_config()
    assert cfg["seed"] == 5 and cfg["reduction"]["tol"] == 0.1
    monkeypatch.setenv("GPSEDF_SEED", '"five"')
    with pytest.raises(Exception):
        resolve_config()
