import json
import math

import numpy as np
import pytest
from scipy import stats

from csknn import bench
from csknn import manifold_lab as ml
from csknn.classifier import EVAL_COLUMNS
from csknn.cli import main
from csknn.hard_family import BenignFamily


def test_fit_slope_examples():
    slope, intercept, se = bench.fit_slope([(1, 1), (math.e, math.exp(-1))])
    assert slope == pytest.approx(-1) and intercept == pytest.approx(0, abs=1e-15)
    assert math.isnan(se)
    ns = [2 ** i for i in range(9, 15)]
    slope, _, se = bench.fit_slope([(n, 3 * n ** -0.5) for n in ns])
    assert slope == pytest.approx(-0.5, abs=1e-12) and se == pytest.approx(0, abs=1e-12)
    with pytest.raises(ValueError):
        bench.fit_slope([(10, 1.0)])
    with pytest.raises(ValueError):
        bench.fit_slope([(10, 1.0), (20, 0.0)])


def test_fit_slope_matches_linregress():
    rng = np.random.default_rng(0)
    ns = np.array([512, 1024, 2048, 4096, 8192])
    vals = 0.7 * ns ** -0.6 * np.exp(0.2 * rng.standard_normal(ns.size))
    slope, intercept, se = bench.fit_slope(zip(ns, vals))
    ref = stats.linregress(np.log(ns), np.log(vals))
    assert slope == pytest.approx(ref.slope, abs=1e-12)
    assert intercept == pytest.approx(ref.intercept, abs=1e-12)
    assert se == pytest.approx(ref.stderr, abs=1e-12)


def _config(**kw):
    base = dict(distribution=BenignFamily(ml.EmbeddedManifold("circle", 1.0, 20, 0)),
                phi=bench.cg.CostMatrix.zero_one(), n_grid=(512, 1024, 2048, 4096), trials=3)
    base.update(kw)
    return bench.ExperimentConfig(**base)


def _power_law(config, n, k, seed):
    return 0.3 * n ** (-2 / 3), 0.1


def _noisy_power_law(config, n, k, seed):
    rng = np.random.default_rng(seed)
    return 0.3 * n ** (-2 / 3) * (1 + 0.3 * rng.standard_normal()), 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        _config(n_grid=(512,))
    with pytest.raises(ValueError):
        _config(n_grid=(1024, 512))
    with pytest.raises(ValueError):
        _config(mode="sketched")
    assert _config().theory_exponent == pytest.approx(-2 / 3)


def test_run_rate_on_exact_power_law():
    report = bench.run_rate(_config(), trial_fn=_power_law)
    assert report.slope == pytest.approx(-2 / 3, abs=1e-12)
    assert [row["n"] for row in report.summary] == [512, 1024, 2048, 4096]
    assert math.isnan(report.summary[0]["slope_so_far"])
    assert report.summary[-1]["slope_so_far"] == pytest.approx(-2 / 3, abs=1e-12)
    assert not report.clipped
    seeds = {(r["n"], r["trial"]): r["seed"] for r in report.rows}
    assert seeds[(1024, 2)] == 10 ** 6 + 2


def test_run_rate_clips_nonpositive_means():
    report = bench.run_rate(_config(), trial_fn=lambda c, n, k, s: (0.0 if n == 1024 else 0.01, 0.0))
    assert report.clipped and report.notes
    assert report.summary[1]["mean_excess"] == bench.CLIP_FLOOR


def test_slope_stderr_halves_with_four_times_the_trials():
    few = bench.run_rate(_config(trials=40), trial_fn=_noisy_power_law)
    many = bench.run_rate(_config(trials=160), trial_fn=_noisy_power_law)
    assert 2 * 0.7 <= few.slope_stderr / many.slope_stderr <= 2 * 1.3


def test_run_rate_is_thread_independent(tmp_path):
    cfg = _config(n_grid=(128, 256), trials=3, m_test=2000, seed=11)
    out = []
    for threads in (1, 4, 1):
        report = bench.run_rate(cfg, threads)
        path = tmp_path / f"rows{len(out)}.csv"
        bench.write_rate_rows(report, path)
        bench.write_rate_summary(report, str(path) + ".s")
        out.append(path.read_bytes() + (tmp_path / (path.name + ".s")).read_bytes())
    assert out[0] == out[1] == out[2]


def test_run_trial_is_deterministic():
    exact = _config(m_test=2000)
    proj = _config(m_test=2000, mode="projected", proj_dim=10)
    assert bench.run_trial(exact, 256, 20, 5) == bench.run_trial(exact, 256, 20, 5)
    assert bench.run_trial(proj, 256, 20, 5) == bench.run_trial(proj, 256, 20, 5)
    assert proj.mode_label == "projected:achlioptas:10"


def test_concentration_bounds():
    fam = BenignFamily(ml.EmbeddedManifold("circle", 1.0, 20, 0))
    res = bench.check_knn_radius(fam, 500, 50, 0.2, 2000, 0)
    assert "bound=0.00193045" in res.detail and res.passed
    res = bench.check_hoeffding(fam, 500, 100, 0.2, 2000, 0)
    assert "bound=0.00134185" in res.detail and res.passed
    edge = bench.check_knn_radius(fam, 100, 20, 0.2, 200, 0)
    assert edge.passed and "bound=1" in edge.detail
    with pytest.raises(ValueError):
        bench.check_knn_radius(fam, 100, 21, 0.2, 200, 0)


@pytest.fixture(scope="module")
def battery():
    return bench.verify_all(0)


def test_verify_all_passes(battery):
    names = [c.name for c in battery]
    assert all(c.passed for c in battery), [c for c in battery if not c.passed]
    assert len(set(names)) == len(names)
    for prefix in ("cost.", "projection.", "neighbours.", "geometry.", "hard.", "knn_radius",
                   "hoeffding"):
        assert any(n.startswith(prefix) for n in names)


def test_cli_verify_fault_injection(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["verify", "--c-scale", "10", "--out", str(out)]) == 1
    report = json.loads(out.read_text())
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    assert failed == ["cost.margin_sweep"]
    assert all({"name", "passed", "slack", "detail"} <= set(c) for c in report["checks"])


def test_cli_calibrate(tmp_path, capsys):
    path = tmp_path / "phi.txt"
    path.write_text("2\n0 5\n1 0\n")
    assert main(["calibrate", "--cost", str(path)]) == 0
    cal = json.loads(capsys.readouterr().out)
    assert cal["kappa"] == pytest.approx(1 / 6) and cal["j_star"] == [1, 2]
    path.write_text("2\n0 1\n0 0\n")
    assert main(["calibrate", "--cost", str(path)]) == 2


def test_cli_generate_and_evaluate(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("manifold = sphere\nd = 6\nm_test = 1000  # small\n")
    data = tmp_path / "d.txt"
    assert main(["generate", "--n", "5", "--config", str(cfg), "--out", str(data), "--seed", "3"]) == 0
    assert data.read_text().splitlines()[0] == "5 6 2"
    assert main(["evaluate", "--n", "200", "--config", str(cfg), "--seed", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == ",".join(EVAL_COLUMNS)
    assert lines[1].startswith("benign,2,6,200,")


def test_cli_rate_byte_identical(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("n_grid = 128,256\ntrials = 2\nm_test = 1000\n")
    blobs = []
    for threads in ("1", "3"):
        out = tmp_path / f"r{threads}.csv"
        assert main(["rate", "--config", str(cfg), "--out", str(out), "--threads", threads,
                     "--seed", "9"]) == 0
        blobs.append(out.read_bytes() + (tmp_path / f"r{threads}.csv.summary.csv").read_bytes())
    assert blobs[0] == blobs[1]
    assert blobs[0].splitlines()[0] == b"family,gamma,d,n,k,mode,trial,excess_risk,misclass_prob,seed"
    assert b"n,mean_excess,stderr,k,slope_so_far" in blobs[0]


def test_cli_project_check(tmp_path, capsys):
    out = tmp_path / "q.csv"
    assert main(["project-check", "--dims", "8,32", "--projections", "2", "--points", "120",
                 "--queries", "20", "--k", "1,3", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["32"]["median_epsilon"] < summary["8"]["median_epsilon"]
    rows = out.read_text().splitlines()
    assert rows[0] == "query_id,k,exact_radius,approx_radius,theta,omega"
    assert len(rows) == 1 + 2 * 2 * 2 * 20
