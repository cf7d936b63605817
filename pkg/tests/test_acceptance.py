"""Acceptance gate: one test per criterion, each recording a PASS/FAIL summary line.

The rate experiments are the expensive part (a few minutes in total on one
core); their reports are shared through module-scoped fixtures.
"""

import math

import numpy as np
import pytest

from csknn import bench
from csknn import cost_geometry as cg
from csknn import manifold_lab as ml
from csknn.classifier import Schedule, estimate_eta, predict
from csknn.cli import main
from csknn.hard_family import BenignFamily, build_hard, hard_params, validate
from csknn.neighbours import Dataset, NeighbourIndex, brute_force_knn
from csknn.projection import ProjectionSpec, distortion, sample_projection, theta_from_epsilon

N_GRID = (512, 1024, 2048, 4096, 8192, 16384)
TRIALS = 20
M_TEST = 20_000
ZO = cg.CostMatrix.zero_one()

# slope acceptance bands (configuration constants, not theory)
CIRCLE_BAND = (-0.87, -0.47)
SPHERE_BAND = (-0.70, -0.30)
PROJECTED_SLOPE_TOL = 0.15
PROJECTED_RISK_FACTOR = 2.0


def rate_config(kind, dim, mode="exact", seed=0):
    manifold = ml.EmbeddedManifold(kind, 1.0, dim, 0)
    return bench.ExperimentConfig(distribution=BenignFamily(manifold), phi=ZO, n_grid=N_GRID,
                                  trials=TRIALS, schedule=Schedule(gamma=manifold.intrinsic_dim),
                                  mode=mode, proj_kind="achlioptas", proj_dim=20, m_test=M_TEST,
                                  seed=seed)


def describe(report):
    return (f"slope {report.slope:+.3f} (MC se {report.slope_stderr:.3f}, fit se "
            f"{report.fit_stderr:.3f}, theory {report.theory_exponent:+.3f})")


@pytest.fixture(scope="module")
def circle_rate():
    return bench.run_rate(rate_config("circle", 20))


@pytest.fixture(scope="module")
def sphere_rate():
    return bench.run_rate(rate_config("sphere", 20))


@pytest.fixture(scope="module")
def wide_rates():
    return (bench.run_rate(rate_config("circle", 200)),
            bench.run_rate(rate_config("circle", 200, "projected")))


def test_criterion_01_circle_rate(circle_rate, record):
    lo, hi = CIRCLE_BAND
    ok = lo <= circle_rate.slope <= hi and not circle_rate.clipped
    record(1, ok, f"circle {describe(circle_rate)} in [{lo}, {hi}]")
    assert ok


def test_criterion_02_sphere_rate(circle_rate, sphere_rate, record):
    lo, hi = SPHERE_BAND
    in_band = lo <= sphere_rate.slope <= hi and not sphere_rate.clipped
    ordered = circle_rate.slope < sphere_rate.slope
    record(2, in_band and ordered,
           f"sphere {describe(sphere_rate)} in [{lo}, {hi}]; circle {circle_rate.slope:+.3f} "
           f"< sphere {sphere_rate.slope:+.3f}: {ordered}")
    assert in_band and ordered


def test_criterion_03_projection_keeps_rate(wide_rates, record):
    exact, projected = wide_rates
    gap = abs(projected.slope - exact.slope)
    top_exact = exact.summary[-1]["mean_excess"]
    top_proj = projected.summary[-1]["mean_excess"]
    ok = gap <= PROJECTED_SLOPE_TOL and top_proj <= PROJECTED_RISK_FACTOR * top_exact
    record(3, ok, f"d=200 exact slope {exact.slope:+.3f}, projected h=20 slope "
                  f"{projected.slope:+.3f} (|diff| {gap:.3f} <= {PROJECTED_SLOPE_TOL}); "
                  f"largest-n risk ratio {top_proj / top_exact:.3f} <= {PROJECTED_RISK_FACTOR}")
    assert ok


def test_criterion_04_distortion_and_radius_ratios(record):
    m = ml.EmbeddedManifold("circle", 1.0, 200, 0)
    dist = BenignFamily(m)
    pts = dist.sample(500, 4)
    queries = pts.features[:200]
    train = Dataset(pts.features[200:], pts.labels[200:], 2)
    c_tilde = ml.doubling_constant(dist.regularity_params(), m)
    medians, theta_slack, omega_slack, checked = [], math.inf, math.inf, 0
    for h in (8, 16, 32, 64):
        eps_all = []
        for s in range(20):
            proj = sample_projection(ProjectionSpec("achlioptas", 200, h, seed=s))
            eps = distortion(proj, pts.features).epsilon
            eps_all.append(eps)
            index = NeighbourIndex(train, proj)
            cap = theta_from_epsilon(eps) if eps < 1 else math.inf
            for k in (1, 5, 10):
                _, r0 = index.query_batch(queries, k, "exact")
                _, r1 = index.query_batch(queries, k, "projected")
                theta = r1 / r0
                theta_slack = min(theta_slack, float(np.min(cap + 1e-9 - theta)))
                omega = np.array([dist.ball_measure(x, b) / dist.ball_measure(x, a)
                                  for x, a, b in zip(queries, r0, r1)])
                omega_slack = min(omega_slack,
                                  float(np.min(c_tilde * theta ** m.intrinsic_dim + 1e-9 - omega)))
                checked += len(queries)
        medians.append(float(np.median(eps_all)))
    decreasing = all(b < a for a, b in zip(medians, medians[1:]))
    ok = decreasing and theta_slack >= 0 and omega_slack >= 0
    record(4, ok, "median eps over h=8,16,32,64: " + ", ".join(f"{v:.3f}" for v in medians)
           + f"; theta slack {theta_slack:.3g}, omega slack {omega_slack:.3g} over {checked} queries")
    assert ok


def test_criterion_05_switching_sweep(record):
    rng = np.random.default_rng(2024)
    mats = [bench.random_reasonable_matrix(rng, int(rng.integers(2, 6))) for _ in range(200)]
    worst, overlaps = bench.margin_sweep(mats, grid=50)
    ok = worst >= 0 and overlaps == 0
    record(5, ok, f"200 matrices x 50 deltas: worst margin slack {worst:.3g}, "
                  f"overlapping optimal sets {overlaps}")
    assert ok


def test_criterion_06_geometry_battery(record):
    failures, notes = [], []
    for kind in ("circle", "sphere"):
        m = ml.EmbeddedManifold(kind, 1.0, 10, 0)
        rows = ml.check_volume_bounds(m, np.linspace(0, m.reach / 8, 51)[1:] * (1 - 1e-12))
        if not all(r.passed for r in rows):
            failures.append(f"volume bounds {kind}")
    circle = ml.EmbeddedManifold("circle", 1.0, 10, 0)
    sphere = ml.EmbeddedManifold("sphere", 1.0, 10, 0)
    res = ml.check_intersection_bound(circle, circle.embed([1.0, 0.0]),
                                      circle.embed([math.cos(0.15), math.sin(0.15)]), 0.1, 0.1)
    notes.append(f"circle overlap {res.volume:.4f} >= {res.bound:.4f}")
    if not (res.sigma == 0 and res.passed):
        failures.append("circle intersection")
    res = ml.check_intersection_bound(sphere, sphere.embed([1.0, 0.0, 0.0]),
                                      sphere.embed([math.cos(0.12), math.sin(0.12), 0.0]),
                                      0.1, 0.05, 100_000, 0)
    notes.append(f"sphere overlap {res.volume:.2e} >= {res.bound:.2e} - 3x{res.sigma:.1e}")
    if not res.passed:
        failures.append("sphere intersection")
    params = ml.RegularityParams(1, 1, 1, 1, 1, alpha=1, C_alpha=12, beta=1, C_beta=2000)
    for m in (circle, sphere):
        g = m.intrinsic_dim
        for div in (2, 4, 8):
            con = hard_params(ZO, params, m, (min(m.reach, 1.0) / 16) / div, 0)
            if con.Q < (2 ** -8 * con.tau_tilde) ** g * con.r ** -g:
                failures.append(f"packing count {m.kind} r*/{div}")
            if g == 1:
                lo = (con.tau_tilde / (3 * 2 ** 12)) ** g * m.v_gamma
                hi = m.v_gamma * (con.tau_tilde / 2) ** g
                if not lo <= con.support_volume <= hi:
                    failures.append(f"support volume r*/{div}")
    record(6, not failures, "; ".join(notes) + ("; failed: " + ", ".join(failures) if failures
                                                else "; volume, packing and support-volume bounds hold"))
    assert not failures


def test_criterion_07_hard_family_validators(record):
    params = ml.RegularityParams(1, 1, 1, 1, 1, alpha=1, C_alpha=12, beta=1, C_beta=2000)
    skew = cg.CostMatrix([[0, 5, 4], [1, 0, 3], [2, 2, 0]])
    outcomes = []
    for kind in ("circle", "sphere"):
        m = ml.EmbeddedManifold(kind, 1.0, 10, 0)
        for name, phi in (("zero-one", ZO), ("3-label", skew)):
            con = hard_params(phi, params, m, 1 / 128, 0)
            sigma = np.where(np.random.default_rng(7).random(con.m) < 0.5, -1, 1)
            fam = build_hard(m, phi, params, 1 / 128, sigma, 0)
            for what in ("margin", "holder", "regularity"):
                rep = validate(fam, what, 100_000, 0)
                outcomes.append((f"{kind}/{name}/{what}", rep.passed))
    failed = [n for n, ok in outcomes if not ok]
    record(7, not failed, f"{len(outcomes) - len(failed)}/{len(outcomes)} validator runs pass"
           + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_criterion_08_concentration(record):
    fam = BenignFamily(ml.EmbeddedManifold("circle", 1.0, 20, 0))
    radius = bench.check_knn_radius(fam, 500, 50, 0.2, 10_000, 0)
    hoeff = bench.check_hoeffding(fam, 500, 100, 0.2, 10_000, 0)
    ok = radius.passed and hoeff.passed
    record(8, ok, f"k-NN radius: {radius.detail}; label average: {hoeff.detail}")
    assert ok


def test_criterion_09_oracles(record):
    risk, _ = BenignFamily(ml.EmbeddedManifold("circle", 1.0, 20, 0)).bayes_risk(ZO)
    risk_ok = abs(risk - (0.5 - 1 / math.pi)) <= 1e-3

    rng = np.random.default_rng(9)
    vote_mismatch = 0
    for _ in range(1000):
        size = int(rng.integers(2, 6))
        labels = rng.integers(1, size + 1, int(rng.integers(1, 40)))
        counts = np.bincount(labels, minlength=size + 1)[1:]
        vote = int(np.argmax(counts)) + 1          # argmax returns the first, i.e. smallest, label
        vote_mismatch += predict(cg.CostMatrix.zero_one(size), estimate_eta(labels, size)) != vote

    fam = BenignFamily(ml.EmbeddedManifold("sphere", 1.0, 20, 0))
    data = fam.sample(5000, 0)
    q = fam.sample(1000, 1).features
    index = NeighbourIndex(data)
    ks = rng.integers(1, 100, 1000)
    nn_mismatch = 0
    for k in np.unique(ks):
        sel = ks == k
        nn_mismatch += int(np.sum(np.any(index.query_batch(q[sel], int(k))[0]
                                         != brute_force_knn(data.features, q[sel], int(k)), axis=1)))
    ok = risk_ok and vote_mismatch == 0 and nn_mismatch == 0
    record(9, ok, f"Bayes risk {risk:.8f} vs {0.5 - 1 / math.pi:.8f}; majority-vote mismatches "
                  f"{vote_mismatch}/1000; accelerated-vs-scan mismatches {nn_mismatch}/1000")
    assert ok


def test_criterion_10_determinism(tmp_path, record):
    cfg = tmp_path / "rate.txt"
    cfg.write_text("manifold = circle\nd = 20\nn_grid = 512,1024,2048\ntrials = 4\n"
                   "m_test = 5000\n")
    blobs = {}
    for tag, threads in (("first", "1"), ("second", "1"), ("threads8", "8")):
        out = tmp_path / f"{tag}.csv"
        assert main(["rate", "--config", str(cfg), "--seed", "17", "--threads", threads,
                     "--out", str(out)]) == 0
        blobs[tag] = out.read_bytes() + (tmp_path / f"{tag}.csv.summary.csv").read_bytes()
    repeat = blobs["first"] == blobs["second"]
    threads = blobs["first"] == blobs["threads8"]
    record(10, repeat and threads, f"rerun identical: {repeat}; 1 vs 8 threads identical: {threads}")
    assert repeat and threads
