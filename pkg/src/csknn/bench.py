"""Rate experiments, slope fitting and the invariant battery behind the CLI."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import csv
import math

import numpy as np

from . import cost_geometry as cg
from . import manifold_lab as ml
from .classifier import Schedule, evaluate, k_schedule, write_eval_rows
from .hard_family import (BenignFamily, build_hard, draw_labels, hard_params, load_distribution,
                          quantile_radius, validate)
from .manifold_lab import RegularityParams
from .neighbours import NeighbourIndex, brute_force_knn
from .projection import ProjectionSpec, distortion, sample_projection, theta_from_epsilon

CLIP_FLOOR = 1e-6
N_SEED_STRIDE = 10 ** 6


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a rate experiment needs; see :func:`config_from_mapping` for the text keys."""

    distribution: object
    phi: cg.CostMatrix
    n_grid: tuple
    trials: int = 20
    schedule: Schedule = Schedule()
    beta: float = 1.0
    mode: str = "exact"
    proj_kind: str = "achlioptas"
    proj_dim: int = 20
    m_test: int = 20000
    seed: int = 0
    xi: float = None
    delta: float = None

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        if len(grid) < 2:
            raise ValueError("n_grid needs at least two sizes")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("n_grid must be strictly increasing")
        if self.mode not in ("exact", "projected"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.trials < 1:
            raise ValueError("trials must be positive")
        object.__setattr__(self, "n_grid", grid)

    @property
    def mode_label(self):
        return "exact" if self.mode == "exact" else f"projected:{self.proj_kind}:{self.proj_dim}"

    @property
    def theory_exponent(self):
        a, g = self.schedule.alpha, self.schedule.gamma
        return -a * (1 + self.beta) / (2 * a + g)


def read_key_values(path):
    """Parse ``key = value`` lines (``#`` comments allowed)."""
    out = {}
    with open(path) as fh:
        for ln in fh:
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            key, sep, value = ln.partition("=")
            if not sep:
                raise ValueError(f"expected 'key = value', got {ln!r}")
            out[key.strip()] = value.strip()
    return out


def distribution_from_mapping(kv):
    if "distribution" in kv:
        return load_distribution(kv["distribution"])
    manifold = ml.EmbeddedManifold(kv.get("manifold", "circle"), float(kv.get("radius", 1.0)),
                                   int(kv.get("d", 20)), int(kv.get("rotation_seed", 0)))
    return BenignFamily(manifold, int(kv.get("m_freq", 1)))


def config_from_mapping(kv):
    """Build an :class:`ExperimentConfig` from string keys.

    Keys: ``distribution`` (spec file) or ``manifold``/``radius``/``d``/
    ``rotation_seed``/``m_freq`` for the benign family; ``cost`` (matrix
    file, default zero-one); ``n_grid`` (comma list); ``trials``; ``k0``;
    ``alpha``; ``gamma`` (default: intrinsic dimension); ``beta``;
    ``mode``; ``proj_kind``; ``proj_dim``; ``m_test``; ``seed``; ``xi``;
    ``delta``.
    """
    dist = distribution_from_mapping(kv)
    phi = cg.read_cost_matrix(kv["cost"]) if "cost" in kv else dist.phi
    gamma = int(kv.get("gamma", dist.manifold.intrinsic_dim))
    xi = float(kv["xi"]) if "xi" in kv else None
    schedule = Schedule(float(kv.get("k0", 1.0)), float(kv.get("alpha", 1.0)), gamma,
                        confidence=xi is not None)
    grid = kv.get("n_grid", "512,1024,2048,4096,8192,16384")
    return ExperimentConfig(
        distribution=dist, phi=phi, n_grid=tuple(int(v) for v in grid.split(",")),
        trials=int(kv.get("trials", 20)), schedule=schedule, beta=float(kv.get("beta", 1.0)),
        mode=kv.get("mode", "exact"), proj_kind=kv.get("proj_kind", "achlioptas"),
        proj_dim=int(kv.get("proj_dim", 20)), m_test=int(kv.get("m_test", 20000)),
        seed=int(kv.get("seed", 0)), xi=xi,
        delta=float(kv["delta"]) if "delta" in kv else None)


def trial_seed(base, n_index, trial):
    return base + N_SEED_STRIDE * n_index + trial


def run_trial(config, n, k, seed):
    """One training draw, index build and test evaluation; returns (excess, misclass).

    The training sample uses stream ``[seed, 0]``, the test sample
    ``[seed, 1]`` and the projection (if any) is seeded with ``seed``, so
    exact and projected runs on the same seed share their data.
    """
    dist = config.distribution
    data = dist.sample(n, [seed, 0])
    proj = None
    if config.mode == "projected":
        proj = sample_projection(ProjectionSpec(config.proj_kind, data.dim, config.proj_dim, seed=seed))
    index = NeighbourIndex(data, proj)
    res = evaluate(index, config.phi, dist, k, config.mode, config.m_test, [seed, 1])
    return res.excess_risk, res.misclass_prob


@dataclass
class RateReport:
    rows: list
    summary: list
    slope: float
    intercept: float
    fit_stderr: float
    slope_stderr: float
    theory_exponent: float
    clipped: bool = False
    notes: list = field(default_factory=list)


def fit_slope(pairs):
    """Least-squares line through ``(ln n, ln value)``.

    Returns
    -------
    slope, intercept, stderr
        ``stderr`` is the usual residual-based standard error of the slope
        (nan with only two points).
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError("need at least two pairs")
    if any(n <= 0 or v <= 0 for n, v in pairs):
        raise ValueError("sizes and values must be positive")
    x = np.log([float(n) for n, _ in pairs])
    y = np.log([float(v) for _, v in pairs])
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0:
        raise ValueError("sizes must not all be equal")
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    intercept = float(ym - slope * xm)
    if len(pairs) == 2:
        return slope, intercept, math.nan
    resid = y - (intercept + slope * x)
    return slope, intercept, float(math.sqrt((resid ** 2).sum() / (len(pairs) - 2) / sxx))


def _mc_slope_stderr(ns, means, errs):
    # delta method: Var(ln mean) ~ (se / mean)^2, slope is linear in ln mean
    x = np.log(np.asarray(ns, dtype=float))
    w = (x - x.mean()) / ((x - x.mean()) ** 2).sum()
    rel = np.asarray(errs) / np.asarray(means)
    return float(math.sqrt((w ** 2 * rel ** 2).sum()))


def run_rate(config, threads=1, trial_fn=None):
    """Run every (n, trial) cell, aggregate per n and fit the log-log slope.

    ``trial_fn(config, n, k, seed) -> (excess, misclass)`` replaces the
    k-NN trial, which lets synthetic inputs exercise the aggregation.
    Results do not depend on ``threads``.
    """
    trial_fn = trial_fn or run_trial
    dist = config.distribution
    tasks = []
    for i, n in enumerate(config.n_grid):
        k = k_schedule(config.schedule, n, config.xi)
        for t in range(config.trials):
            tasks.append((i, n, k, t, trial_seed(config.seed, i, t)))

    def work(task):
        _, n, k, _, s = task
        return trial_fn(config, n, k, s)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(task) for task in tasks]

    rows = []
    for (i, n, k, t, s), (excess, miss) in zip(tasks, results):
        rows.append({"family": dist.family, "gamma": dist.manifold.intrinsic_dim,
                     "d": dist.manifold.ambient_dim, "n": n, "k": k, "mode": config.mode_label,
                     "trial": t, "excess_risk": float(excess), "misclass_prob": float(miss),
                     "seed": s})

    summary, pairs, errs, clipped = [], [], [], False
    for i, n in enumerate(config.n_grid):
        vals = [r["excess_risk"] for r in rows if r["n"] == n]
        # fsum is exactly rounded, so the mean cannot depend on completion order
        mean = math.fsum(vals) / len(vals)
        var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1) if len(vals) > 1 else 0.0
        se = math.sqrt(var / len(vals))
        if mean <= 0:
            mean, clipped = CLIP_FLOOR, True
        pairs.append((n, mean))
        errs.append(se)
        so_far = fit_slope(pairs)[0] if len(pairs) >= 2 else math.nan
        summary.append({"n": n, "mean_excess": mean, "stderr": se,
                        "k": k_schedule(config.schedule, n, config.xi), "slope_so_far": so_far})
    slope, intercept, fit_se = fit_slope(pairs)
    report = RateReport(rows, summary, slope, intercept, fit_se,
                        _mc_slope_stderr(config.n_grid, [m for _, m in pairs], errs),
                        config.theory_exponent, clipped)
    if clipped:
        report.notes.append(f"nonpositive mean excess risk clipped to {CLIP_FLOOR}")
    return report


SUMMARY_COLUMNS = ("n", "mean_excess", "stderr", "k", "slope_so_far")


def write_rate_rows(report, path):
    write_eval_rows(path, report.rows)


def write_rate_summary(report, target):
    """Write the per-n summary CSV to a path or open stream."""
    if not hasattr(target, "write"):
        with open(target, "w", newline="") as fh:
            return write_rate_summary(report, fh)
    w = csv.writer(target, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in report.summary:
        w.writerow([row["n"], repr(row["mean_excess"]), repr(row["stderr"]), row["k"],
                    "nan" if math.isnan(row["slope_so_far"]) else repr(row["slope_so_far"])])


# concentration ----------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    slack: float
    detail: str = ""


def _binomial_bound_check(name, hits, trials, bound, detail):
    b = min(bound, 1.0)
    sigma = math.sqrt(b * (1 - b) / trials)
    freq = hits / trials
    slack = bound + 3 * sigma - freq
    return CheckResult(name, bool(slack >= 0), slack,
                       f"{detail} frequency={freq:.6g} bound={bound:.6g} sigma={sigma:.3g}")


def _query_point(dist, seed):
    return dist.sample_marginal(1, np.random.default_rng([seed, 99]))[0]


def check_knn_radius(dist, n, k, p, trials, seed, batch=1000):
    """Frequency with which the k-NN radius exceeds the p-quantile radius.

    Compared with ``exp(-k xi^2 / 2)`` where ``k = (1 - xi) n p``.
    """
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    xi = 1 - k / (n * p)
    if xi < 0:
        raise ValueError(f"k = {k} exceeds n p = {n * p}")
    bound = math.exp(-k * xi * xi / 2)
    q = _query_point(dist, seed)
    r_p = quantile_radius(dist, dist.manifold.embed(q), p)
    rng = np.random.default_rng([seed, 0])
    hits = 0
    for lo in range(0, trials, batch):
        t = min(batch, trials - lo)
        pts = dist.sample_marginal(t * n, rng).reshape(t, n, -1)
        close = (np.linalg.norm(pts - q, axis=2) <= r_p).sum(axis=1)
        hits += int((close < k).sum())
    return _binomial_bound_check("knn_radius", hits, trials, bound,
                                 f"n={n} k={k} p={p} xi={xi:.4g} r_p={r_p:.6g}")


def check_hoeffding(dist, n, k, delta, trials, seed, batch=500):
    """Frequency of ``||eta_hat - mean neighbour eta||_inf >= delta`` against ``2 L exp(-2 k delta^2)``."""
    if not 1 <= k <= n:
        raise ValueError(f"k = {k} outside 1..{n}")
    L = dist.num_labels
    bound = 2 * L * math.exp(-2 * k * delta * delta)
    q = _query_point(dist, seed)
    rng = np.random.default_rng([seed, 1])
    hits = 0
    for lo in range(0, trials, batch):
        t = min(batch, trials - lo)
        pts = dist.sample_marginal(t * n, rng)
        eta = dist.conditional_canonical(pts).reshape(t, n, L)
        lab = draw_labels(eta.reshape(t * n, L), rng).reshape(t, n) - 1
        d = np.linalg.norm(pts.reshape(t, n, -1) - q, axis=2)
        nn = np.argpartition(d, k - 1, axis=1)[:, :k]
        onehot = np.eye(L)[np.take_along_axis(lab, nn, axis=1)]
        eta_hat = onehot.mean(axis=1)
        eta_bar = np.take_along_axis(eta, nn[:, :, None], axis=1).mean(axis=1)
        hits += int((np.abs(eta_hat - eta_bar).max(axis=1) >= delta).sum())
    return _binomial_bound_check("hoeffding", hits, trials, bound, f"k={k} delta={delta} L={L}")


def verify_concentration(dist, n, k, p, delta_hoeffding, trials, seed):
    return [check_knn_radius(dist, n, k, p, trials, seed),
            check_hoeffding(dist, n, k, delta_hoeffding, trials, seed)]


# invariant battery ------------------------------------------------------

def random_reasonable_matrix(rng, size, high=10.0):
    """Costs in [0, high] with every diagonal entry below the rest of its column."""
    a = high - rng.uniform(0.0, high, (size, size))       # off-diagonal in (0, high]
    for j in range(size):
        off = np.delete(a[:, j], j)
        a[j, j] = rng.uniform(0.0, 1.0) * off.min()
    return cg.CostMatrix(a)


def margin_sweep(matrices, grid=50, c_scale=1.0):
    """Smallest slack of the linear margin growth around the switching point.

    For each matrix and each delta on a grid inside ``(0, t)`` checks
    ``min(margin(kappa - delta), margin(kappa + delta)) >= c delta - 1e-9``
    and that the optimal sets on either side are disjoint.  Returns the
    worst slack (negative means failure) and the number of overlaps.
    """
    worst, overlaps = math.inf, 0
    for phi in matrices:
        cal = cg.calibrate(phi)
        size = phi.num_labels
        for i in range(1, grid + 1):
            d = cal.t * i / (grid + 1)
            lo, hi = cg.two_point(cal.kappa - d, size), cg.two_point(cal.kappa + d, size)
            m = min(cg.margin(phi, lo), cg.margin(phi, hi))
            worst = min(worst, m - (c_scale * cal.c * d - 1e-9))
            if cg.optimal_labels(phi, lo) & cg.optimal_labels(phi, hi):
                overlaps += 1
    return worst, overlaps


def _check(name, passed, slack, detail=""):
    return CheckResult(name, bool(passed), float(slack), detail)


def _cost_checks(rng, c_scale):
    mats = [random_reasonable_matrix(rng, int(rng.integers(2, 6))) for _ in range(200)]
    worst, overlaps = margin_sweep(mats, c_scale=c_scale)
    return [_check("cost.margin_sweep", worst >= 0 and overlaps == 0, worst,
                   f"200 matrices, overlaps={overlaps}")]


def _projection_checks(seed):
    m = ml.EmbeddedManifold("circle", 1.0, 200, seed)
    pts = ml.sample_uniform(m, 200, [seed, 3])
    medians = []
    for h in (8, 16, 32, 64):
        eps = [distortion(sample_projection(ProjectionSpec("achlioptas", 200, h, seed=s)), pts).epsilon
               for s in range(10)]
        medians.append(float(np.median(eps)))
    drops = np.diff(medians)
    return [_check("projection.jl_trend", np.all(drops < 0), -float(drops.max()),
                   "median eps over h=8,16,32,64: " + ", ".join(f"{v:.3f}" for v in medians))]


def _neighbour_checks(seed):
    out = []
    rng = np.random.default_rng([seed, 4])
    dist = BenignFamily(ml.EmbeddedManifold("circle", 1.0, 20, seed))
    data = dist.sample(2000, [seed, 5])
    index = NeighbourIndex(data)
    q = dist.sample(200, [seed, 6]).features
    k = int(rng.integers(1, 60))
    same = np.array_equal(index.query_batch(q, k)[0], brute_force_knn(data.features, q, k))
    out.append(_check("neighbours.oracle_equivalence", same, 0.0, f"200 queries, k={k}"))

    # projected radii against the distortion of the whole point set
    m = ml.EmbeddedManifold("circle", 1.0, 200, seed)
    dist = BenignFamily(m)
    pts = dist.sample(500, [seed, 7])
    train = type(pts)(pts.features[200:], pts.labels[200:], 2)
    params = dist.regularity_params()
    c_tilde = ml.doubling_constant(params, m)
    worst_theta, worst_omega = math.inf, math.inf
    for s in range(5):
        proj = sample_projection(ProjectionSpec("achlioptas", 200, 32, seed=s))
        eps = distortion(proj, pts.features).epsilon
        cap = theta_from_epsilon(eps) if eps < 1 else math.inf
        idx = NeighbourIndex(train, proj)
        for k in (1, 5, 10):
            _, r0 = idx.query_batch(pts.features[:200], k, "exact")
            _, r1 = idx.query_batch(pts.features[:200], k, "projected")
            theta = r1 / r0
            worst_theta = min(worst_theta, float((cap + 1e-9 - theta).min()))
            for x, a, b, th in zip(pts.features[:200], r0, r1, theta):
                omega = dist.ball_measure(x, b) / dist.ball_measure(x, a)
                worst_omega = min(worst_omega, c_tilde * th ** m.intrinsic_dim + 1e-9 - omega)
    out.append(_check("neighbours.theta_bound", worst_theta >= 0, worst_theta))
    out.append(_check("neighbours.omega_bound", worst_omega >= 0, worst_omega))
    return out


def _geometry_checks(seed):
    out = []
    for kind in ("circle", "sphere"):
        m = ml.EmbeddedManifold(kind, 1.0, 10, seed)
        rows = ml.check_volume_bounds(m, np.linspace(0, m.reach / 8, 51)[1:] * (1 - 1e-12))
        slack = min(min(r.geodesic - r.lower, r.euclidean - r.geodesic, r.upper - r.euclidean)
                    for r in rows)
        out.append(_check(f"geometry.volume_bounds.{kind}", all(r.passed for r in rows), slack))
        base = np.zeros(m.intrinsic_dim + 1)
        base[0] = 1.0
        other = base.copy()
        other[:2] = [math.cos(0.12), math.sin(0.12)]
        res = ml.check_intersection_bound(m, m.embed(base), m.embed(other), 0.1, 0.05,
                                          20_000, seed)
        out.append(_check(f"geometry.intersection.{kind}", res.passed,
                          res.volume - res.bound + 3 * res.sigma))

    params = RegularityParams(1, 1, 1, 1, 1, alpha=1, C_alpha=12, beta=1, C_beta=2000)
    for kind in ("circle", "sphere"):
        m = ml.EmbeddedManifold(kind, 1.0, 10, seed)
        tt = min(m.reach, 1.0)
        r_star = tt / 16
        g = m.intrinsic_dim
        worst = math.inf
        for div in (2, 4, 8):
            con = hard_params(cg.CostMatrix.zero_one(), params, m, r_star / div, seed)
            worst = min(worst, con.Q - (2 ** -8 * tt) ** g * (r_star / div) ** -g)
            if g == 1:
                lo = (tt / (3 * 2 ** 12)) ** g * m.v_gamma
                hi = m.v_gamma * (tt / 2) ** g
                out.append(_check(f"geometry.support_volume.r*/{div}",
                                  lo <= con.support_volume <= hi,
                                  min(con.support_volume - lo, hi - con.support_volume)))
        out.append(_check(f"geometry.packing_count.{kind}", worst >= 0, worst))

    m = ml.EmbeddedManifold("circle", 1.0, 10, seed)
    pts = ml.sample_uniform(m, 2000, [seed, 8])
    full = BenignFamily(m).regularity_params()
    worst = math.inf
    for r in np.geomspace(0.01, min(full.r0, m.reach / 2), 8):
        bound = ml.covering_bound_regular(full, m, m.volume, r)
        worst = min(worst, bound - ml.covering_number(pts, r))
    out.append(_check("geometry.covering_ceiling", worst >= 0, worst))
    return out


def _hard_checks(seed, budget):
    out = []
    params = RegularityParams(1, 1, 1, 1, 1, alpha=1, C_alpha=12, beta=1, C_beta=2000)
    for kind in ("circle", "sphere"):
        m = ml.EmbeddedManifold(kind, 1.0, 10, seed)
        con = hard_params(cg.CostMatrix.zero_one(), params, m, 1 / 128, seed)
        sigma = np.where(np.random.default_rng(seed).random(con.m) < 0.5, -1, 1)
        dist = build_hard(m, cg.CostMatrix.zero_one(), params, 1 / 128, sigma, seed)
        for what in ("margin", "holder", "regularity"):
            rep = validate(dist, what, budget, seed)
            out.append(_check(f"hard.{kind}.{what}", rep.passed,
                              rep.threshold - rep.statistic if what != "regularity"
                              else rep.statistic - rep.threshold))
    return out


def verify_all(seed=0, c_scale=1.0, budget=20_000, trials=2000):
    """Run the invariant battery; returns the list of :class:`CheckResult`.

    ``c_scale`` multiplies the margin-growth constant, for fault injection.
    """
    rng = np.random.default_rng(seed)
    checks = []
    checks += _cost_checks(rng, c_scale)
    checks += _projection_checks(seed)
    checks += _neighbour_checks(seed)
    checks += _geometry_checks(seed)
    checks += _hard_checks(seed, budget)
    benign = BenignFamily(ml.EmbeddedManifold("circle", 1.0, 20, seed))
    checks.append(check_knn_radius(benign, 500, 50, 0.2, trials, seed))
    checks.append(check_hoeffding(benign, 500, 100, 0.2, trials, seed))
    return checks

