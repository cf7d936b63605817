"""Synthetic labelled distributions on embedded manifolds.

Two families are provided.  The benign family has a uniform marginal and a
smooth sinusoidal conditional with closed-form smoothness and margin
constants; it is what the rate experiments run on.  The hard family is the
lower-bound construction: a uniform marginal on small disjoint caps around
an r-separated set of centres, with the conditional pushed a distance delta
either side of the switching point of the cost matrix on each cap.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import integrate
from scipy.spatial import cKDTree

from .cost_geometry import (CostMatrix, batch_margin, calibrate, expected_costs,
                            is_reasonable, margin, two_point, TIE_RTOL)
from .manifold_lab import (EmbeddedManifold, RegularityParams, chord_to_geodesic,
                           geodesic_ball_volume, sample_canonical, sample_geodesic_ball,
                           separated_net, _arc_overlap, _central_angle)
from .neighbours import Dataset

CENTER_CANDIDATES = 100_000
SUPPORT_TOL = 1e-9
CELL_MC = 2000


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def draw_labels(eta, rng):
    """One label per row of ``eta`` (1-based), by inverting the cumulative sums."""
    u = rng.random(len(eta))
    cum = np.cumsum(eta, axis=1)
    lab = 1 + (cum < u[:, None]).sum(axis=1)
    return np.minimum(lab, eta.shape[1])


def best_labels(phi, etas):
    """Smallest cost-minimising label for each row of ``etas``."""
    costs = expected_costs(phi, etas)
    tol = TIE_RTOL * (1.0 + np.abs(costs).max(axis=1, keepdims=True))
    return 1 + np.argmax(costs - costs.min(axis=1, keepdims=True) <= tol, axis=1)


class SyntheticDistribution:
    """Common interface: marginal sampling, conditional, ball masses, oracles."""

    family = "abstract"

    def __init__(self, manifold, phi):
        self.manifold = manifold
        self.phi = phi

    @property
    def num_labels(self):
        return self.phi.num_labels

    def sample_marginal(self, count, rng):
        """Canonical coordinates of ``count`` draws from the marginal."""
        raise NotImplementedError

    def conditional_canonical(self, c):
        raise NotImplementedError

    def conditional(self, x):
        """Conditional label probabilities at ambient points, shape (m, L)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.conditional_canonical(self.manifold.canonical(x))

    def sample(self, count, seed):
        rng = _rng(seed)
        c = self.sample_marginal(count, rng)
        eta = self.conditional_canonical(c)
        labels = draw_labels(eta, rng) if count else np.empty(0, dtype=np.int64)
        return Dataset(self.manifold.embed(c).reshape(count, self.manifold.ambient_dim),
                       labels, self.num_labels)

    def ball_measure(self, x, r):
        raise NotImplementedError

    def bayes_risk(self, phi, budget=200_000, seed=0):
        """Monte-Carlo Bayes risk and its standard error (fallback for custom families)."""
        c = self.sample_marginal(budget, _rng(seed))
        cost = expected_costs(phi, self.conditional_canonical(c)).min(axis=1)
        return float(cost.mean()), float(cost.std(ddof=1) / math.sqrt(budget))

    def in_support(self, c):
        return np.ones(len(c), dtype=bool)

    def support_local_fraction(self, center, r, count, rng):
        """Fraction of surface volume of ``B_r(center)`` lying in the support."""
        return 1.0, count


class BenignFamily(SyntheticDistribution):
    """Uniform marginal with a sinusoidal two-label conditional.

    On the circle ``eta_1 = 1/2 + sin(m_freq * angle) / 2``; on the sphere
    ``eta_1 = 1/2 + z / (2 R)`` where z is the height along the third
    canonical axis, so that the margin ``|2 eta_1 - 1|`` is uniform.
    """

    family = "benign"

    def __init__(self, manifold, m_freq=1, phi=None):
        super().__init__(manifold, phi if phi is not None else CostMatrix.zero_one(2))
        if m_freq < 1 or int(m_freq) != m_freq:
            raise ValueError("m_freq must be a positive integer")
        if manifold.intrinsic_dim == 2 and m_freq != 1:
            raise ValueError("the sphere family is only defined for m_freq = 1")
        self.m_freq = int(m_freq)

    def _signal(self, c):
        R = self.manifold.radius
        if self.manifold.intrinsic_dim == 1:
            return np.sin(self.m_freq * np.arctan2(c[:, 1], c[:, 0]))
        return np.clip(c[:, 2] / R, -1.0, 1.0)

    def conditional_canonical(self, c):
        c = np.atleast_2d(c)
        eta = np.zeros((len(c), self.num_labels))
        s = self._signal(c)
        eta[:, 0] = 0.5 + 0.5 * s
        eta[:, 1] = 0.5 - 0.5 * s
        return eta

    def sample_marginal(self, count, rng):
        return sample_canonical(self.manifold, count, rng)

    def ball_measure(self, x, r):
        R = self.manifold.radius
        if r <= 0:
            return 0.0
        if self.manifold.intrinsic_dim == 1:
            return min(1.0, (2.0 / math.pi) * math.asin(min(r, 2 * R) / (2 * R)))
        return min(1.0, r * r / (4.0 * R * R))

    def regularity_params(self):
        m = self.manifold
        nu = 1.0 / m.volume
        lip = 1.0 / (2 * m.radius) if self.m_freq == 1 else self.m_freq * math.pi / (4 * m.radius)
        return RegularityParams(c0=1.0, r0=m.reach / 8, nu_min=nu, nu_max=nu, zeta_max=1.0,
                                alpha=1.0, C_alpha=lip, beta=1.0, C_beta=1.0)

    def bayes_risk(self, phi, budget=None, seed=None):
        """Exact one-dimensional quadrature of the pointwise minimal expected cost."""
        if phi.num_labels != self.num_labels:
            raise ValueError("cost matrix size does not match the family")
        # the signal s in [-1, 1] drives everything; kinks where two costs cross
        a = phi.entries
        kinks = {-1.0, 1.0}
        for i in range(len(a)):
            for j in range(i + 1, len(a)):
                # cost_i(q) with eta = (q, 1 - q): a[i,1] + q (a[i,0] - a[i,1])
                di = (a[i, 0] - a[i, 1]) - (a[j, 0] - a[j, 1])
                if di != 0:
                    q = (a[j, 1] - a[i, 1]) / di
                    if 0 < q < 1:
                        kinks.add(2 * q - 1)
        kinks = sorted(kinks)

        def min_cost(s):
            return float(np.min(a[:, 0] * (0.5 + 0.5 * s) + a[:, 1] * (0.5 - 0.5 * s)))

        if self.manifold.intrinsic_dim == 2:
            # height is uniform on [-R, R], so s is uniform on [-1, 1]
            total = sum(integrate.quad(min_cost, lo, hi, epsabs=1e-13)[0]
                        for lo, hi in zip(kinks[:-1], kinks[1:]))
            return total / 2.0, 0.0
        m = self.m_freq
        cuts = {0.0, 2 * math.pi}
        for s in kinks:
            base = math.asin(s)
            for b in (base, math.pi - base):
                for p in range(m + 1):
                    t = (b + 2 * math.pi * p) / m
                    if 0 < t < 2 * math.pi:
                        cuts.add(t)
        cuts = sorted(cuts)
        total = sum(integrate.quad(lambda t: min_cost(math.sin(m * t)), lo, hi, epsabs=1e-13)[0]
                    for lo, hi in zip(cuts[:-1], cuts[1:]))
        return total / (2 * math.pi), 0.0

    def to_text(self):
        return (f"family benign\nmanifold {self.manifold.to_text().strip()}\n"
                f"m_freq {self.m_freq}\nphi {_phi_line(self.phi)}\n")


@dataclass(frozen=True, eq=False)
class HardConstruction:
    """Geometry and derived constants of the lower-bound family at scale ``r``.

    ``centers`` are canonical coordinates; cells are closed geodesic balls
    of radius r/6 about them, pairwise disjoint since centres are more than
    r apart.
    """

    r: float
    r_star: float
    tau_tilde: float
    centers: np.ndarray
    delta: float
    m: int
    u: float
    v: float
    nu_star: float
    support_volume: float
    calibration: object = field(repr=False)

    @property
    def Q(self):
        return len(self.centers)


def _scale_limits(manifold):
    tau_tilde = min(manifold.reach, 1.0)
    return tau_tilde, tau_tilde / 16.0


def hard_params(phi, params, manifold, r, seed=0):
    """Centres and the perturbation size, cell count and mass bounds at scale ``r``."""
    if not is_reasonable(phi):
        raise ValueError("cost matrix is not reasonable")
    tau_tilde, r_star = _scale_limits(manifold)
    if not 0 < r < r_star:
        raise ValueError(f"r = {r} outside (0, {r_star})")
    cal = calibrate(phi)
    g = manifold.intrinsic_dim
    vg = manifold.v_gamma

    rng = np.random.default_rng(seed)
    pole = np.zeros(g + 1)
    pole[0] = manifold.radius
    candidates = sample_geodesic_ball(manifold, pole, r_star, CENTER_CANDIDATES, rng)
    centers = candidates[separated_net(candidates, r)]
    centers.setflags(write=False)

    support_volume = len(centers) * geodesic_ball_volume(manifold, r / 6)
    nu = 1.0 / support_volume
    delta = min(cal.t / 2, params.C_alpha / 12 * r ** params.alpha)
    v = nu * 4.0 ** -g * vg * (r / 6) ** g
    u = nu * 4.0 ** g * vg * (r / 3) ** g
    budget = params.C_beta * (cal.c * delta) ** params.beta
    m = min(len(centers), int(math.floor(budget / u)))
    assert m * u <= budget * (1 + 1e-12), "cell count exceeds the margin budget"
    return HardConstruction(r=r, r_star=r_star, tau_tilde=tau_tilde, centers=centers,
                            delta=delta, m=m, u=u, v=v, nu_star=nu,
                            support_volume=support_volume, calibration=cal)


def bump(t):
    """1 on [0, 1/3], linear down to 0 on [1/3, 2/3], 0 beyond."""
    return np.clip(2.0 - 3.0 * np.asarray(t, dtype=float), 0.0, 1.0)


class HardFamily(SyntheticDistribution):
    family = "hard"

    def __init__(self, manifold, phi, params, construction, sigma, seed=0):
        super().__init__(manifold, phi)
        self.params = params
        self.construction = construction
        self.seed = seed
        sig = np.asarray(sigma, dtype=float).ravel()
        if sig.size != construction.m:
            raise ValueError(f"sigma has {sig.size} entries, the construction has {construction.m} cells")
        if not np.all(np.isin(sig, (-1.0, 0.0, 1.0))):
            raise ValueError("sigma entries must be -1, 0 or +1")
        full = np.zeros(construction.Q)
        full[:construction.m] = sig
        full.setflags(write=False)
        self.sigma = full
        self._tree = cKDTree(construction.centers)
        self._cell_points = None

    @property
    def cell_radius(self):
        return self.construction.r / 6

    def _nearest_cell(self, c):
        _, j = self._tree.query(c)
        ang = _central_angle(c, self.construction.centers[j])
        return j, self.manifold.radius * ang

    def in_support(self, c):
        _, gd = self._nearest_cell(np.atleast_2d(c))
        return gd <= self.cell_radius + SUPPORT_TOL

    def bump_conditional(self, c):
        """The perturbed conditional evaluated by the bump formula at any canonical point."""
        c = np.atleast_2d(c)
        con = self.construction
        dist = np.sqrt(((c[:, None, :] - con.centers[None, :, :]) ** 2).sum(axis=-1))
        shift = (bump(2.0 / con.r * dist) * self.sigma).sum(axis=1)
        p = con.calibration.kappa + con.delta * shift
        eta = np.zeros((len(c), self.num_labels))
        eta[:, 0] = 1.0 - p
        eta[:, 1] = p
        return eta

    def conditional_canonical(self, c):
        c = np.atleast_2d(c)
        if not np.all(self.in_support(c)):
            raise ValueError("point lies outside the support")
        # inside a cell only its own bump is active and equals 1
        j, _ = self._nearest_cell(c)
        p = self.construction.calibration.kappa + self.construction.delta * self.sigma[j]
        eta = np.zeros((len(c), self.num_labels))
        eta[:, 0] = 1.0 - p
        eta[:, 1] = p
        return eta

    def sample_marginal(self, count, rng):
        # cells carry equal mass: pick one uniformly, then a uniform point in it
        con = self.construction
        cell = rng.integers(0, con.Q, count)
        out = np.empty((count, self.manifold.intrinsic_dim + 1))
        counts = np.bincount(cell, minlength=con.Q)
        for j in np.flatnonzero(counts):
            out[cell == j] = sample_geodesic_ball(self.manifold, con.centers[j],
                                                  self.cell_radius, counts[j], rng)
        return out

    def _cell_samples(self):
        if self._cell_points is None:
            rng = np.random.default_rng([self.seed, 7])
            self._cell_points = [sample_geodesic_ball(self.manifold, w, self.cell_radius, CELL_MC, rng)
                                 for w in self.construction.centers]
        return self._cell_points

    def ball_measure_estimate(self, x, r):
        """Marginal mass of the open Euclidean ball ``B_r(x)`` with its standard error.

        Exact (arc arithmetic) on the circle; on the sphere a fixed set of
        uniform points per cell is counted, so the estimate is monotone in r.
        """
        if r <= 0:
            return 0.0, 0.0
        c = self.manifold.canonical(np.asarray(x, dtype=float))
        con = self.construction
        R = self.manifold.radius
        share = 1.0 / con.Q
        if self.manifold.intrinsic_dim == 1:
            half = 2 * math.asin(min(r, 2 * R) / (2 * R)) if r < 2 * R else math.pi
            gaps = _central_angle(con.centers, c[None, :])
            total = sum(_arc_overlap(gp, half, self.cell_radius / R) for gp in gaps)
            return min(1.0, total / (2 * self.cell_radius / R) * share), 0.0
        dist = np.linalg.norm(con.centers - c, axis=1)
        mass, var = 0.0, 0.0
        for j in np.flatnonzero(dist < r + self.cell_radius):
            if dist[j] + self.cell_radius < r:
                mass += share
                continue
            pts = self._cell_samples()[j]
            f = float(np.mean(np.linalg.norm(pts - c, axis=1) < r))
            mass += share * f
            var += share ** 2 * f * (1 - f) / len(pts)
        return min(1.0, mass), math.sqrt(var)

    def ball_measure(self, x, r):
        return self.ball_measure_estimate(x, r)[0]

    def margin_zeta_max(self):
        # half the margin at the switching point; capped by the largest
        # possible finite margin when every label ties there
        z = margin(self.phi, two_point(self.construction.calibration.kappa, self.num_labels))
        return z / 2 if math.isfinite(z) else float(self.phi.entries.max())

    def regularity_params(self):
        g = self.manifold.intrinsic_dim
        con = self.construction
        p = self.params
        return RegularityParams(c0=2.0 ** (-14 * g), r0=min(con.r_star, self.manifold.reach / 8),
                                nu_min=con.nu_star, nu_max=con.nu_star,
                                zeta_max=self.margin_zeta_max(), alpha=p.alpha,
                                C_alpha=p.C_alpha, beta=p.beta, C_beta=p.C_beta)

    def bayes_risk(self, phi, budget=None, seed=None):
        """Exact: the conditional is constant on equal-mass cells."""
        con = self.construction
        p = con.calibration.kappa + con.delta * self.sigma
        eta = np.zeros((con.Q, self.num_labels))
        eta[:, 0] = 1.0 - p
        eta[:, 1] = p
        return float(expected_costs(phi, eta).min(axis=1).mean()), 0.0

    def support_local_fraction(self, center, r, count, rng):
        # uniform surface points of the Euclidean ball, counted inside the support
        pts = sample_geodesic_ball(self.manifold, center, chord_to_geodesic(self.manifold, r), count, rng)
        inside = np.linalg.norm(pts - center, axis=1) < r
        pts = pts[inside]
        return float(np.mean(self.in_support(pts))), len(pts)

    def sigma_text(self):
        return "".join({1.0: "+", -1.0: "-", 0.0: "0"}[s] for s in self.sigma[:self.construction.m])

    def to_text(self):
        p = self.params
        fields = " ".join(f"{k}={getattr(p, k)!r}" for k in RegularityParams.__dataclass_fields__)
        return (f"family hard\nmanifold {self.manifold.to_text().strip()}\n"
                f"phi {_phi_line(self.phi)}\nparams {fields}\nr {self.construction.r!r}\n"
                f"sigma {self.sigma_text() or '.'}\nseed {self.seed}\n")


def build_hard(manifold, phi, params, r, sigma, seed=0):
    """Lower-bound family at scale ``r`` with cell signs ``sigma`` (length m(r))."""
    con = hard_params(phi, params, manifold, r, seed)
    return HardFamily(manifold, phi, params, con, sigma, seed)


def _phi_line(phi):
    return " ".join([str(phi.num_labels)] + [repr(float(v)) for v in phi.entries.ravel()])


def _parse_phi(text):
    parts = text.split()
    size = int(parts[0])
    return CostMatrix(np.array([float(v) for v in parts[1:]]).reshape(size, size))


def distribution_from_text(text):
    """Rebuild a distribution from :meth:`to_text` output."""
    kv = {}
    for ln in text.splitlines():
        ln = ln.split("#", 1)[0].strip()
        if ln:
            key, _, rest = ln.partition(" ")
            kv[key] = rest.strip()
    manifold = EmbeddedManifold.from_text(kv["manifold"])
    phi = _parse_phi(kv["phi"]) if "phi" in kv else None
    if kv.get("family") == "benign":
        return BenignFamily(manifold, int(kv.get("m_freq", 1)), phi)
    if kv.get("family") == "hard":
        vals = dict(item.split("=") for item in kv["params"].split())
        params = RegularityParams(**{k: float(v) for k, v in vals.items()})
        sig = kv.get("sigma", ".")
        sigma = [] if sig == "." else [{"+": 1, "-": -1, "0": 0}[ch] for ch in sig]
        return build_hard(manifold, phi, params, float(kv["r"]), sigma, int(kv.get("seed", 0)))
    raise ValueError(f"unknown family {kv.get('family')!r}")


def load_distribution(path):
    with open(path) as fh:
        return distribution_from_text(fh.read())


def save_distribution(dist, path):
    with open(path, "w") as fh:
        fh.write(dist.to_text())


# module-level operations -------------------------------------------------

def conditional_eval(dist, x):
    return dist.conditional(x)


def sample(dist, count, seed):
    return dist.sample(count, seed)


def ball_measure(dist, x, r):
    return dist.ball_measure(x, r)


def quantile_radius(dist, x, p, tol=1e-10):
    """Smallest radius whose Euclidean ball around ``x`` carries mass at least ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if p == 0.0:
        return 0.0
    lo, hi = 0.0, 2.0 * dist.manifold.radius * (1 + 1e-12)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if dist.ball_measure(x, mid) >= p:
            hi = mid
        else:
            lo = mid
    return hi


def bayes_oracle(dist, phi):
    """Bayes risk and the Bayes classifier ``x -> min optimal label``."""
    risk, _ = dist.bayes_risk(phi)

    def classifier(x):
        return best_labels(phi, dist.conditional(x))

    return risk, classifier


@dataclass(frozen=True)
class ValidationReport:
    kind: str
    passed: bool
    statistic: float
    threshold: float
    detail: dict


def validate(dist, kind, budget=100_000, seed=0):
    """Monte-Carlo check of one distribution-class condition.

    ``margin``: empirical mass of ``{margin <= zeta}`` on a 50-point grid
    against ``C_beta zeta^beta`` plus three binomial standard errors.
    ``holder``: largest ``||eta(x0) - eta(x1)||_inf / rho^alpha`` over random
    and nearest-neighbour pairs, against ``C_alpha``.
    ``regularity``: smallest estimated support fraction of small balls
    around support points, against ``c0`` minus three standard errors.
    """
    if budget < 1000:
        raise ValueError("budget must be at least 1000")
    params = dist.regularity_params()
    rng = np.random.default_rng(seed)
    if kind == "margin":
        return _validate_margin(dist, params, budget, rng)
    if kind == "holder":
        return _validate_holder(dist, params, budget, rng)
    if kind == "regularity":
        return _validate_regularity(dist, params, budget, rng)
    raise ValueError(f"unknown validation kind {kind!r}")


def _validate_margin(dist, p, budget, rng):
    c = dist.sample_marginal(budget, rng)
    gaps = batch_margin(dist.phi, dist.conditional_canonical(c))
    zeta = p.zeta_max * np.arange(1, 51) / 50
    mass = (gaps[None, :] <= zeta[:, None]).mean(axis=1)
    bound = p.C_beta * zeta ** p.beta
    capped = np.minimum(bound, 1.0)
    slack = 3.0 * np.sqrt(capped * (1 - capped) / budget)
    excess = mass - (bound + slack)
    worst = int(np.argmax(excess))
    return ValidationReport("margin", bool(np.all(excess <= 0)), float(mass[worst]),
                            float(bound[worst] + slack[worst]),
                            {"zeta": float(zeta[worst]),
                             "min_C_beta": float(np.max(mass / zeta ** p.beta))})


def _validate_holder(dist, p, budget, rng):
    c = dist.sample_marginal(budget, rng)
    eta = dist.conditional_canonical(c)
    # random pairs plus each point with its nearest sampled neighbour
    perm = rng.permutation(budget)
    _, nn = cKDTree(c).query(c, k=2)
    left = np.concatenate([np.arange(budget), np.arange(budget)])
    right = np.concatenate([perm, nn[:, 1]])
    rho = np.linalg.norm(c[left] - c[right], axis=1)
    keep = rho > 0
    diff = np.abs(eta[left] - eta[right]).max(axis=1)
    ratio = np.zeros_like(rho)
    ratio[keep] = diff[keep] / rho[keep] ** p.alpha
    k = int(np.argmax(ratio))
    pair = (dist.manifold.embed(c[left[k]]), dist.manifold.embed(c[right[k]]))
    # the benign constants are sharp, so allow for round-off on close pairs
    return ValidationReport("holder", bool(ratio[k] <= p.C_alpha * (1 + 1e-9)), float(ratio[k]),
                            p.C_alpha, {"pair": pair})


def _validate_regularity(dist, p, budget, rng, centres=100):
    per = max(10, budget // centres)
    c = dist.sample_marginal(centres, rng)
    radii = p.r0 * rng.uniform(0.0, 1.0, centres)
    worst, worst_used, worst_r = math.inf, 1, 0.0
    for x, r in zip(c, radii):
        frac, used = dist.support_local_fraction(x, r, per, rng)
        if frac < worst:
            worst, worst_used, worst_r = frac, max(used, 1), float(r)
    # binomial spread of the estimate if the true fraction sat exactly at c0
    sd = math.sqrt(p.c0 * (1 - p.c0) / worst_used)
    return ValidationReport("regularity", bool(worst >= p.c0 - 3 * sd), worst,
                            p.c0 - 3 * sd, {"radius": worst_r, "samples": worst_used})
