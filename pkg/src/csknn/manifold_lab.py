"""Circles and spheres embedded in R^d, their volumes, nets and covering numbers.

Each manifold lives in the first ``gamma + 1`` canonical coordinates and is
carried into R^d by a seeded random rotation.  Its reach equals its radius,
so every volume and distance used by the bounds below is closed-form.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.spatial.distance import pdist

SURFACE_TOL = 1e-8
KINDS = {"circle": 1, "sphere": 2}


def random_rotation(dim, seed):
    """Orthogonal matrix from the QR factorisation of a seeded Gaussian matrix."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class EmbeddedManifold:
    """Circle (gamma = 1) or sphere (gamma = 2) of the given radius inside R^ambient_dim."""

    kind: str
    radius: float
    ambient_dim: int
    rotation_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown manifold kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.ambient_dim < KINDS[self.kind] + 1:
            raise ValueError(f"a {self.kind} needs ambient dimension at least {KINDS[self.kind] + 1}")
        rot = random_rotation(self.ambient_dim, self.rotation_seed)
        frame = np.ascontiguousarray(rot[:, :KINDS[self.kind] + 1])
        frame.setflags(write=False)
        object.__setattr__(self, "frame", frame)

    @property
    def intrinsic_dim(self):
        return KINDS[self.kind]

    @property
    def reach(self):
        return self.radius

    @property
    def v_gamma(self):
        """Volume of the unit ball of the intrinsic dimension."""
        return 2.0 if self.intrinsic_dim == 1 else math.pi

    @property
    def volume(self):
        r = self.radius
        return 2.0 * math.pi * r if self.intrinsic_dim == 1 else 4.0 * math.pi * r * r

    def embed(self, canonical):
        return np.asarray(canonical, dtype=float) @ self.frame.T

    def canonical(self, x):
        """Canonical coordinates of surface points; raises for off-surface input."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.ambient_dim:
            raise ValueError(f"point has dimension {x.shape[-1]}, manifold lives in {self.ambient_dim}")
        c = x @ self.frame
        tol = SURFACE_TOL * max(1.0, self.radius)
        off = np.linalg.norm(x - c @ self.frame.T, axis=-1)
        bad = (np.abs(np.linalg.norm(c, axis=-1) - self.radius) > tol) | (off > tol)
        if np.any(bad):
            raise ValueError("point is not on the manifold surface")
        return c

    def to_text(self):
        return f"{self.kind} {self.radius!r} {self.intrinsic_dim} {self.ambient_dim} {self.rotation_seed}\n"

    @classmethod
    def from_text(cls, text):
        kind, radius, gamma, dim, seed = text.split()
        out = cls(kind, float(radius), int(dim), int(seed))
        if out.intrinsic_dim != int(gamma):
            raise ValueError(f"{kind} has intrinsic dimension {out.intrinsic_dim}, not {gamma}")
        return out


def _central_angle(a, b):
    # stable for both tiny and near-antipodal angles on equal-norm vectors
    return 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))


def geodesic_distance(m, x0, x1):
    """Length of the shortest path along the surface (vectorised over rows)."""
    a, b = m.canonical(x0), m.canonical(x1)
    out = m.radius * _central_angle(a, b)
    return float(out) if np.ndim(out) == 0 else out


def sample_canonical(m, count, rng):
    if m.intrinsic_dim == 1:
        t = rng.uniform(0.0, 2.0 * math.pi, count)
        return m.radius * np.column_stack([np.cos(t), np.sin(t)])
    g = rng.standard_normal((count, 3))
    return m.radius * g / np.linalg.norm(g, axis=1, keepdims=True)


def sample_uniform(m, count, seed):
    """``count`` i.i.d. points from the normalised surface measure."""
    return m.embed(sample_canonical(m, count, np.random.default_rng(seed)))


def sample_geodesic_ball(m, center, s, count, rng):
    """Uniform canonical points in the closed geodesic ball of radius ``s`` about ``center``.

    ``center`` is given in canonical coordinates.
    """
    R = m.radius
    half = min(s / R, math.pi)
    c = np.asarray(center, dtype=float) / R
    if m.intrinsic_dim == 1:
        t = math.atan2(c[1], c[0]) + rng.uniform(-half, half, count)
        return R * np.column_stack([np.cos(t), np.sin(t)])
    # area-uniform on a cap: the height cos(angle) is uniform
    z = rng.uniform(math.cos(half), 1.0, count)
    phi = rng.uniform(0.0, 2.0 * math.pi, count)
    e1, e2 = _tangent_frame(c)
    ring = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    pts = z[:, None] * c + (ring * np.cos(phi))[:, None] * e1 + (ring * np.sin(phi))[:, None] * e2
    return R * pts


def _tangent_frame(c):
    helper = np.eye(3)[int(np.argmin(np.abs(c)))]
    e1 = helper - c * (helper @ c)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(c, e1)


def geodesic_ball_volume(m, r):
    if r < 0:
        raise ValueError("radius must be nonnegative")
    R = m.radius
    if m.intrinsic_dim == 1:
        return min(2.0 * r, 2.0 * math.pi * R)
    return 2.0 * math.pi * R * R * (1.0 - math.cos(min(r / R, math.pi)))


def euclidean_ball_volume(m, r):
    """Surface volume inside a Euclidean ball of radius ``r`` centred on the manifold."""
    if r < 0:
        raise ValueError("radius must be nonnegative")
    R = m.radius
    chord = min(r, 2.0 * R)
    if m.intrinsic_dim == 1:
        return 4.0 * R * math.asin(chord / (2.0 * R))
    # a cap of chordal radius r has area pi r^2 exactly
    return math.pi * chord * chord


def chord_to_geodesic(m, r):
    return 2.0 * m.radius * math.asin(min(r, 2.0 * m.radius) / (2.0 * m.radius))


@dataclass(frozen=True)
class VolumeCheck:
    r: float
    lower: float
    geodesic: float
    euclidean: float
    upper: float

    @property
    def passed(self):
        return self.lower <= self.geodesic <= self.euclidean <= self.upper


def check_volume_bounds(m, r_grid):
    """Sandwich ``4^-g v r^g <= V(geodesic ball) <= V(Euclidean ball) <= 4^g v r^g``.

    Only radii below a eighth of the reach are admissible.
    """
    g = m.intrinsic_dim
    out = []
    for r in r_grid:
        if not 0 <= r < m.reach / 8:
            raise ValueError(f"radius {r} outside [0, reach/8)")
        scale = m.v_gamma * r ** g
        out.append(VolumeCheck(float(r), 4.0 ** -g * scale, geodesic_ball_volume(m, r),
                               euclidean_ball_volume(m, r), 4.0 ** g * scale))
    return out


@dataclass(frozen=True)
class IntersectionCheck:
    volume: float
    bound: float
    sigma: float

    @property
    def passed(self):
        return self.volume >= self.bound - 3.0 * self.sigma


def _arc_overlap(gap, w1, w2):
    # overlap of [-w1, w1] with [gap - w2, gap + w2] on a circle of length 2 pi
    total = 0.0
    for shift in (-2.0 * math.pi, 0.0, 2.0 * math.pi):
        lo = max(-w1, gap + shift - w2)
        hi = min(w1, gap + shift + w2)
        total += max(0.0, hi - lo)
    return total


def check_intersection_bound(m, x, x_tilde, r, r_tilde, mc_n=100_000, seed=0):
    """Volume of the intersection of two geodesic balls against ``2^-4g v r_tilde^g``.

    Exact on the circle; on the sphere a Monte-Carlo estimate from uniform
    points of the smaller ball, with its binomial standard error.
    """
    if not 0 < r_tilde <= r < m.reach / 8:
        raise ValueError("need 0 < r_tilde <= r < reach / 8")
    gap = geodesic_distance(m, x, x_tilde)
    if gap > r + r_tilde / 2 + 1e-12:
        raise ValueError("centres are too far apart for the intersection bound")
    g = m.intrinsic_dim
    bound = 2.0 ** (-4 * g) * m.v_gamma * r_tilde ** g
    R = m.radius
    if g == 1:
        vol = R * _arc_overlap(gap / R, r / R, r_tilde / R)
        return IntersectionCheck(vol, bound, 0.0)
    rng = np.random.default_rng(seed)
    small = sample_geodesic_ball(m, m.canonical(x_tilde), r_tilde, mc_n, rng)
    inside = R * _central_angle(small, m.canonical(x)[None, :]) < r
    frac = inside.mean()
    cap = geodesic_ball_volume(m, r_tilde)
    return IntersectionCheck(frac * cap, bound, cap * math.sqrt(frac * (1 - frac) / mc_n))


def separated_net(points, r):
    """Greedy maximal subset with pairwise distances above ``r``, in input order.

    Returns the kept row indices.
    """
    pts = np.asarray(points, dtype=float)
    if r < 0:
        raise ValueError("r must be nonnegative")
    if len(pts) == 0:
        return np.empty(0, dtype=np.int64)
    kept = np.empty_like(pts)
    keep_idx = []
    r2 = r * r
    for i, p in enumerate(pts):
        if keep_idx:
            diff = kept[:len(keep_idx)] - p
            if np.min((diff * diff).sum(axis=1)) <= r2:
                continue
        kept[len(keep_idx)] = p
        keep_idx.append(i)
    return np.array(keep_idx, dtype=np.int64)


def _farthest_first(pts, r):
    # farthest-point traversal: stop once every point is within r of a centre
    gap = np.full(len(pts), np.inf)
    count, nxt = 0, 0
    while True:
        diff = pts - pts[nxt]
        gap = np.minimum(gap, np.sqrt((diff * diff).sum(axis=1)))
        count += 1
        nxt = int(np.argmax(gap))
        if gap[nxt] <= r:
            return count


def covering_number(points, r):
    """Greedy upper estimate of the r-covering number of a finite point set.

    The centres come from a farthest-point traversal, so they are also
    r-separated.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    pts = np.asarray(points, dtype=float)
    return _farthest_first(pts, r) if len(pts) else 0


def covering_bounds(points, r):
    """``(lower, upper)`` for the r-covering number.

    Any 2r-separated subset needs one covering ball per point, which gives
    the lower value.
    """
    return covering_number(points, 2.0 * r), covering_number(points, r)


def dudley_bound(points, steps=64):
    """Entropy integral ``(ln 2)^-1/2 * int sqrt(ln N(r)) dr`` over the point cloud.

    The integrand is nonincreasing, so the left-endpoint rule on a geometric
    grid from half the smallest pairwise gap to the diameter over-estimates
    the integral; below the grid N equals the number of distinct points.
    """
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 2:
        return 0.0
    dists = pdist(pts)
    lo, hi = dists.min() / 2.0, dists.max()
    grid = np.geomspace(lo, hi, steps + 1)
    total = lo * math.sqrt(math.log(len(pts)))
    for a, b in zip(grid[:-1], grid[1:]):
        total += (b - a) * math.sqrt(math.log(covering_number(pts, a)))
    return total / math.sqrt(math.log(2.0))


@dataclass(frozen=True)
class RegularityParams:
    """Support regularity, density range, margin and Hoelder constants."""

    c0: float
    r0: float
    nu_min: float
    nu_max: float
    zeta_max: float
    alpha: float
    C_alpha: float
    beta: float
    C_beta: float

    def __post_init__(self):
        for name in ("r0", "nu_min", "nu_max", "zeta_max", "C_alpha", "beta", "C_beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.c0 <= 1:
            raise ValueError("c0 must lie in (0, 1]")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")


def _mass_floor(p, m):
    return p.c0 * p.nu_min * 4.0 ** -m.intrinsic_dim * m.v_gamma


def smoothness_constants(p, m):
    """Exponent and constant of Hoelder continuity measured in ball mass."""
    lam = p.alpha / m.intrinsic_dim
    lead = max(p.C_alpha, (m.reach / 8) ** -p.alpha, p.r0 ** -p.alpha)
    return lam, lead * _mass_floor(p, m) ** -lam


def doubling_constant(p, m):
    """``C`` with ``mu(B_{theta r}) <= C theta^gamma mu(B_r)`` on the support."""
    g = m.intrinsic_dim
    top = max(p.nu_max * 4.0 ** g * m.v_gamma, min(m.reach / 8, p.r0) ** -g)
    return top / _mass_floor(p, m)


def covering_bound_regular(p, m, support_volume, r):
    """Covering-number ceiling ``c0^-1 V (g+4)^(g/2+2) r^-g`` for a regular support."""
    g = m.intrinsic_dim
    return support_volume / p.c0 * (g + 4.0) ** (g / 2.0 + 2.0) * r ** -g
