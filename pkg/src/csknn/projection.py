"""Subgaussian random projections and their distortion.

A projection maps ``x`` in R^d to ``h**-0.5 * V @ x`` where ``V`` has
independent isotropic subgaussian rows.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.spatial.distance import pdist

KINDS = ("gaussian", "achlioptas", "identity-test")

# Orlicz psi_2 norm of one matrix entry.  Sparse sign entries are bounded by
# sqrt(3), and E exp(u^2 / s^2) <= exp(3 / s^2) = 2 gives s = sqrt(3 / ln 2).
DEFAULT_PSI2 = {
    "gaussian": 1.0,
    "achlioptas": math.sqrt(3.0 / math.log(2.0)),
    "identity-test": 1.0,
}


@dataclass(frozen=True)
class ProjectionSpec:
    kind: str
    ambient_dim: int
    target_dim: int
    psi2: float = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown projection kind {self.kind!r}; expected one of {KINDS}")
        if self.ambient_dim < 1 or self.target_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.target_dim > self.ambient_dim:
            raise ValueError(f"target dimension {self.target_dim} exceeds ambient {self.ambient_dim}")
        if self.kind == "identity-test" and self.target_dim != self.ambient_dim:
            raise ValueError("identity-test projection needs target_dim == ambient_dim")
        if self.psi2 is None:
            object.__setattr__(self, "psi2", DEFAULT_PSI2[self.kind])
        elif self.psi2 <= 0:
            raise ValueError("psi2 must be positive")


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """Unscaled rows ``V`` (shape h x d); :meth:`apply` adds the ``h**-0.5`` factor."""

    rows: np.ndarray
    spec: ProjectionSpec

    def __post_init__(self):
        v = np.array(self.rows, dtype=float)
        if v.shape != (self.spec.target_dim, self.spec.ambient_dim):
            raise ValueError(f"rows have shape {v.shape}, spec says "
                             f"{(self.spec.target_dim, self.spec.ambient_dim)}")
        v.setflags(write=False)
        object.__setattr__(self, "rows", v)

    @property
    def scale(self):
        return 1.0 / math.sqrt(self.spec.target_dim)

    def apply(self, x):
        """Project one vector or the rows of an (m, d) array."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.spec.ambient_dim:
            raise ValueError(f"input has dimension {x.shape[-1]}, projection expects {self.spec.ambient_dim}")
        return self.scale * (x @ self.rows.T)

    __call__ = apply

    def to_text(self):
        s = self.spec
        head = f"{s.kind} {s.ambient_dim} {s.target_dim} {s.seed} {s.psi2!r}"
        body = [" ".join(repr(float(v)) for v in row) for row in self.rows]
        return "\n".join([head] + body) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        kind, d, h, seed, psi2 = lines[0].split()
        spec = ProjectionSpec(kind, int(d), int(h), float(psi2), int(seed))
        rows = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
        return cls(rows, spec)


def sample_projection(spec):
    """Draw the projection rows described by ``spec`` (deterministic in ``spec.seed``)."""
    shape = (spec.target_dim, spec.ambient_dim)
    if spec.kind == "identity-test":
        return ProjectionMatrix(np.eye(spec.ambient_dim), spec)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian":
        rows = rng.standard_normal(shape)
    else:
        # +-sqrt(3) with probability 1/6 each, 0 with probability 2/3
        u = rng.random(shape)
        rows = np.where(u < 1 / 6, -math.sqrt(3.0), np.where(u < 1 / 3, math.sqrt(3.0), 0.0))
    return ProjectionMatrix(rows, spec)


def apply(projection, x):
    return projection.apply(x)


def theta_from_epsilon(eps):
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {eps}")
    return math.sqrt((1.0 + eps) / (1.0 - eps))


def epsilon_from_theta(theta):
    if theta < 1.0:
        raise ValueError(f"theta must be at least 1, got {theta}")
    return (theta * theta - 1.0) / (theta * theta + 1.0)


def _log_plus(v):
    return max(math.log(v), 0.0) if v > 0 else 0.0


def dimension_bound(gamma, tau, r0, c0, delta, *, theta=None, nu_min=None,
                    eps=None, volume=None, psi2=1.0, K=1.0):
    """Target dimension sufficient for a theta-approximate (or eps-distorting) projection.

    Exactly one of ``theta`` (with ``nu_min``) or ``eps`` (with ``volume``,
    the manifold volume of the support) must be given.  ``K`` is the
    unspecified absolute constant of the chaining argument and defaults to 1.

    Returns
    -------
    int
        The ceiling of the bound.
    """
    if (theta is None) == (eps is None):
        raise ValueError("give exactly one of theta or eps")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    curvature = gamma * _log_plus(gamma / (r0 * tau))
    if theta is not None:
        if theta <= 1.0:
            raise ValueError(f"theta must exceed 1, got {theta}")
        if nu_min is None:
            raise ValueError("theta mode needs nu_min")
        t2 = theta * theta
        factor = ((t2 + 1.0) / (t2 - 1.0)) ** 2
        entropy = curvature - _log_plus(c0 * nu_min) + gamma
    else:
        if not 0.0 < eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {eps}")
        if volume is None:
            raise ValueError("eps mode needs the support volume")
        factor = eps ** -2
        entropy = curvature + _log_plus(volume / c0) + gamma
    value = K * psi2 ** 4 * factor * max(entropy, math.log(1.0 / delta))
    return int(math.ceil(value - 1e-12 * value))


@dataclass(frozen=True)
class Distortion:
    epsilon: float
    worst_pair: tuple


def distortion(projection, points):
    """Largest relative change of squared pairwise distances under ``projection``.

    Pairs at distance zero are skipped.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(np.unique(pts, axis=0)) < 2:
        raise ValueError("need at least two distinct points")
    before = pdist(pts, "sqeuclidean")
    after = pdist(projection.apply(pts), "sqeuclidean")
    keep = before > 0
    dev = np.full(before.shape, -np.inf)
    dev[keep] = np.abs(after[keep] / before[keep] - 1.0)
    flat = int(np.argmax(dev))
    # pdist's condensed order is the row-major upper triangle
    rows, cols = np.triu_indices(len(pts), k=1)
    return Distortion(float(dev[flat]), (int(rows[flat]), int(cols[flat])))


def save_projection(projection, path):
    with open(path, "w") as fh:
        fh.write(projection.to_text())


def load_projection(path):
    with open(path) as fh:
        return ProjectionMatrix.from_text(fh.read())
