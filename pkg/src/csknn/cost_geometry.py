"""Cost matrices, conditional probability vectors and the margin geometry.

Labels are 1-based everywhere in the public API. ``phi[i, j]`` (0-based
storage) is the cost of predicting label ``i + 1`` when the truth is
``j + 1``, so the expected cost of each prediction under a conditional
``n`` is the vector ``phi @ n``.
"""

from dataclasses import dataclass
import math

import numpy as np

TIE_RTOL = 1e-9
PROB_ATOL = 1e-9


def _tie_tolerance(costs):
    return TIE_RTOL * (1.0 + float(np.max(np.abs(costs))))


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Square table of nonnegative misclassification costs.

    Parameters
    ----------
    entries : array_like, shape (L, L)
        ``entries[i, j]`` is the cost of predicting label i+1 when the
        true label is j+1.
    """

    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"cost matrix must be square, got shape {a.shape}")
        if a.shape[0] < 2:
            raise ValueError("cost matrix needs at least two labels")
        if not np.all(np.isfinite(a)):
            raise ValueError("cost matrix entries must be finite")
        if np.any(a < 0):
            raise ValueError("cost matrix entries must be nonnegative")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def num_labels(self):
        return self.entries.shape[0]

    @classmethod
    def zero_one(cls, num_labels=2):
        return cls(1.0 - np.eye(num_labels))

    def scaled(self, factor):
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return CostMatrix(self.entries * factor)

    def to_text(self):
        rows = [" ".join(repr(float(v)) for v in row) for row in self.entries]
        return "\n".join([str(self.num_labels)] + rows) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines:
            raise ValueError("empty cost matrix text")
        size = int(lines[0])
        if len(lines) != size + 1:
            raise ValueError(f"expected {size} rows, found {len(lines) - 1}")
        rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
        if any(len(r) != size for r in rows):
            raise ValueError("ragged cost matrix rows")
        return cls(np.array(rows))

    def __eq__(self, other):
        return isinstance(other, CostMatrix) and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash(self.entries.tobytes())


def read_cost_matrix(path):
    with open(path) as fh:
        return CostMatrix.from_text(fh.read())


def write_cost_matrix(phi, path):
    with open(path, "w") as fh:
        fh.write(phi.to_text())


@dataclass(frozen=True, eq=False)
class ProbVector:
    """A point of the probability simplex (entries in [0, 1], sum 1)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("probability vector must be one-dimensional and nonempty")
        if np.any(w < -PROB_ATOL) or np.any(w > 1 + PROB_ATOL):
            raise ValueError("probability entries must lie in [0, 1]")
        if abs(w.sum() - 1.0) > PROB_ATOL:
            raise ValueError(f"probability entries sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def one_hot(cls, label, num_labels):
        if not 1 <= label <= num_labels:
            raise ValueError(f"label {label} outside 1..{num_labels}")
        w = np.zeros(num_labels)
        w[label - 1] = 1.0
        return cls(w)

    def __len__(self):
        return self.weights.size

    def __eq__(self, other):
        return isinstance(other, ProbVector) and np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())


def _weights(n):
    return n.weights if isinstance(n, ProbVector) else np.asarray(n, dtype=float)


def _check_dims(phi, w):
    if w.shape[-1] != phi.num_labels:
        raise ValueError(f"probability vector has {w.shape[-1]} entries, cost matrix {phi.num_labels}")


def expected_costs(phi, n):
    """Expected cost of each prediction, ``phi @ n``; works row-wise on a batch."""
    w = _weights(n)
    _check_dims(phi, w)
    return w @ phi.entries.T


def is_reasonable(phi):
    """True when every wrong prediction costs strictly more than the right one."""
    a = phi.entries
    diag = np.diag(a)
    off = a + np.diag(np.full(a.shape[0], np.inf))
    return bool(np.all(diag < off.min(axis=0)))


def optimal_labels(phi, n):
    """Set of cost-minimising labels (1-based), ties within a relative 1e-9."""
    costs = expected_costs(phi, n)
    best = costs.min()
    return frozenset(int(i) + 1 for i in np.flatnonzero(costs - best <= _tie_tolerance(costs)))


def regret(phi, y, n):
    costs = expected_costs(phi, n)
    if not 1 <= y <= phi.num_labels:
        raise ValueError(f"label {y} outside 1..{phi.num_labels}")
    return float(costs[y - 1] - costs.min())


def margin(phi, n):
    """Extra cost of the cheapest non-optimal label; ``inf`` if every label is optimal."""
    costs = expected_costs(phi, n)
    best = costs.min()
    gap = costs - best
    rest = gap[gap > _tie_tolerance(costs)]
    return float(rest.min()) if rest.size else math.inf


def batch_margin(phi, etas):
    """Row-wise :func:`margin` for an (m, L) array of conditionals."""
    costs = expected_costs(phi, etas)
    best = costs.min(axis=1, keepdims=True)
    gap = costs - best
    tol = TIE_RTOL * (1.0 + np.abs(costs).max(axis=1, keepdims=True))
    gap = np.where(gap > tol, gap, np.inf)
    return gap.min(axis=1)


def asymmetry(phi):
    """Largest spread of the off-diagonal costs within one column (0 for two labels)."""
    a = phi.entries
    size = a.shape[0]
    spread = 0.0
    for j in range(size):
        col = np.delete(a[:, j], j)
        spread = max(spread, float(col.max() - col.min()))
    return spread


def lambda_const(phi):
    return (phi.num_labels - 2) * asymmetry(phi) + 2.0 * float(np.abs(phi.entries).max())


def two_point(p, num_labels):
    """The conditional ``(1 - p, p, 0, ..., 0)``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p = {p} outside [0, 1]")
    w = np.zeros(num_labels)
    w[0] = 1.0 - p
    w[1] = p
    return ProbVector(w)


@dataclass(frozen=True)
class CostCalibration:
    """Constants describing how the optimal label switches along the 1-2 edge.

    ``kappa`` is the first point where label 1 stops being the unique
    optimum, ``beta`` the smallest cost advantage of label 1 at the vertex
    ``e(1)``. ``c`` and ``t`` give the linear margin growth
    ``margin(n(kappa +/- delta)) >= c * delta`` for ``0 < delta < t``.
    ``j_star`` is the tie set at kappa, ``k_star`` the labels that win right
    after kappa and ``l_star`` the runners-up there.
    """

    kappa: float
    beta: float
    c: float
    t: float
    j_star: frozenset
    k_star: frozenset
    l_star: frozenset


def _line_costs(phi):
    # cost of each label along p -> n(p) is intercept + slope * p
    a = phi.entries
    return a[:, 0].copy(), a[:, 1] - a[:, 0]


def _right_side_ok(phi, p, k_star, l_star):
    n = two_point(p, phi.num_labels)
    costs = expected_costs(phi, n)
    if optimal_labels(phi, n) != k_star:
        return False
    others = [y for y in range(1, phi.num_labels + 1) if y not in k_star]
    cheapest = min(costs[y - 1] for y in others)
    best_l = min(costs[y - 1] for y in l_star)
    return best_l - cheapest <= _tie_tolerance(costs)


def calibrate(phi):
    """Compute the switching point and margin-growth constants of ``phi``.

    Raises
    ------
    ValueError
        If ``phi`` is not reasonable.
    """
    if not is_reasonable(phi):
        raise ValueError("cost matrix is not reasonable")
    a = phi.entries
    size = phi.num_labels
    rise = a[1:, 0] - a[0, 0]          # extra cost over label 1 at e(1)
    drop = a[0, 1] - a[1:, 1]          # advantage over label 1 at e(2)
    beta = float(rise.min())
    crossing = drop > 0
    if not np.any(crossing):
        raise ValueError("no label ever overtakes label 1 along the 1-2 edge")
    kappa = float(np.min(rise[crossing] / (rise[crossing] + drop[crossing])))

    j_star = optimal_labels(phi, two_point(kappa, size))
    _, slope = _line_costs(phi)
    slope_tol = _tie_tolerance(a)
    j_list = sorted(j_star)
    s_min = min(slope[j - 1] for j in j_list)
    k_star = frozenset(j for j in j_list if slope[j - 1] - s_min <= slope_tol)
    rest = [j for j in j_list if j not in k_star]
    s_next = min(slope[j - 1] for j in rest)
    l_star = frozenset(j for j in rest if slope[j - 1] - s_next <= slope_tol)
    c = min(beta / kappa, float(s_next - s_min))

    t = _switch_window(phi, kappa, k_star, l_star)
    return CostCalibration(kappa=kappa, beta=beta, c=c, t=t, j_star=j_star,
                           k_star=k_star, l_star=l_star)


def _switch_window(phi, kappa, k_star, l_star):
    # The ordering of the affine label costs only changes where two of them
    # cross, so checking one midpoint per gap between crossings is exact.
    cap = min(kappa, 1.0 - kappa)
    intercept, slope = _line_costs(phi)
    at_kappa = intercept + slope * kappa
    size = phi.num_labels
    breaks = []
    for i in range(size):
        for j in range(i + 1, size):
            ds = slope[i] - slope[j]
            if ds == 0:
                continue
            s = (at_kappa[j] - at_kappa[i]) / ds
            if 1e-12 < s < cap:
                breaks.append(s)
    edges = [0.0] + sorted(set(breaks)) + [cap]
    for lo, hi in zip(edges[:-1], edges[1:]):
        if not _right_side_ok(phi, kappa + 0.5 * (lo + hi), k_star, l_star):
            if lo == 0.0:
                raise ValueError("label ordering right of kappa is inconsistent")
            return lo
    return cap
