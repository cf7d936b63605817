"""Exact and projected k-nearest-neighbour search with empirical approximation ratios.

Neighbours are ranked by squared Euclidean distance computed by explicit
differencing, ties going to the smaller training index.  The brute-force
scan is the reference; the accelerated path (a k-d tree on the
principal subspace of the training cloud) must and does return the same
neighbour sets, falling back to the scan whenever the k-th and (k+1)-th
candidates are too close to separate safely.
"""

from dataclasses import dataclass
import csv
import math

import numpy as np
from scipy.spatial import cKDTree

# scan block size, in float64 entries of the (queries, points, dim) difference tensor
_BLOCK_ENTRIES = 4_000_000
_TREE_BLOCK = 2048
_MIN_TREE_POINTS = 64


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled sample: ``features`` (n, d) and ``labels`` in 1..num_labels."""

    features: np.ndarray
    labels: np.ndarray
    num_labels: int

    def __post_init__(self):
        x = np.array(self.features, dtype=float)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if y.shape != (x.shape[0],):
            raise ValueError(f"{y.size} labels for {x.shape[0]} feature rows")
        if self.num_labels < 2:
            raise ValueError("need at least two labels")
        if y.size and (y.min() < 1 or y.max() > self.num_labels):
            raise ValueError(f"labels must lie in 1..{self.num_labels}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def to_text(self):
        out = [f"{len(self)} {self.dim} {self.num_labels}"]
        for row, label in zip(self.features, self.labels):
            out.append(" ".join(repr(float(v)) for v in row) + f" {int(label)}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        n, d, num_labels = (int(v) for v in lines[0].split())
        if len(lines) - 1 != n:
            raise ValueError(f"header promises {n} rows, found {len(lines) - 1}")
        x = np.empty((n, d))
        y = np.empty(n, dtype=np.int64)
        for i, ln in enumerate(lines[1:]):
            parts = ln.split()
            if len(parts) != d + 1:
                raise ValueError(f"row {i} has {len(parts)} fields, expected {d + 1}")
            x[i] = [float(v) for v in parts[:d]]
            y[i] = int(parts[d])
        return cls(x, y, num_labels)


def read_dataset(path):
    with open(path) as fh:
        return Dataset.from_text(fh.read())


def write_dataset(data, path):
    with open(path, "w") as fh:
        fh.write(data.to_text())


@dataclass(frozen=True)
class QueryResult:
    """Returned neighbours (nearest first) and their largest original-space distance."""

    indices: tuple
    radius: float


def squared_distances(x, points):
    """Squared distances from ``x`` to each row of ``points``, by differencing.

    Broadcasts: ``x`` of shape (..., 1, d) against ``points`` (..., n, d).
    """
    diff = points - x
    return (diff * diff).sum(axis=-1)


def brute_force_knn(points, queries, k):
    """Reference scan: indices of the k nearest rows of ``points`` per query.

    Rows of the result are ordered by distance, ties by ascending index.
    """
    points = np.asarray(points, dtype=float)
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    n, dim = points.shape
    if not 1 <= k <= n:
        raise ValueError(f"k = {k} outside 1..{n}")
    out = np.empty((len(queries), k), dtype=np.int64)
    block = max(1, _BLOCK_ENTRIES // max(1, n * dim))
    for lo in range(0, len(queries), block):
        q = queries[lo:lo + block]
        d2 = squared_distances(q[:, None, :], points[None, :, :])
        out[lo:lo + block] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


class _Searcher:
    """k-NN over a fixed point cloud, tree-accelerated when the cloud allows it."""

    def __init__(self, points, accelerate=True):
        self.points = points
        self.tree = None
        n = len(points)
        if not accelerate or n < _MIN_TREE_POINTS:
            return
        self.center = points.mean(axis=0)
        centred = points - self.center
        _, sing, vt = np.linalg.svd(centred, full_matrices=False)
        if sing[0] == 0.0:
            return
        rank = int(np.sum(sing > 1e-10 * sing[0]))
        self.basis = vt[:rank].T
        reduced = centred @ self.basis
        # how far training points stick out of the retained subspace
        self.residual = float(np.sqrt(squared_distances(reduced @ self.basis.T, centred).max()))
        self.scale = float((centred * centred).sum(axis=1).max())
        self.tree = cKDTree(reduced)

    def sets(self, queries, k):
        """k-nearest index sets (row order unspecified) for each query."""
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k = {k} outside 1..{n}")
        if k == n:
            return np.tile(np.arange(n), (len(queries), 1))
        if self.tree is None:
            return brute_force_knn(self.points, queries, k)
        out = np.empty((len(queries), k), dtype=np.int64)
        for lo in range(0, len(queries), _TREE_BLOCK):
            q = queries[lo:lo + _TREE_BLOCK]
            cq = q - self.center
            red = cq @ self.basis
            perp = np.sqrt(squared_distances(red @ self.basis.T, cq))
            dist, idx = self.tree.query(red, k=k + 1)
            # True squared distance = reduced part + out-of-subspace part, the
            # latter known up to the training residual; demand a clear gap.
            slack = 2.0 * (2.0 * perp * self.residual + self.residual ** 2)
            slack += 1e-9 * (1.0 + self.scale + (cq * cq).sum(axis=1))
            gap = dist[:, k] ** 2 - dist[:, k - 1] ** 2
            out[lo:lo + len(q)] = idx[:, :k]
            unsure = np.flatnonzero(gap <= slack)
            if unsure.size:
                out[lo + unsure] = brute_force_knn(self.points, q[unsure], k)
        return out

    def ordered(self, queries, k):
        """Like :meth:`sets` but each row sorted by distance, ties by index."""
        idx = self.sets(queries, k)
        d2 = squared_distances(queries[:, None, :], self.points[idx])
        order = np.lexsort((idx, d2), axis=-1)
        return np.take_along_axis(idx, order, axis=1)


class NeighbourIndex:
    """Immutable k-NN index over a :class:`Dataset`, optionally with a projection.

    Parameters
    ----------
    data : Dataset
    projection : ProjectionMatrix, optional
        When given, projected copies of the features are stored and
        :meth:`query_projected` ranks neighbours in the projected space.
    accelerate : bool
        Use the tree backend.  Results are identical either way.
    """

    def __init__(self, data, projection=None, accelerate=True):
        self.data = data
        self.projection = projection
        self._exact = _Searcher(data.features, accelerate)
        self.projected = None
        self._proj = None
        if projection is not None:
            if projection.spec.ambient_dim != data.dim:
                raise ValueError(f"projection expects dimension {projection.spec.ambient_dim}, "
                                 f"data has {data.dim}")
            self.projected = projection.apply(data.features)
            self.projected.setflags(write=False)
            self._proj = _Searcher(self.projected, accelerate)

    def __len__(self):
        return len(self.data)

    def _queries(self, x):
        q = np.atleast_2d(np.asarray(x, dtype=float))
        if q.shape[1] != self.data.dim:
            raise ValueError(f"query has dimension {q.shape[1]}, index has {self.data.dim}")
        return q

    def _searcher(self, mode):
        if mode == "exact":
            return self._exact, None
        if mode == "projected":
            if self._proj is None:
                raise ValueError("index was built without a projection")
            return self._proj, self.projection
        raise ValueError(f"unknown mode {mode!r}")

    def neighbour_sets(self, x, k, mode="exact"):
        """Unordered k-neighbour index sets for each row of ``x``; the fast path."""
        searcher, proj = self._searcher(mode)
        q = self._queries(x)
        return searcher.sets(q if proj is None else proj.apply(q), k)

    def query_batch(self, x, k, mode="exact"):
        """Ordered neighbours and original-space radii for each row of ``x``."""
        searcher, proj = self._searcher(mode)
        q = self._queries(x)
        idx = searcher.ordered(q if proj is None else proj.apply(q), k)
        d2 = squared_distances(q[:, None, :], self.data.features[idx])
        return idx, np.sqrt(d2.max(axis=1))

    def query_exact(self, x, k):
        idx, radius = self.query_batch(x, k, "exact")
        return QueryResult(tuple(int(i) for i in idx[0]), float(radius[0]))

    def query_projected(self, x, k):
        idx, radius = self.query_batch(x, k, "projected")
        return QueryResult(tuple(int(i) for i in idx[0]), float(radius[0]))


def build_index(data, projection=None, accelerate=True):
    return NeighbourIndex(data, projection, accelerate)


def query_exact(index, x, k):
    return index.query_exact(x, k)


def query_projected(index, x, k):
    return index.query_projected(x, k)


def theta_ratio(exact, approx):
    """How much larger the approximate k-th radius is than the exact one."""
    if exact.radius == 0.0:
        if approx.radius == 0.0:
            return 1.0
        raise ValueError("exact radius is zero but the approximate one is not")
    return approx.radius / exact.radius


def omega_ratio(exact, approx, ball_measure):
    """Ratio of the marginal masses of the approximate and exact k-th balls."""
    if approx.radius == exact.radius:
        return 1.0
    inner = ball_measure(exact.radius)
    if inner <= 0.0:
        raise ValueError("exact ball has zero mass")
    return ball_measure(approx.radius) / inner


QUERY_DUMP_COLUMNS = ("query_id", "k", "exact_radius", "approx_radius", "theta", "omega")


def write_query_dump(path, rows):
    """Write per-query ratio rows (tuples in :data:`QUERY_DUMP_COLUMNS` order)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUERY_DUMP_COLUMNS)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)
