"""Plug-in cost-sensitive k-NN classifier and its Monte-Carlo risk evaluation."""

from dataclasses import dataclass
import csv
import math

import numpy as np

from .cost_geometry import ProbVector, expected_costs
from .hard_family import best_labels


@dataclass(frozen=True)
class Schedule:
    """``k_n = k0 * n^(2a/(2a+g)) * (1 + ln(1/xi))^(g/(2a+g))``; xi only in confidence mode."""

    k0: float = 1.0
    alpha: float = 1.0
    gamma: int = 1
    confidence: bool = False

    def __post_init__(self):
        if not self.k0 > 0:
            raise ValueError("k0 must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


def k_schedule(s, n, xi=None):
    if n < 1:
        raise ValueError("n must be at least 1")
    denom = 2 * s.alpha + s.gamma
    value = s.k0 * n ** (2 * s.alpha / denom)
    if s.confidence:
        if xi is None or not 0 < xi < 1:
            raise ValueError("confidence mode needs xi in (0, 1)")
        value *= (1 + math.log(1 / xi)) ** (s.gamma / denom)
    # powers like 512^(2/3) land a hair above the exact integer
    near = round(value)
    if abs(value - near) <= 1e-9 * max(1.0, value):
        value = near
    return int(min(max(math.ceil(value), 1), n))


def estimate_eta(labels, num_labels):
    """Empirical label frequencies of a neighbour multiset."""
    lab = np.asarray(labels, dtype=np.int64).ravel()
    if lab.size == 0:
        raise ValueError("no labels to count")
    if lab.min() < 1 or lab.max() > num_labels:
        raise ValueError(f"labels must lie in 1..{num_labels}")
    return ProbVector(np.bincount(lab - 1, minlength=num_labels) / lab.size)


def estimate_eta_batch(label_rows, num_labels):
    """Row-wise :func:`estimate_eta` for an (m, k) label array."""
    rows = np.asarray(label_rows)
    k = rows.shape[1]
    return np.stack([(rows == y).sum(axis=1) for y in range(1, num_labels + 1)], axis=1) / k


def predict(phi, eta_hat):
    """Cheapest label under ``eta_hat``; the smallest one on ties."""
    w = eta_hat.weights if isinstance(eta_hat, ProbVector) else np.asarray(eta_hat, dtype=float)
    return int(best_labels(phi, w[None, :])[0])


def predict_batch(phi, eta_hats):
    return best_labels(phi, np.asarray(eta_hats, dtype=float))


def classify_batch(index, phi, x, k, mode="exact"):
    idx = index.neighbour_sets(x, k, mode)
    eta_hat = estimate_eta_batch(index.data.labels[idx], phi.num_labels)
    return predict_batch(phi, eta_hat)


def classify(index, phi, x, k, mode="exact"):
    return int(classify_batch(index, phi, np.atleast_2d(x), k, mode)[0])


@dataclass(frozen=True)
class Evaluation:
    excess_risk: float
    misclass_prob: float


def score_predictions(phi, eta, predictions):
    """Mean regret against the Bayes rule and the rate of non-optimal predictions."""
    costs = expected_costs(phi, eta)
    best = costs.min(axis=1)
    rows = np.arange(len(costs))
    chosen = costs[rows, np.asarray(predictions) - 1]
    bayes = costs[rows, best_labels(phi, eta) - 1]
    tol = 1e-9 * (1.0 + np.abs(costs).max(axis=1))
    return Evaluation(float(np.mean(chosen - bayes)), float(np.mean(chosen - best > tol)))


def evaluate_classifier(classifier, phi, dist, m_test, seed):
    """Score ``classifier`` (ambient points -> labels) on ``m_test`` fresh draws."""
    if m_test < 1:
        raise ValueError("m_test must be at least 1")
    rng = np.random.default_rng(seed)
    c = dist.sample_marginal(m_test, rng)
    x = dist.manifold.embed(c)
    return score_predictions(phi, dist.conditional_canonical(c), classifier(x))


def evaluate(index, phi, dist, k, mode, m_test, seed):
    """Excess risk and misclassification rate of the k-NN plug-in rule."""
    return evaluate_classifier(lambda x: classify_batch(index, phi, x, k, mode),
                               phi, dist, m_test, seed)


EVAL_COLUMNS = ("family", "gamma", "d", "n", "k", "mode", "trial",
                "excess_risk", "misclass_prob", "seed")


def write_eval_rows(target, rows):
    """Write evaluation rows (dicts keyed by :data:`EVAL_COLUMNS`) to a path or open stream."""
    if hasattr(target, "write"):
        _write_rows(target, rows)
        return
    with open(target, "w", newline="") as fh:
        _write_rows(fh, rows)


def _write_rows(fh, rows):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in EVAL_COLUMNS])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)
