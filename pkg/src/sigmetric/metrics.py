"""Task metrics, embedding-neighbourhood metrics, bootstrap and subgroup gaps."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import gammaincc
from scipy.stats import rankdata

from .errors import ConfigError, DegenerateDataError, UndefinedMetricError
from .signals import AGE_BIN_LABELS, age_bin


def _binary(labels):
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if not np.isin(y, (0, 1)).all():
        raise UndefinedMetricError("labels must be binary")
    return y


def auc(scores, labels):
    """Tie-aware Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels)
    pos, neg = s[y == 1], np.sort(s[y == 0])
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUC needs both classes")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # twice the U statistic is an exact integer
    twice_u = float(2 * below.sum() + (at_or_below - below).sum())
    return (twice_u / 2.0) / (len(pos) * len(neg))


def apr(scores, labels):
    """Average precision: sum over distinct thresholds of (R_n - R_{n-1}) * P_n.

    Summed in exact rationals, so the result is the correctly rounded value
    regardless of summation order.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("APR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of equal scores: ties share one threshold
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[last]
    selected = last + 1
    gained = tp - np.r_[0, tp[:-1]]
    keep = gained > 0
    total = sum(Fraction(int(g) * int(t), int(c))
                for g, t, c in zip(gained[keep], tp[keep], selected[keep]))
    return float(total / n_pos)


def rmse_metric(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(p) == 0 or len(p) != len(y):
        raise UndefinedMetricError("RMSE needs equally many (>= 1) predictions and targets")
    return float(np.sqrt(np.mean((y - p) ** 2)))


def neighbor_indices(embeddings, k):
    """k nearest neighbours per row (Euclidean, self excluded, ties to lower index)."""
    e = np.asarray(embeddings, dtype=np.float64)
    n = e.shape[0]
    if not (0 < k < n):
        raise ConfigError(f"need 0 < k < n, got k={k}, n={n}")
    d2 = cdist(e, e, "sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def recall_at_k(embeddings, labels, k=1):
    """Fraction of samples with a same-label sample among their k nearest neighbours."""
    y = np.asarray(labels).reshape(-1)
    nn = neighbor_indices(embeddings, k)
    hits = int((y[nn] == y[:, None]).any(axis=1).sum())
    return hits / len(y)


def knn_same_group_proportion(embeddings, group_flags, k, target_group=1):
    """Mean share of a target-group anchor's k neighbours that are also in the target group."""
    g = np.asarray(group_flags).reshape(-1)
    anchors = np.flatnonzero(g == target_group)
    if len(anchors) == 0:
        raise UndefinedMetricError("target group is empty")
    nn = neighbor_indices(embeddings, k)
    # k is shared by all anchors, so the mean of shares is one exact ratio of counts
    same = int((g[nn[anchors]] == target_group).sum())
    return same / (k * len(anchors))


@dataclass
class BootstrapResult:
    mean: float
    std: float
    n_replicates: int
    n_redraws: int
    replicates: np.ndarray = field(repr=False)


def bootstrap(metric_fn, data, n_replicates=1000, seed=0, resample=True):
    """Record-level bootstrap of ``metric_fn(*data)``.

    Each replicate owns a seeded substream. Resamples on which the metric is
    undefined are redrawn and counted; more than half as many redraws as
    replicates raises ``DegenerateDataError``.
    """
    arrays = [np.asarray(a) for a in data]
    n = len(arrays[0])
    if n == 0:
        raise UndefinedMetricError("cannot bootstrap empty data")
    if n_replicates < 1:
        raise ConfigError("n_replicates must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(n_replicates)
    values = np.empty(n_replicates)
    redraws = 0
    budget = n_replicates / 2
    for r, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        while True:
            idx = rng.integers(0, n, n) if resample else np.arange(n)
            try:
                values[r] = metric_fn(*(a[idx] for a in arrays))
                break
            except UndefinedMetricError:
                if not resample:
                    raise
                redraws += 1
                if redraws > budget:
                    raise DegenerateDataError(
                        f"{redraws} undefined resamples for {n_replicates} replicates"
                    ) from None
    std = float(np.std(values, ddof=1)) if n_replicates > 1 else 0.0
    return BootstrapResult(float(np.mean(values)), std, n_replicates, redraws, values)


def gender_gap(male_value, female_value):
    return male_value - female_value


def average_pairwise_gap(values):
    """Mean absolute difference over all unordered pairs."""
    vals = list(values)
    if len(vals) < 2:
        raise UndefinedMetricError("need at least two groups for a pairwise gap")
    diffs = [abs(a - b) for a, b in itertools.combinations(vals, 2)]
    return sum(diffs) / len(diffs)


def _subset(data, mask):
    return tuple(np.asarray(a)[mask] for a in data)


def subgroup_gap_gender(metric_fn, data, genders):
    """(male value, female value, male - female) on literal subsets."""
    g = np.asarray(genders)
    male, female = g == "male", g == "female"
    if not male.any() or not female.any():
        raise UndefinedMetricError("both gender groups must be non-empty")
    m = metric_fn(*_subset(data, male))
    f = metric_fn(*_subset(data, female))
    return m, f, gender_gap(m, f)


def age_bin_masks(ages):
    bins = np.array([age_bin(a) for a in np.asarray(ages, dtype=np.float64)], dtype=object)
    return {label: bins == label for label in AGE_BIN_LABELS}


def subgroup_gap_age(metric_fn, data, ages):
    """Per-bin values and their average pairwise absolute gap.

    Empty bins, and bins where the metric is undefined, are dropped with a warning.
    """
    values = {}
    for label, mask in age_bin_masks(ages).items():
        if not mask.any():
            warnings.warn(f"age bin {label} is empty; excluded from the age gap", stacklevel=2)
            continue
        try:
            values[label] = metric_fn(*_subset(data, mask))
        except UndefinedMetricError as exc:
            warnings.warn(f"age bin {label} excluded: {exc}", stacklevel=2)
    if len(values) < 2:
        raise UndefinedMetricError("fewer than two age bins with a defined metric")
    return values, average_pairwise_gap(values.values())


def kruskal_wallis(groups):
    """Midrank H statistic with tie correction; p from the chi-square survival function."""
    groups = [np.asarray(g, dtype=np.float64).reshape(-1) for g in groups]
    if len(groups) < 2 or any(len(g) == 0 for g in groups):
        raise UndefinedMetricError("Kruskal-Wallis needs at least two non-empty groups")
    allv = np.concatenate(groups)
    n = len(allv)
    ranks = rankdata(allv)
    _, counts = np.unique(allv, return_counts=True)
    correction = 1.0 - float((counts ** 3 - counts).sum()) / (n ** 3 - n)
    if correction <= 0:
        return 0.0, 1.0
    h, start = 0.0, 0
    for g in groups:
        r = ranks[start:start + len(g)].sum()
        h += r * r / len(g)
        start += len(g)
    h = (12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)) / correction
    df = len(groups) - 1
    p = float(gammaincc(df / 2.0, max(h, 0.0) / 2.0))
    return float(h), p
