"""Triplet miners: random, continuous-label, semihard, softhard and distance-ranked.

Every miner emits at most one (anchor, positive, negative) triple per anchor.
Anchors without an admissible positive or negative are skipped; a batch with
no triple at all is flagged as starved so the caller can resample it.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distance import DistanceMeasure
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

KINDS = ("random", "continuous_label", "semihard", "softhard", "distance_ranked")
LABEL_KINDS = ("random", "continuous_label", "semihard", "softhard")
EMBEDDING_KINDS = ("semihard", "softhard")


@dataclass(frozen=True, eq=False)
class TripletIndexBatch:
    triples: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if len(t) and ((t[:, 0] == t[:, 1]) | (t[:, 0] == t[:, 2]) | (t[:, 1] == t[:, 2])).any():
            raise AssertionError("degenerate triple emitted")
        object.__setattr__(self, "triples", t)

    @property
    def starved(self):
        return len(self.triples) == 0

    def __len__(self):
        return len(self.triples)

    @property
    def anchors(self):
        return self.triples[:, 0]

    @property
    def positives(self):
        return self.triples[:, 1]

    @property
    def negatives(self):
        return self.triples[:, 2]


@dataclass(frozen=True)
class MinerSpec:
    kind: str = "random"
    measure: DistanceMeasure | None = None
    seed: int = 0
    semihard_margin: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"miner kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "distance_ranked" and self.measure is None:
            object.__setattr__(self, "measure", DistanceMeasure("dtw"))
        if isinstance(self.measure, dict):
            object.__setattr__(self, "measure", DistanceMeasure(**self.measure))

    @property
    def needs_embeddings(self):
        return self.kind in EMBEDDING_KINDS


def _batch(triples):
    return TripletIndexBatch(np.array(triples, dtype=np.int64).reshape(-1, 3))


def _starved(batch, kind):
    if batch.starved:
        log.debug("%s miner starved: no admissible triple in batch", kind)
    return batch


def squared_distances(embeddings):
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise DimensionError(f"embeddings must be (B, D), got shape {e.shape}")
    diff = e[:, None, :] - e[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def mine_random(binary_labels, rng):
    """Positive uniform among same-label samples, negative uniform among the others."""
    y = np.asarray(binary_labels)
    n = len(y)
    out = []
    for a in range(n):
        pos = np.flatnonzero(y == y[a])
        pos = pos[pos != a]
        neg = np.flatnonzero(y != y[a])
        if len(pos) == 0 or len(neg) == 0:
            continue
        out.append((a, pos[rng.integers(len(pos))], neg[rng.integers(len(neg))]))
    return _starved(_batch(out), "random")


def mine_continuous_label(values, rng):
    """Positive = closest label (lowest index on ties); negative drawn from the farthest-label set."""
    y = np.asarray(values, dtype=np.float64)
    n = len(y)
    if n < 3:
        raise ConfigError(f"continuous-label mining needs a batch of at least 3, got {n}")
    out = []
    for a in range(n):
        diff = np.abs(y - y[a])
        diff[a] = np.inf
        p = int(np.argmin(diff))
        closest = diff[p]
        diff[a] = -np.inf
        if diff.max() <= closest:
            # every other label is equidistant: no negative is farther than the positive
            continue
        far = np.flatnonzero(diff == diff.max())
        out.append((a, p, far[rng.integers(len(far))]))
    return _starved(_batch(out), "continuous_label")


def _hard_candidates(embeddings, binary_labels):
    y = np.asarray(binary_labels)
    d2 = squared_distances(embeddings)
    if d2.shape[0] != len(y):
        raise DimensionError(f"{d2.shape[0]} embeddings for {len(y)} labels")
    return y, d2


def mine_semihard(embeddings, binary_labels, rng, margin=None):
    """Negatives farther from the anchor than the chosen positive (squared distances).

    With ``margin`` set, negatives must also lie within ``d2_ap + margin``.
    """
    y, d2 = _hard_candidates(embeddings, binary_labels)
    out = []
    for a in range(len(y)):
        pos = np.flatnonzero(y == y[a])
        pos = pos[pos != a]
        if len(pos) == 0:
            continue
        p = pos[rng.integers(len(pos))]
        ok = (y != y[a]) & (d2[a] > d2[a, p])
        if margin is not None:
            ok &= d2[a] < d2[a, p] + margin
        neg = np.flatnonzero(ok)
        if len(neg) == 0:
            continue
        out.append((a, p, neg[rng.integers(len(neg))]))
    return _starved(_batch(out), "semihard")


def mine_softhard(embeddings, binary_labels, rng):
    """Negatives closer than the farthest positive and farther than the closest negative."""
    y, d2 = _hard_candidates(embeddings, binary_labels)
    out = []
    for a in range(len(y)):
        pos = np.flatnonzero(y == y[a])
        pos = pos[pos != a]
        negs = np.flatnonzero(y != y[a])
        if len(pos) == 0 or len(negs) == 0:
            continue
        p = pos[rng.integers(len(pos))]
        upper = d2[a, pos].max()
        lower = d2[a, negs].min()
        neg = negs[(d2[a, negs] < upper) & (d2[a, negs] > lower)]
        if len(neg) == 0:
            continue
        out.append((a, p, neg[rng.integers(len(neg))]))
    return _starved(_batch(out), "softhard")


def mine_distance_ranked(dist, rng):
    """Positive = nearest record in input space; negative uniform over the rest."""
    values = np.asarray(getattr(dist, "values", dist), dtype=np.float64)
    n = values.shape[0]
    if values.shape != (n, n):
        raise DimensionError(f"distance matrix must be square, got {values.shape}")
    if n < 3:
        raise ConfigError(f"distance-ranked mining needs a batch of at least 3, got {n}")
    out = []
    for a in range(n):
        row = values[a].copy()
        row[a] = np.inf
        p = int(np.argmin(row))
        rest = np.array([i for i in range(n) if i != a and i != p])
        out.append((a, p, rest[rng.integers(len(rest))]))
    return _starved(_batch(out), "distance_ranked")


def mine(spec, rng, binary_labels=None, mpcwp=None, embeddings=None, dist=None):
    """Dispatch on ``spec.kind``."""
    if spec.kind in LABEL_KINDS and spec.kind != "continuous_label" and binary_labels is None:
        raise ConfigError(f"{spec.kind} mining requires binary labels")
    if spec.kind == "random":
        return mine_random(binary_labels, rng)
    if spec.kind == "continuous_label":
        if mpcwp is None:
            raise ConfigError("continuous_label mining requires mPCWP values")
        return mine_continuous_label(mpcwp, rng)
    if spec.kind == "semihard":
        return mine_semihard(embeddings, binary_labels, rng, spec.semihard_margin)
    if spec.kind == "softhard":
        return mine_softhard(embeddings, binary_labels, rng)
    if dist is None:
        raise ConfigError("distance_ranked mining requires a distance matrix")
    return mine_distance_ranked(dist, rng)


def write_triples_csv(path, batch, step=None):
    """Append mined triples as ``anchor,positive,negative`` rows (debug dump)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["step", "anchor", "positive", "negative"] if step is not None
                       else ["anchor", "positive", "negative"])
        for a, p, n in batch.triples.tolist():
            w.writerow([step, a, p, n] if step is not None else [a, p, n])
