"""Euclidean and dynamic-time-warping distances between multichannel sequences."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, DimensionError

numba.config.THREADING_LAYER = "omp"

KINDS = ("euclidean", "dtw")


@dataclass(frozen=True)
class DistanceMeasure:
    kind: str = "dtw"
    band_radius: int | None = None
    z_normalize: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"distance kind must be one of {KINDS}, got {self.kind!r}")
        if self.band_radius is not None:
            if self.kind != "dtw":
                raise ConfigError("band_radius only applies to dtw")
            if int(self.band_radius) < 0:
                raise ConfigError("band_radius must be non-negative")

    def __call__(self, x, y):
        if self.kind == "euclidean":
            return euclidean_distance(x, y, z_normalize=self.z_normalize)
        return dtw_distance(x, y, self.band_radius, z_normalize=self.z_normalize)


@dataclass(frozen=True, eq=False)
class PairwiseDistanceMatrix:
    values: np.ndarray
    measure: DistanceMeasure
    record_ids: tuple | None = None

    @property
    def n(self):
        return self.values.shape[0]


def _as_leads(x):
    arr = getattr(x, "leads", x)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise DimensionError(f"expected a (d, T) sequence, got shape {arr.shape}")
    return arr


def znorm_leads(leads):
    """Per-lead zero mean / unit variance; constant leads become zero."""
    mu = leads.mean(axis=-1, keepdims=True)
    sd = leads.std(axis=-1, keepdims=True)
    return np.where(sd > 0, (leads - mu) / np.where(sd > 0, sd, 1.0), 0.0)


def euclidean_distance(x, y, z_normalize=False):
    a, b = _as_leads(x), _as_leads(y)
    if a.shape != b.shape:
        raise DimensionError(f"euclidean distance needs equal shapes, got {a.shape} and {b.shape}")
    if z_normalize:
        a, b = znorm_leads(a), znorm_leads(b)
    return float(np.sqrt(np.sum((a - b) ** 2)))


@numba.njit(cache=True)
def _dtw_rolling(x, y, band):
    # x: (d, Tx), y: (d, Ty); band < 0 means unconstrained
    d, tx = x.shape
    ty = y.shape[1]
    inf = np.inf
    prev = np.full(ty, inf)
    cur = np.full(ty, inf)
    for i in range(tx):
        if band < 0:
            jlo, jhi = 0, ty - 1
        else:
            jlo, jhi = max(0, i - band), min(ty - 1, i + band)
        for j in range(ty):
            cur[j] = inf
        for j in range(jlo, jhi + 1):
            s = 0.0
            for k in range(d):
                diff = x[k, i] - y[k, j]
                s += diff * diff
            c = math.sqrt(s)
            if i == 0 and j == 0:
                best = 0.0
            else:
                best = inf
                if i > 0 and prev[j] < best:
                    best = prev[j]
                if j > 0 and cur[j - 1] < best:
                    best = cur[j - 1]
                if i > 0 and j > 0 and prev[j - 1] < best:
                    best = prev[j - 1]
            cur[j] = c + best
        prev, cur = cur, prev
    return prev[ty - 1]


@numba.njit(cache=True, parallel=True)
def _dtw_pairs(X, band, ii, jj):
    out = np.empty(ii.shape[0])
    for p in numba.prange(ii.shape[0]):
        out[p] = _dtw_rolling(X[ii[p]], X[jj[p]], band)
    return out


def _band(band_radius, tx, ty):
    if band_radius is None:
        return -1
    band_radius = int(band_radius)
    if band_radius < abs(tx - ty):
        raise ConfigError(
            f"band_radius {band_radius} < |Tx - Ty| = {abs(tx - ty)}: no admissible warping path"
        )
    return band_radius


def dtw_distance(x, y, band_radius=None, z_normalize=False):
    """Dependent multivariate DTW; local cost is the L2 norm across leads.

    Cells with ``|i - j| > band_radius`` are excluded when a band is given.
    """
    a, b = _as_leads(x), _as_leads(y)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"lead counts differ: {a.shape[0]} vs {b.shape[0]}")
    if z_normalize:
        a, b = znorm_leads(a), znorm_leads(b)
    band = _band(band_radius, a.shape[1], b.shape[1])
    return float(_dtw_rolling(np.ascontiguousarray(a), np.ascontiguousarray(b), band))


def _stack(batch):
    arrays = [_as_leads(x) for x in batch]
    if not arrays:
        raise DimensionError("pairwise_matrix needs a non-empty batch")
    for i, arr in enumerate(arrays):
        if arr.shape != arrays[0].shape:
            raise DimensionError(f"pair (0, {i}): shapes {arrays[0].shape} and {arr.shape} differ")
    return np.ascontiguousarray(np.stack(arrays))


def pairwise_matrix(batch, measure, check_symmetry=False):
    """All-pairs distances with a zero diagonal.

    Each unordered pair is computed once and mirrored. ``check_symmetry``
    also computes the reverse direction and raises if the two disagree.
    """
    X = _stack(batch)
    if measure.z_normalize:
        X = np.stack([znorm_leads(x) for x in X])
    n = X.shape[0]
    ids = tuple(getattr(x, "record_id", None) for x in batch)
    ids = ids if all(i is not None for i in ids) else None
    if measure.kind == "euclidean":
        flat = X.reshape(n, -1)
        values = cdist(flat, flat, "euclidean")
        np.fill_diagonal(values, 0.0)
        return PairwiseDistanceMatrix(values, measure, ids)
    band = _band(measure.band_radius, X.shape[2], X.shape[2])
    ii, jj = np.triu_indices(n, k=1)
    values = np.zeros((n, n))
    if ii.size:
        upper = _dtw_pairs(X, band, ii, jj)
        values[ii, jj] = upper
        values[jj, ii] = upper
        if check_symmetry:
            lower = _dtw_pairs(X, band, jj, ii)
            bad = np.abs(lower - upper) > 1e-6
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise AssertionError(
                    f"asymmetric DTW for pair ({ii[k]}, {jj[k]}): {upper[k]} vs {lower[k]}"
                )
    return PairwiseDistanceMatrix(values, measure, ids)


def save_distance_matrix(path, matrix):
    """Write ``<path>.bin`` (n x n little-endian float32) and a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(matrix.values, dtype="<f4").tobytes())
    sidecar = {
        "n": matrix.n,
        "record_ids": list(matrix.record_ids) if matrix.record_ids is not None else None,
        "measure": {
            "kind": matrix.measure.kind,
            "band_radius": matrix.measure.band_radius,
            "z_normalize": matrix.measure.z_normalize,
        },
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True), encoding="utf-8")


def load_distance_matrix(path):
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    n = sidecar["n"]
    values = np.fromfile(path.with_suffix(".bin"), dtype="<f4")
    if values.size != n * n:
        raise DimensionError(f"{path.with_suffix('.bin')} holds {values.size} values, expected {n * n}")
    ids = sidecar["record_ids"]
    return PairwiseDistanceMatrix(
        values.reshape(n, n).astype(np.float64),
        DistanceMeasure(**sidecar["measure"]),
        tuple(ids) if ids is not None else None,
    )
