"""Supervised joint training, self-supervised pretraining, finetuning and the alpha sweep.

Randomness is derived per epoch from the run seed, so a run resumed from its
last checkpoint replays the same batches, triples and dropout masks as an
uninterrupted run:

* ``default_rng([seed, epoch, 0])``  batch order and starvation resamples
* ``default_rng([seed, epoch, 1])``  triplet mining
* ``torch.manual_seed`` per epoch    dropout
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .distance import (DistanceMeasure, PairwiseDistanceMatrix, load_distance_matrix,
                       pairwise_matrix, save_distance_matrix)
from .encoder import (EncoderConfig, HeadConfig, ModelState, backward, encode, head_forward,
                      optimizer_step)
from .errors import (ConfigError, DataError, DimensionError, MinerStarvationError,
                     SigmetricError, TrainingError)
from .metrics import apr, auc, rmse_metric
from .mining import EMBEDDING_KINDS, LABEL_KINDS, MinerSpec, mine, write_triples_csv
from .objectives import ObjectiveSpec, metric_loss, task_loss

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_task", "loss_metric", "val_metric", "seconds")
MIN_BATCH = 3
PREDICT_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    miner: MinerSpec = field(default_factory=MinerSpec)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    batch_size: int = 64
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 0
    distance_cache: str | None = None
    reshuffle_every: int = 5
    max_resample: int = 10
    freeze_encoder: bool = False
    triples_dump_dir: str | None = None
    record_wall_time: bool = True
    distance_downsample: int = 1

    def __post_init__(self):
        if self.batch_size < MIN_BATCH:
            raise ConfigError(f"batch_size must be >= {MIN_BATCH}, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.reshuffle_every < 1 or self.max_resample < 0 or self.distance_downsample < 1:
            raise ConfigError("reshuffle_every and distance_downsample must be >= 1, max_resample >= 0")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        nested = {"miner": _miner_from_dict, "objective": ObjectiveSpec.from_dict,
                  "encoder": EncoderConfig.from_dict, "head": HeadConfig.from_dict}
        for key, build in nested.items():
            if isinstance(data.get(key), dict):
                data[key] = build(data[key])
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _miner_from_dict(data):
    known = {f.name for f in fields(MinerSpec)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown miner keys: {sorted(unknown)}")
    data = dict(data)
    if isinstance(data.get("measure"), dict):
        data["measure"] = DistanceMeasure(**data["measure"])
    return MinerSpec(**data)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    best_value: float | None = None
    last_state: ModelState | None = field(default=None, repr=False)

    def append(self, epoch, loss_task, loss_metric, val_metric, seconds):
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise TrainingError("history epochs must increase")
        for name, v in (("loss_task", loss_task), ("loss_metric", loss_metric), ("val_metric", val_metric)):
            if v is not None and not math.isfinite(v):
                raise TrainingError(f"non-finite {name} at epoch {epoch}: {v}")
        self.records.append({"epoch": epoch, "loss_task": loss_task, "loss_metric": loss_metric,
                             "val_metric": val_metric, "seconds": seconds})

    def column(self, name):
        return [r[name] for r in self.records]

    def __len__(self):
        return len(self.records)

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow(["" if r[c] is None else repr(r[c]) for c in HISTORY_COLUMNS])
        return path

    @classmethod
    def from_records(cls, records):
        h = cls()
        for r in records:
            h.append(**r)
        return h


# ---------------------------------------------------------------------------
# helpers

def _with_leads(cfg, ds):
    d = ds.records[0].d if len(ds) else None
    if cfg.encoder.in_leads is None:
        return cfg.replace(encoder=dataclasses.replace(cfg.encoder, in_leads=d))
    if d is not None and cfg.encoder.in_leads != d:
        raise DimensionError(f"encoder expects {cfg.encoder.in_leads} leads, data has {d}")
    return cfg


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < MIN_BATCH:
        batches.pop()
    return batches


def _seed_torch(seed, epoch):
    torch.manual_seed(int(np.random.SeedSequence([seed, epoch, 3]).generate_state(1)[0]))


def predict(state, ds, chunk=PREDICT_CHUNK):
    """Head outputs (probabilities or mmHg) for every record, eval mode."""
    x = ds.signals()
    state.set_mode("eval")
    out = []
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            out.append(head_forward(state, encode(state, x[i:i + chunk])).reshape(-1).double().numpy())
    return np.concatenate(out) if out else np.empty(0)


def embed(state, ds, chunk=PREDICT_CHUNK):
    x = ds.signals()
    state.set_mode("eval")
    out = []
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            out.append(encode(state, x[i:i + chunk]).double().numpy())
    return np.concatenate(out) if out else np.empty((0, state.encoder_cfg.embedding_dim))


def validation_metric(state, valid, task):
    preds = predict(state, valid)
    if task == "classification":
        return auc(preds, valid.elevated())
    return rmse_metric(preds, valid.mpcwp())


def _improved(value, best, task):
    if best is None:
        return True
    return value > best if task == "classification" else value < best


def _check_disjoint(a, b, what):
    shared = a & b
    if shared:
        raise DataError(f"{len(shared)} patients appear in both {what} (e.g. {sorted(shared)[0]})")


def _task_for(head_cfg, objective):
    expected = {"classification": "cross_entropy", "regression": "rmse"}[head_cfg.task]
    if objective.task_loss != expected:
        raise ConfigError(f"{head_cfg.task} head needs task_loss={expected!r}, got {objective.task_loss!r}")


# ---------------------------------------------------------------------------
# supervised joint training (also used by finetuning)

def train_supervised_joint(train, valid, cfg, init_state=None, resume=None):
    """Jointly minimise task loss + alpha * metric loss; keep the best validation state.

    ``init_state`` seeds the model (used by finetuning). ``resume`` is a
    ``(last_state, best_state)`` pair from an interrupted run with the same config.
    Returns ``(best_state, history)``; ``history.last_state`` is the final state.
    """
    cfg = _with_leads(cfg, train)
    obj, spec = cfg.objective, cfg.miner
    _task_for(cfg.head, obj)
    use_metric = obj.metric_loss != "none"
    if use_metric and spec.kind not in LABEL_KINDS:
        raise ConfigError(f"supervised training needs a label-based miner, got {spec.kind!r}")
    if len(train) < MIN_BATCH or len(valid) == 0:
        raise DataError("training needs at least 3 training records and a non-empty validation split")
    train_p, valid_p = train.patient_set(), valid.patient_set()
    _check_disjoint(train_p, valid_p, "train and validation splits")

    if resume is not None:
        state, best = resume
        history = TrainHistory.from_records(state.meta.get("history", []))
        history.best_epoch = state.meta.get("best_epoch")
        history.best_value = state.meta.get("best_value")
        state.meta["config"] = cfg.to_dict()
        if best is not None:
            best.meta["config"] = cfg.to_dict()
    else:
        if init_state is not None:
            state = init_state
        else:
            state = ModelState(cfg.encoder, cfg.head, lr=cfg.lr, boundary=obj.make_boundary())
            if cfg.head.task == "regression":
                with torch.no_grad():
                    state.head.fc2.bias.fill_(float(train.mpcwp().mean()))
        pre = set(state.meta.get("pretrain_patients", []))
        _check_disjoint(pre, valid_p, "pretraining data and the validation split")
        state.meta.update({"train_patients": sorted(train_p), "valid_patients": sorted(valid_p),
                           "task": cfg.head.task, "config": cfg.to_dict()})
        history, best = TrainHistory(), None

    x_all = train.signals()
    y_bin, y_cont = train.elevated(), train.mpcwp()
    frozen = ("encoder.",) if cfg.freeze_encoder else ()
    alpha = obj.alpha_scale
    metric_counts = use_metric and alpha > 0
    dump = Path(cfg.triples_dump_dir) / "triples.csv" if cfg.triples_dump_dir else None

    for epoch in range(len(history) + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order_rng = np.random.default_rng([cfg.seed, epoch, 0])
        mine_rng = np.random.default_rng([cfg.seed, epoch, 1])
        _seed_torch(cfg.seed, epoch)
        task_losses, metric_losses = [], []
        for idx in _epoch_batches(len(train), cfg.batch_size, order_rng):
            for attempt in range(cfg.max_resample + 1):
                triples = None
                if use_metric and spec.kind not in EMBEDDING_KINDS:
                    triples = mine(spec, mine_rng, binary_labels=y_bin[idx], mpcwp=y_cont[idx])
                state.set_mode("train", freeze_encoder=cfg.freeze_encoder)
                if cfg.freeze_encoder:
                    with torch.no_grad():
                        emb = encode(state, x_all[idx])
                else:
                    emb = encode(state, x_all[idx])
                if use_metric and spec.kind in EMBEDDING_KINDS:
                    triples = mine(spec, mine_rng, binary_labels=y_bin[idx],
                                   embeddings=emb.detach().double().numpy())
                if not (metric_counts and triples.starved):
                    break
                log.info("epoch %d: starved batch, resample %d/%d", epoch, attempt + 1, cfg.max_resample)
                idx = np.sort(order_rng.choice(len(train), size=len(idx), replace=False))
            else:
                raise MinerStarvationError(
                    f"{spec.kind} miner found no admissible triple after {cfg.max_resample} resamples "
                    f"(epoch {epoch})"
                )
            preds = head_forward(state, emb)
            l_task = task_loss(obj, preds, y_bin[idx], y_cont[idx])
            if use_metric:
                l_metric = metric_loss(obj, emb, triples, state.boundary)
                if dump is not None:
                    write_triples_csv(dump, triples, step=state.step_count)
            else:
                l_metric = None
            # alpha = 0 leaves the metric term off the graph so the update is the pure task update
            loss = l_task + alpha * l_metric if metric_counts else l_task
            grads = backward(state, loss)
            optimizer_step(state, grads, frozen=frozen)
            task_losses.append(float(l_task.detach()))
            metric_losses.append(float(l_metric.detach()) if l_metric is not None else 0.0)
        if not task_losses:
            raise TrainingError("no training batch of at least 3 records")
        val = validation_metric(state, valid, cfg.head.task)
        seconds = time.perf_counter() - t0 if cfg.record_wall_time else 0.0
        history.append(epoch, float(np.mean(task_losses)), float(np.mean(metric_losses)), val, seconds)
        log.info("epoch %d task %.4f metric %.4f val %.4f", epoch, task_losses[-1], metric_losses[-1], val)
        if _improved(val, history.best_value, cfg.head.task):
            history.best_epoch, history.best_value = epoch, val
            best = None  # re-cloned below after meta is updated
        state.meta.update({"history": history.records, "best_epoch": history.best_epoch,
                           "best_value": history.best_value, "epochs_done": epoch})
        if best is None:
            best = state.clone()
    history.last_state = state
    return best, history


# ---------------------------------------------------------------------------
# self-supervised pretraining

def _distance_inputs(x, downsample):
    return np.ascontiguousarray(x[:, :, ::downsample]) if downsample > 1 else x


def _cache_key(record_ids, measure, downsample):
    h = hashlib.sha256()
    h.update(repr((measure.kind, measure.band_radius, measure.z_normalize, downsample)).encode())
    for rid in record_ids:
        h.update(rid.encode())
        h.update(b"\0")
    return h.hexdigest()[:24]


class DistanceCache:
    """Batch distance matrices keyed by batch composition, in memory and optionally on disk.

    Matrices are rounded to float32 on first computation so cached and
    uncached runs see identical values.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self.memory = {}
        self.hits = 0
        self.misses = 0

    def get(self, x_batch, record_ids, measure, downsample):
        key = _cache_key(record_ids, measure, downsample)
        if key in self.memory:
            self.hits += 1
            return self.memory[key]
        path = self.directory / key if self.directory else None
        if path is not None and path.with_suffix(".bin").exists():
            mat = load_distance_matrix(path)
            if mat.record_ids != tuple(record_ids):
                raise DataError(f"distance cache entry {path} belongs to a different batch")
            self.hits += 1
        else:
            raw = pairwise_matrix(_distance_inputs(x_batch, downsample), measure)
            mat = PairwiseDistanceMatrix(raw.values.astype(np.float32).astype(np.float64),
                                         measure, tuple(record_ids))
            if path is not None:
                save_distance_matrix(path, mat)
            self.misses += 1
        self.memory[key] = mat
        return mat


def pretrain_selfsup(unlabeled, cfg, resume=None, cache=None):
    """Triplet pretraining with positives ranked by input-space distance.

    Batch membership is fixed for ``reshuffle_every`` epochs so distance
    matrices are reused. Labels are never read: ``unlabeled`` carries none.
    Returns ``(state, history)``; history ``val_metric`` is empty (no labels).
    """
    cfg = _with_leads(cfg, unlabeled)
    obj, spec = cfg.objective, cfg.miner
    if spec.kind != "distance_ranked":
        raise ConfigError(f"pretraining needs the distance_ranked miner, got {spec.kind!r}")
    if obj.task_loss != "none":
        raise ConfigError("pretraining forbids a task loss")
    if obj.metric_loss == "none":
        raise ConfigError("pretraining needs a metric loss")
    if len(unlabeled) < MIN_BATCH:
        raise DataError("pretraining needs at least 3 records")
    cache = cache if cache is not None else DistanceCache(cfg.distance_cache)

    if resume is not None:
        state = resume
        history = TrainHistory.from_records(state.meta.get("history", []))
        state.meta["config"] = cfg.to_dict()
    else:
        state = ModelState(cfg.encoder, cfg.head, lr=cfg.lr, boundary=obj.make_boundary())
        state.meta.update({"pretrain_patients": sorted(unlabeled.patient_set()),
                           "task": "pretrain", "config": cfg.to_dict()})
        history = TrainHistory()

    x_all = unlabeled.signals()
    ids = unlabeled.record_ids
    dump = Path(cfg.triples_dump_dir) / "triples.csv" if cfg.triples_dump_dir else None
    for epoch in range(len(history) + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        period = (epoch - 1) // cfg.reshuffle_every
        batches = _epoch_batches(len(unlabeled), cfg.batch_size,
                                 np.random.default_rng([cfg.seed, period, 2]))
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(batches))
        mine_rng = np.random.default_rng([cfg.seed, epoch, 1])
        _seed_torch(cfg.seed, epoch)
        losses = []
        for b in order:
            idx = np.sort(batches[b])
            xb = x_all[idx]
            dist = cache.get(xb, [ids[i] for i in idx], spec.measure, cfg.distance_downsample)
            triples = mine(spec, mine_rng, dist=dist)
            state.set_mode("train")
            emb = encode(state, xb)
            loss = metric_loss(obj, emb, triples, state.boundary)
            if dump is not None:
                write_triples_csv(dump, triples, step=state.step_count)
            optimizer_step(state, backward(state, loss))
            losses.append(float(loss.detach()))
        seconds = time.perf_counter() - t0 if cfg.record_wall_time else 0.0
        history.append(epoch, 0.0, float(np.mean(losses)), None, seconds)
        log.info("pretrain epoch %d loss %.4f", epoch, losses[-1])
        state.meta.update({"history": history.records, "epochs_done": epoch})
    state.set_mode("eval")
    history.last_state = state
    return state, history


# ---------------------------------------------------------------------------
# finetuning and the alpha sweep

def finetune(pretrained, train, valid, cfg, resume=None):
    """Attach a fresh head and train with the task loss only.

    ``pretrained=None`` gives the random-initialization baseline. The encoder
    is trainable unless ``cfg.freeze_encoder`` is set (linear probing).
    """
    cfg = cfg.replace(objective=dataclasses.replace(cfg.objective, metric_loss="none"))
    if resume is not None:
        return train_supervised_joint(train, valid, cfg, resume=resume)
    cfg = _with_leads(cfg, train)
    if pretrained is None:
        init = ModelState(cfg.encoder, cfg.head, lr=cfg.lr)
    else:
        enc_cfg = pretrained.encoder_cfg
        if enc_cfg.embedding_dim != cfg.encoder.embedding_dim:
            raise DimensionError(
                f"pretrained encoder emits {enc_cfg.embedding_dim}-dim embeddings, "
                f"head config expects {cfg.encoder.embedding_dim}"
            )
        if enc_cfg.in_leads != cfg.encoder.in_leads:
            raise DimensionError(f"pretrained encoder takes {enc_cfg.in_leads} leads, data has {cfg.encoder.in_leads}")
        init = ModelState(enc_cfg, cfg.head, lr=cfg.lr)
        init.encoder.load_state_dict(pretrained.encoder.state_dict())
        init.meta["pretrain_patients"] = list(pretrained.meta.get("pretrain_patients", []))
        cfg = cfg.replace(encoder=enc_cfg)
    if cfg.head.task == "regression":
        with torch.no_grad():
            init.head.fc2.bias.fill_(float(train.mpcwp().mean()))
    init.meta["pretrained"] = pretrained is not None
    return train_supervised_joint(train, valid, cfg, init_state=init)


@dataclass
class SweepRow:
    alpha: float
    auc: float | None = None
    apr: float | None = None
    rmse: float | None = None
    errors: dict = field(default_factory=dict)
    best_classification: bool = False
    best_regression: bool = False


def sweep_alpha(grid, base_cfg, train, valid, regression_miner="continuous_label", tasks=("classification", "regression")):
    """One classification and one regression training per alpha, shared seed.

    Failures are recorded per cell and the sweep continues. The best row per
    task (highest validation AUC, lowest validation RMSE) is marked.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("alpha grid is empty")
    rows = []
    for alpha in grid:
        row = SweepRow(float(alpha))
        obj = dataclasses.replace(base_cfg.objective, alpha_scale=float(alpha))
        if "classification" in tasks:
            cfg = base_cfg.replace(objective=dataclasses.replace(obj, task_loss="cross_entropy"),
                                   head=dataclasses.replace(base_cfg.head, task="classification"))
            try:
                state, _ = train_supervised_joint(train, valid, cfg)
                preds = predict(state, valid)
                row.auc = auc(preds, valid.elevated())
                row.apr = apr(preds, valid.elevated())
            except SigmetricError as exc:
                row.errors["classification"] = f"{type(exc).__name__}: {exc}"
        if "regression" in tasks:
            miner = base_cfg.miner
            if regression_miner is not None:
                miner = dataclasses.replace(miner, kind=regression_miner)
            cfg = base_cfg.replace(objective=dataclasses.replace(obj, task_loss="rmse"), miner=miner,
                                   head=dataclasses.replace(base_cfg.head, task="regression"))
            try:
                state, _ = train_supervised_joint(train, valid, cfg)
                row.rmse = rmse_metric(predict(state, valid), valid.mpcwp())
            except SigmetricError as exc:
                row.errors["regression"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    aucs = [(r.auc, i) for i, r in enumerate(rows) if r.auc is not None]
    if aucs:
        rows[max(aucs, key=lambda t: (t[0], -t[1]))[1]].best_classification = True
    rmses = [(r.rmse, i) for i, r in enumerate(rows) if r.rmse is not None]
    if rmses:
        rows[min(rmses)[1]].best_regression = True
    return rows


def write_sweep_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ("alpha", "auc", "apr", "rmse", "best_classification", "best_regression", "errors")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r.alpha), "" if r.auc is None else repr(r.auc),
                        "" if r.apr is None else repr(r.apr), "" if r.rmse is None else repr(r.rmse),
                        int(r.best_classification), int(r.best_regression),
                        "; ".join(f"{k}: {v}" for k, v in sorted(r.errors.items()))])
    return path
