"""Test-split evaluation: bootstrapped task metrics, Recall@1 and the subgroup audit."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, UndefinedMetricError
from .metrics import (age_bin_masks, apr, auc, average_pairwise_gap, bootstrap, gender_gap,
                      knn_same_group_proportion, kruskal_wallis, recall_at_k, rmse_metric)
from .training import embed, predict

log = logging.getLogger(__name__)

DEFAULT_KS = (2, 3, 5)
CSV_COLUMNS = ("metric", "subgroup", "estimate", "boot_mean", "boot_std")


@dataclass
class MetricReport:
    metric: str
    estimate: float
    boot_mean: float | None = None
    boot_std: float | None = None
    n_replicates: int = 0
    n_redraws: int = 0
    subgroups: dict = field(default_factory=dict)   # label -> (estimate, mean, std)
    gaps: dict = field(default_factory=dict)


@dataclass
class EvaluationReport:
    task: str
    n_records: int
    metrics: list = field(default_factory=list)
    recall_at_1: float | None = None
    knn_same_group: dict = field(default_factory=dict)
    kruskal_wallis: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def rows(self):
        """Flat ``metric,subgroup,estimate,boot_mean,boot_std`` rows."""
        out = []
        for m in self.metrics:
            out.append((m.metric, "all", m.estimate, m.boot_mean, m.boot_std))
            for label, (est, mean, std) in m.subgroups.items():
                out.append((m.metric, label, est, mean, std))
            for name, value in m.gaps.items():
                out.append((f"{m.metric}_{name}", "gap", value, None, None))
        if self.recall_at_1 is not None:
            out.append(("recall_at_1", "all", self.recall_at_1, None, None))
        for k, value in self.knn_same_group.items():
            out.append((f"knn_same_gender_k{k}", "female", value, None, None))
        for name, (h, p) in self.kruskal_wallis.items():
            out.append((f"kruskal_wallis_H_{name}", "", h, None, None))
            out.append((f"kruskal_wallis_p_{name}", "", p, None, None))
        return out

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json(), encoding="utf-8")
        with open(out_dir / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for row in self.rows():
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        return out_dir


def _metric_fns(task):
    if task == "classification":
        return {"auc": auc, "apr": apr}
    return {"rmse": rmse_metric}


def _seed(seed, *path):
    return [int(seed), *path]


def _subgroup_bootstraps(fn, data, masks, n_replicates, seed, tag):
    """Point estimate and bootstrap per subgroup; undefined subgroups are skipped."""
    out = {}
    for j, (label, mask) in enumerate(masks.items()):
        if not mask.any():
            warnings.warn(f"subgroup {label} is empty; excluded", stacklevel=3)
            continue
        sub = tuple(np.asarray(a)[mask] for a in data)
        try:
            est = fn(*sub)
            res = bootstrap(fn, sub, n_replicates, seed=_seed(seed, tag, j + 1))
        except UndefinedMetricError as exc:
            warnings.warn(f"subgroup {label} excluded: {exc}", stacklevel=3)
            continue
        out[label] = (est, res)
    return out


def check_test_provenance(state, test):
    """The test split must share no patient with the checkpoint's training or validation data."""
    used = set(state.meta.get("train_patients", [])) | set(state.meta.get("valid_patients", []))
    used |= set(state.meta.get("pretrain_patients", []))
    shared = used & test.patient_set()
    if shared:
        raise DataError(f"{len(shared)} test patients were seen in training (e.g. {sorted(shared)[0]})")


def evaluate_predictions(task, preds, test, embeddings=None, subgroups=False, n_replicates=1000,
                         seed=0, ks=DEFAULT_KS):
    """Build the report from precomputed head outputs and embeddings."""
    data = (preds, test.elevated() if task == "classification" else test.mpcwp())
    report = EvaluationReport(task=task, n_records=len(test))
    genders, ages = test.genders(), test.ages()
    gender_masks = {"male": genders == "male", "female": genders == "female"}
    age_masks = age_bin_masks(ages)
    for i, (name, fn) in enumerate(_metric_fns(task).items()):
        est = fn(*data)
        res = bootstrap(fn, data, n_replicates, seed=_seed(seed, i, 0))
        m = MetricReport(name, est, res.mean, res.std, res.n_replicates, res.n_redraws)
        if subgroups:
            g = _subgroup_bootstraps(fn, data, gender_masks, n_replicates, seed, 100 + i)
            a = _subgroup_bootstraps(fn, data, age_masks, n_replicates, seed, 200 + i)
            for label, (e, r) in {**g, **a}.items():
                m.subgroups[label] = (e, r.mean, r.std)
            if "male" in g and "female" in g:
                gap = gender_gap(g["male"][0], g["female"][0])
                m.gaps["gender_gap"] = gap
                m.gaps["gender_gap_abs"] = abs(gap)
                report.kruskal_wallis[f"{name}_gender"] = kruskal_wallis(
                    [g["male"][1].replicates, g["female"][1].replicates])
            if len(a) >= 2:
                m.gaps["age_gap"] = average_pairwise_gap([e for e, _ in a.values()])
                report.kruskal_wallis[f"{name}_age"] = kruskal_wallis([r.replicates for _, r in a.values()])
        report.metrics.append(m)
    if embeddings is not None and len(test) > 1:
        report.recall_at_1 = recall_at_k(embeddings, test.elevated(), 1)
        if subgroups:
            flags = (genders == "female").astype(np.int64)
            for k in ks:
                try:
                    report.knn_same_group[str(k)] = knn_same_group_proportion(embeddings, flags, k, 1)
                except UndefinedMetricError as exc:
                    warnings.warn(f"k-NN proportion at k={k} skipped: {exc}", stacklevel=2)
    return report


def evaluate(state, test, subgroups=False, n_replicates=1000, seed=0, ks=DEFAULT_KS):
    """Run the model on ``test`` and build an :class:`EvaluationReport`."""
    check_test_provenance(state, test)
    task = state.head_cfg.task
    preds = predict(state, test)
    emb = embed(state, test)
    return evaluate_predictions(task, preds, test, emb, subgroups, n_replicates, seed, ks)
