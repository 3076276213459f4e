"""Metric-learning and task losses, and their joint combination.

All losses are torch expressions, so gradients come from autograd. Reductions
are means over triples, pairs or samples.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .encoder import LearnableBoundary
from .errors import ConfigError

log = logging.getLogger(__name__)

METRIC_LOSSES = ("triplet_raw", "triplet_hinge", "margin", "angular", "npair", "none")
TASK_LOSSES = ("cross_entropy", "rmse", "none")
ALPHA_GRID = (0.1, 1.0, 2.0, 3.0, 10.0)
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ObjectiveSpec:
    metric_loss: str = "triplet_hinge"
    task_loss: str = "cross_entropy"
    alpha_scale: float = 1.0
    triplet_margin: float = 0.2
    margin_beta_init: float = 1.2
    margin_beta_lr: float = 0.0005
    margin_gamma: float = 0.2
    margin_literal: bool = False
    angular_margin: float = math.pi / 4
    angular_lambda: float = 2.0
    npair_nu: float = 0.005
    normalize_embeddings: bool = False
    sweep_mode: bool = False

    def __post_init__(self):
        if self.metric_loss not in METRIC_LOSSES:
            raise ConfigError(f"metric_loss must be one of {METRIC_LOSSES}, got {self.metric_loss!r}")
        if self.task_loss not in TASK_LOSSES:
            raise ConfigError(f"task_loss must be one of {TASK_LOSSES}, got {self.task_loss!r}")
        if self.alpha_scale < 0:
            raise ConfigError("alpha_scale must be non-negative")
        if self.sweep_mode and self.alpha_scale not in ALPHA_GRID:
            raise ConfigError(f"in sweep mode alpha_scale must be one of {ALPHA_GRID}")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown objective keys: {sorted(unknown)}")
        return cls(**data)

    def make_boundary(self, dtype=torch.float32):
        if self.metric_loss != "margin":
            return None
        return LearnableBoundary(self.margin_beta_init, self.margin_beta_lr, dtype)


def _prep(emb, normalize):
    return F.normalize(emb, dim=1) if normalize else emb


def _index(triples, device):
    t = torch.as_tensor(getattr(triples, "triples", triples), dtype=torch.long, device=device)
    return t.reshape(-1, 3)


def _zero(emb):
    # keeps the graph connected so backward yields zero gradients
    return emb.sum() * 0.0


def triplet_loss(emb, triples, variant="hinge", margin=0.2, normalize=False):
    """Mean of ``d_ap - d_an`` (raw) or ``max(0, d_ap - d_an + margin)`` (hinge), unsquared norms."""
    t = _index(triples, emb.device)
    if len(t) == 0:
        log.debug("triplet loss on an empty triple set")
        return _zero(emb)
    e = _prep(emb, normalize)
    d_ap = torch.linalg.vector_norm(e[t[:, 0]] - e[t[:, 1]], dim=1)
    d_an = torch.linalg.vector_norm(e[t[:, 0]] - e[t[:, 2]], dim=1)
    if variant == "raw":
        return (d_ap - d_an).mean()
    if variant == "hinge":
        return F.relu(d_ap - d_an + margin).mean()
    raise ConfigError(f"triplet variant must be 'raw' or 'hinge', got {variant!r}")


def triples_to_pairs(triples):
    """(i, j, same) arrays: each triple gives an (anchor, positive) and an (anchor, negative) pair."""
    t = torch.as_tensor(getattr(triples, "triples", triples), dtype=torch.long).reshape(-1, 3)
    i = torch.cat([t[:, 0], t[:, 0]])
    j = torch.cat([t[:, 1], t[:, 2]])
    same = torch.cat([torch.ones(len(t), dtype=torch.bool), torch.zeros(len(t), dtype=torch.bool)])
    return i, j, same


def margin_loss(emb, pairs, boundary, gamma=0.2, literal=False, normalize=False):
    """Learnable-boundary loss over labelled pairs.

    Default form: mean of ``max(0, gamma + s * (d - beta))`` with ``s = +1`` for
    same-label pairs and ``-1`` otherwise, ``d`` unsquared. ``literal`` uses
    squared distances without the hinge: mean of ``s * (d**2 - beta) + gamma``.
    """
    i, j, same = pairs
    beta = boundary.beta if isinstance(boundary, LearnableBoundary) else boundary
    if len(i) == 0:
        return _zero(emb) + 0.0 * beta
    e = _prep(emb, normalize)
    diff = e[i.to(emb.device)] - e[j.to(emb.device)]
    s = torch.where(same, 1.0, -1.0).to(emb.dtype).to(emb.device)
    if literal:
        d2 = (diff * diff).sum(dim=1)
        return (s * (d2 - beta) + gamma).mean()
    d = torch.linalg.vector_norm(diff, dim=1)
    return F.relu(gamma + s * (d - beta)).mean()


def npair_loss(emb, triples, nu=0.005, normalize=False):
    """Mean softplus(f_a.f_n - f_a.f_p) plus nu/b times the summed squared embedding norms."""
    t = _index(triples, emb.device)
    e = _prep(emb, normalize)
    sq = (e * e).sum()
    if len(t) == 0:
        return nu * sq / e.shape[0]
    fa, fp, fn = e[t[:, 0]], e[t[:, 1]], e[t[:, 2]]
    b = len(t)
    term = F.softplus((fa * fn).sum(1) - (fa * fp).sum(1)).sum() / b
    return term + nu * sq / b


def angular_loss(emb, triples, angle=math.pi / 4, lam=2.0, nu=0.005, normalize=False):
    """n-pair loss plus lambda/b * sum softplus(4 tan^2(a) (f_a+f_p).f_n - 2 (1+tan^2(a)) f_a.f_p)."""
    base = npair_loss(emb, triples, nu, normalize)
    t = _index(triples, emb.device)
    if len(t) == 0:
        return base
    e = _prep(emb, normalize)
    fa, fp, fn = e[t[:, 0]], e[t[:, 1]], e[t[:, 2]]
    tan2 = math.tan(angle) ** 2
    x = 4.0 * tan2 * ((fa + fp) * fn).sum(1) - 2.0 * (1.0 + tan2) * (fa * fp).sum(1)
    return base + lam * F.softplus(x).sum() / len(t)


def cross_entropy(probabilities, binary_labels):
    """Mean binary cross-entropy on clamped probabilities."""
    p = probabilities.reshape(-1).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = torch.as_tensor(binary_labels, dtype=p.dtype, device=p.device).reshape(-1)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def rmse_loss(predictions, targets):
    pred = predictions.reshape(-1)
    y = torch.as_tensor(targets, dtype=pred.dtype, device=pred.device).reshape(-1)
    return torch.sqrt(((y - pred) ** 2).mean())


def joint_objective(task_loss_value, metric_loss_value, alpha_scale):
    if alpha_scale < 0:
        raise ConfigError("alpha_scale must be non-negative")
    return task_loss_value + alpha_scale * metric_loss_value


def metric_loss(spec, emb, triples, boundary=None):
    """Evaluate the metric loss named by ``spec.metric_loss``."""
    kind = spec.metric_loss
    norm = spec.normalize_embeddings
    if kind == "triplet_hinge":
        return triplet_loss(emb, triples, "hinge", spec.triplet_margin, norm)
    if kind == "triplet_raw":
        return triplet_loss(emb, triples, "raw", spec.triplet_margin, norm)
    if kind == "margin":
        if boundary is None:
            raise ConfigError("margin loss needs a LearnableBoundary")
        return margin_loss(emb, triples_to_pairs(triples), boundary, spec.margin_gamma,
                           spec.margin_literal, norm)
    if kind == "angular":
        return angular_loss(emb, triples, spec.angular_margin, spec.angular_lambda, spec.npair_nu, norm)
    if kind == "npair":
        return npair_loss(emb, triples, spec.npair_nu, norm)
    raise ConfigError(f"no metric loss configured ({kind!r})")


def task_loss(spec, predictions, binary_labels, mpcwp):
    if spec.task_loss == "cross_entropy":
        return cross_entropy(predictions, binary_labels)
    if spec.task_loss == "rmse":
        return rmse_loss(predictions, mpcwp)
    raise ConfigError("no task loss configured")
