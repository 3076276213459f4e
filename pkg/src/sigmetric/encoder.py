"""1-D residual encoder, task head, model state, gradients and checkpoints.

Reverse-mode differentiation is torch autograd: the graph recorded during
``encode``/``head_forward`` plays the role of the tape and ``backward``
replays it.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DatasetFormatError, DimensionError, TrainingError

TASKS = ("classification", "regression")
CHECKPOINT_MAGIC = b"SGMCKPT1"


def _from_dict(cls, data, what):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class EncoderConfig:
    in_leads: int | None = None
    embedding_dim: int = 128
    n_residual_blocks: int = 4
    channels_per_block: tuple = (16, 32, 64, 64)
    kernel_size: int = 7
    stem_stride: int = 4
    use_batchnorm: bool = True
    zero_init_residual: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels_per_block", tuple(int(c) for c in self.channels_per_block))
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.n_residual_blocks < 1:
            raise ConfigError("n_residual_blocks must be >= 1")
        if len(self.channels_per_block) != self.n_residual_blocks:
            raise ConfigError(
                f"channels_per_block has {len(self.channels_per_block)} entries for "
                f"{self.n_residual_blocks} blocks"
            )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if self.stem_stride < 1:
            raise ConfigError("stem_stride must be >= 1")

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "encoder")


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 64
    dropout_rate: float = 0.3
    task: str = "classification"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"head task must be one of {TASKS}, got {self.task!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "head")


def _he_uniform(module, generator):
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _norm(channels, use_batchnorm):
    return nn.BatchNorm1d(channels) if use_batchnorm else nn.Identity()


class ResidualBlock1d(nn.Module):
    def __init__(self, cin, cout, kernel_size, stride=1, use_batchnorm=True):
        super().__init__()
        pad = kernel_size // 2
        bias = not use_batchnorm
        self.conv1 = nn.Conv1d(cin, cout, kernel_size, stride, pad, bias=bias)
        self.bn1 = _norm(cout, use_batchnorm)
        self.conv2 = nn.Conv1d(cout, cout, kernel_size, 1, pad, bias=bias)
        self.bn2 = _norm(cout, use_batchnorm)
        if cin == cout and stride == 1:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(
                nn.Conv1d(cin, cout, 1, stride, bias=bias), _norm(cout, use_batchnorm)
            )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class Encoder1d(nn.Module):
    """Stem conv, residual blocks (stride 2 after the first), global average pool, linear projection."""

    def __init__(self, cfg):
        super().__init__()
        if cfg.in_leads is None:
            raise ConfigError("encoder in_leads is unset")
        self.cfg = cfg
        ch = cfg.channels_per_block
        k = cfg.kernel_size
        self.stem = nn.Conv1d(cfg.in_leads, ch[0], k, cfg.stem_stride, k // 2, bias=not cfg.use_batchnorm)
        self.stem_bn = _norm(ch[0], cfg.use_batchnorm)
        blocks = []
        cin = ch[0]
        for i, cout in enumerate(ch):
            blocks.append(ResidualBlock1d(cin, cout, k, 1 if i == 0 else 2, cfg.use_batchnorm))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.proj = nn.Linear(cin, cfg.embedding_dim)
        gen = torch.Generator().manual_seed(int(cfg.seed))
        _he_uniform(self, gen)
        if cfg.zero_init_residual:
            for b in self.blocks:
                nn.init.zeros_(b.conv2.weight)

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != self.cfg.in_leads:
            raise DimensionError(
                f"encoder expects (B, {self.cfg.in_leads}, T) input, got {tuple(x.shape)}"
            )
        h = F.relu(self.stem_bn(self.stem(x)))
        h = self.blocks(h)
        return self.proj(h.mean(dim=-1))


class Head(nn.Module):
    """Two fully-connected layers with batchnorm, ReLU and dropout between them."""

    def __init__(self, embedding_dim, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        self.embedding_dim = embedding_dim
        self.fc1 = nn.Linear(embedding_dim, cfg.hidden_dim)
        self.bn = nn.BatchNorm1d(cfg.hidden_dim)
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.fc2 = nn.Linear(cfg.hidden_dim, 1)
        _he_uniform(self, torch.Generator().manual_seed(int(seed) + 7919))

    def forward(self, emb):
        if emb.dim() != 2 or emb.shape[1] != self.embedding_dim:
            raise DimensionError(f"head expects (B, {self.embedding_dim}) embeddings, got {tuple(emb.shape)}")
        out = self.fc2(self.dropout(F.relu(self.bn(self.fc1(emb)))))
        return torch.sigmoid(out) if self.cfg.task == "classification" else out


class LearnableBoundary:
    """Margin-loss boundary beta with its own plain gradient-descent update."""

    def __init__(self, beta=1.2, lr=0.0005, dtype=torch.float32):
        self.beta = torch.tensor(float(beta), dtype=dtype, requires_grad=True)
        self.lr = float(lr)

    def step(self, grad):
        if grad is None:
            return
        if not torch.isfinite(grad).all():
            raise TrainingError("non-finite gradient for margin boundary beta")
        with torch.no_grad():
            self.beta -= self.lr * grad


class ModelState:
    """Encoder, head, optimizer moments, mode and step count for one training loop."""

    def __init__(self, encoder_cfg, head_cfg, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 dtype=torch.float32, boundary=None):
        self.encoder_cfg = encoder_cfg
        self.head_cfg = head_cfg
        self.encoder = Encoder1d(encoder_cfg).to(dtype)
        self.head = Head(encoder_cfg.embedding_dim, head_cfg, seed=encoder_cfg.seed).to(dtype)
        self.dtype = dtype
        self.optimizer = torch.optim.Adam(self.parameter_list(), lr=lr, betas=tuple(betas), eps=eps)
        self.boundary = boundary
        self.step_count = 0
        self.mode = "eval"
        self.meta = {}
        self.set_mode("eval")

    def named_parameters(self):
        out = {}
        for prefix, mod in (("encoder", self.encoder), ("head", self.head)):
            for name, p in mod.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out

    def parameter_list(self):
        return list(self.named_parameters().values())

    def set_mode(self, mode, freeze_encoder=False):
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.head.train(mode == "train")
        self.encoder.train(mode == "train" and not freeze_encoder)
        return self

    @property
    def hyper(self):
        g = self.optimizer.param_groups[0]
        return {"lr": g["lr"], "beta1": g["betas"][0], "beta2": g["betas"][1], "eps": g["eps"]}

    def clone(self):
        return copy.deepcopy(self)

    def parameters_equal(self, other):
        a, b = self.state_tensors(), other.state_tensors()
        return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)

    def state_tensors(self):
        """Every tensor a checkpoint stores, keyed by name."""
        out = {}
        for prefix, mod in (("encoder", self.encoder), ("head", self.head)):
            for name, t in mod.state_dict().items():
                out[f"{prefix}.{name}"] = t
        named = self.named_parameters()
        for name, p in named.items():
            st = self.optimizer.state.get(p)
            if st:
                out[f"optim.{name}.exp_avg"] = st["exp_avg"]
                out[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
                out[f"optim.{name}.step"] = torch.as_tensor(st["step"]).reshape(())
        if self.boundary is not None:
            out["boundary.beta"] = self.boundary.beta.detach()
        return out


def as_tensor_batch(batch, dtype=torch.float32):
    if isinstance(batch, torch.Tensor):
        return batch.to(dtype)
    if isinstance(batch, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(batch)).to(dtype)
    arr = np.stack([getattr(r, "leads", r) for r in batch])
    return torch.from_numpy(arr).to(dtype)


def encode(state, batch):
    """(B, D) embeddings; the autograd graph is kept when grad mode is on."""
    x = as_tensor_batch(batch, state.dtype)
    if x.shape[0] < 1:
        raise DimensionError("encode needs at least one record")
    return state.encoder(x)


def head_forward(state, embeddings):
    return state.head(embeddings)


def backward(state, loss, include_boundary=True):
    """Gradients of ``loss`` for every parameter; parameters off the graph get zeros."""
    named = state.named_parameters()
    targets = list(named.values())
    if include_boundary and state.boundary is not None:
        targets.append(state.boundary.beta)
    if not loss.requires_grad:
        grads = [torch.zeros_like(t) for t in targets]
    else:
        grads = torch.autograd.grad(loss, targets, allow_unused=True)
        grads = [torch.zeros_like(t) if g is None else g for t, g in zip(targets, grads)]
    out = dict(zip(named.keys(), grads))
    if include_boundary and state.boundary is not None:
        out["boundary.beta"] = grads[-1]
    return out


def optimizer_step(state, gradients, lr=None, beta1=None, beta2=None, eps=None, frozen=()):
    """One Adam step (bias-corrected) over the model parameters."""
    group = state.optimizer.param_groups[0]
    if lr is not None:
        group["lr"] = lr
    if beta1 is not None or beta2 is not None:
        b1, b2 = group["betas"]
        group["betas"] = (b1 if beta1 is None else beta1, b2 if beta2 is None else beta2)
    if eps is not None:
        group["eps"] = eps
    named = state.named_parameters()
    for name, p in named.items():
        if name not in gradients:
            raise TrainingError(f"missing gradient for parameter {name}")
        g = gradients[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {tuple(g.shape)} does not match parameter {name} {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
        if frozen and name.startswith(tuple(frozen)):
            p.grad = torch.zeros_like(p)
        else:
            p.grad = g.detach().clone()
    state.optimizer.step()
    for p in named.values():
        p.grad = None
    if state.boundary is not None and "boundary.beta" in gradients:
        state.boundary.step(gradients["boundary.beta"])
    state.step_count += 1
    return state


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state, path):
    """Magic, uint64 header length, JSON header, then float32 little-endian tensors."""
    tensors = state.state_tensors()
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format_version": 1,
        "encoder": asdict(state.encoder_cfg),
        "head": asdict(state.head_cfg),
        "optimizer": state.hyper,
        "boundary_lr": state.boundary.lr if state.boundary is not None else None,
        "step_count": state.step_count,
        "meta": state.meta,
        "tensors": table,
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head_bytes)))
        fh.write(head_bytes)
        for b in blobs:
            fh.write(b)
    return path


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise DatasetFormatError(f"{path} is not a checkpoint", offset=0)
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8")), len(CHECKPOINT_MAGIC) + 8 + n


def load_checkpoint(path):
    header, start = read_checkpoint_header(path)
    raw = Path(path).read_bytes()[start:]
    enc_cfg = EncoderConfig(**header["encoder"])
    head_cfg = HeadConfig(**header["head"])
    opt = header["optimizer"]
    state = ModelState(enc_cfg, head_cfg, lr=opt["lr"], betas=(opt["beta1"], opt["beta2"]), eps=opt["eps"])
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    for prefix, mod in (("encoder", state.encoder), ("head", state.head)):
        sd = {}
        for name, ref in mod.state_dict().items():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise DatasetFormatError(f"checkpoint missing tensor {key}")
            sd[name] = tensors[key].to(ref.dtype).reshape(ref.shape)
        mod.load_state_dict(sd)
    for name, p in state.named_parameters().items():
        if f"optim.{name}.exp_avg" in tensors:
            state.optimizer.state[p] = {
                "step": tensors[f"optim.{name}.step"].to(torch.float32).reshape(()),
                "exp_avg": tensors[f"optim.{name}.exp_avg"].to(p.dtype).reshape(p.shape),
                "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"].to(p.dtype).reshape(p.shape),
            }
    if "boundary.beta" in tensors:
        state.boundary = LearnableBoundary(float(tensors["boundary.beta"]), header.get("boundary_lr") or 0.0005)
    state.step_count = header["step_count"]
    state.meta = header["meta"]
    return state
