"""Causal-LM training loop: frozen base, trainable adapters, Adam, LR schedules."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .adapters import AdapterError
from .data import PAD_ID
from .model import ContextLengthError, Model, forward_logits
from .tensor import ConfigError, Parameter, backward, cross_entropy_next_token, no_grad

IGNORE = -100
SCHEDULES = ("linear", "cosine", "constant")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    base_lr: float = 5e-5
    schedule: str = "linear"
    batch_size: int = 4
    max_seq: int = 1024
    seed: int = 0
    grad_clip_norm: float | None = None

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be non-negative, got {self.total_steps}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.batch_size <= 0 or self.max_seq <= 0:
            raise ConfigError("batch_size and max_seq must be positive")

    def to_json(self) -> dict:
        return {"lr": self.base_lr, "schedule": self.schedule, "batch_size": self.batch_size,
                "max_seq": self.max_seq, "total_steps": self.total_steps, "seed": self.seed,
                "grad_clip_norm": self.grad_clip_norm}

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        known = {"lr", "schedule", "batch_size", "max_seq", "total_steps", "seed", "grad_clip_norm"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        if "total_steps" not in d:
            raise ConfigError("training config needs an explicit 'total_steps'")
        return cls(total_steps=int(d["total_steps"]), base_lr=float(d.get("lr", 5e-5)),
                   schedule=d.get("schedule", "linear"), batch_size=int(d.get("batch_size", 4)),
                   max_seq=int(d.get("max_seq", 1024)), seed=int(d.get("seed", 0)),
                   grad_clip_norm=d.get("grad_clip_norm"))


def lr_at(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.schedule == "constant" or cfg.total_steps == 0:
        return cfg.base_lr
    frac = step / cfg.total_steps
    if cfg.schedule == "linear":
        return cfg.base_lr * (1.0 - frac)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam without weight decay over a fixed set of named parameters."""

    def __init__(self, params: dict[str, Parameter], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if not p.trainable:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            upd = (lr / c1) * self.m[k] / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype)


def as_tokens(item) -> list[int]:
    return list(getattr(item, "tokens", item))


def make_batch(seqs, pad_id: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; targets are inputs shifted by one, pads ignored."""
    n = max(len(s) for s in seqs)
    inputs = np.full((len(seqs), n - 1), pad_id, dtype=np.int64)
    targets = np.full((len(seqs), n - 1), IGNORE, dtype=np.int64)
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=np.int64)
        inputs[i, :len(s) - 1] = s[:-1]
        targets[i, :len(s) - 1] = s[1:]
    return inputs, targets


def _clip(params: dict[str, Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
    if total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params.values():
            p.grad = (p.grad * f).astype(p.dtype)
    return total


def train_step(model: Model, batch, opt: Adam, cfg: TrainConfig, step: int = 0) -> float:
    """One forward/backward/update over the trainable parameters; returns the loss."""
    seqs = [as_tokens(s) for s in batch]
    for s in seqs:
        if len(s) > cfg.max_seq:
            raise ContextLengthError(f"sequence of {len(s)} tokens exceeds max_seq {cfg.max_seq}")
    # right padding never reaches an unmasked position, so any in-vocabulary filler works
    pad = PAD_ID if PAD_ID < model.config.vocab else 0
    inputs, targets = make_batch(seqs, pad)
    loss = cross_entropy_next_token(forward_logits(model, inputs), targets, IGNORE)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step}")
    backward(loss)
    if cfg.grad_clip_norm is not None:
        _clip(opt.params, cfg.grad_clip_norm)
    opt.step(lr_at(step, cfg))
    model.zero_grad()
    return value


def batch_order(n: int, cfg: TrainConfig):
    """Seeded stream of index batches; reshuffles at every pass over the data."""
    rng = np.random.default_rng(cfg.seed)
    pool: list[int] = []
    while True:
        while len(pool) < cfg.batch_size:
            pool.extend(rng.permutation(n).tolist())
        yield pool[:cfg.batch_size]
        pool = pool[cfg.batch_size:]


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None
    wall_clock: float = 0.0
    tokens_seen: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def fit(model: Model, dataset, cfg: TrainConfig, log_every: int = 0) -> TrainReport:
    """Train whatever parameters of ``model`` are currently trainable."""
    data = [as_tokens(s) for s in dataset]
    data = [s for s in data if len(s) >= 2]
    if not data:
        raise TrainingError("dataset is empty (no sequence with at least 2 tokens)")
    if cfg.max_seq > model.config.max_positions:
        raise ConfigError(f"max_seq {cfg.max_seq} exceeds model max_positions "
                          f"{model.config.max_positions}")
    report = TrainReport()
    opt = Adam(model.trainable_parameters())
    start = time.perf_counter()
    order = batch_order(len(data), cfg)
    for step in range(cfg.total_steps):
        batch = [data[i] for i in next(order)]
        report.lrs.append(lr_at(step, cfg))
        report.losses.append(train_step(model, batch, opt, cfg, step))
        report.tokens_seen += sum(len(s) - 1 for s in batch)
        if log_every and (step % log_every == 0 or step == cfg.total_steps - 1):
            print(f"step {step:5d}  lr {report.lrs[-1]:.3e}  loss {report.losses[-1]:.4f}")
    report.wall_clock = time.perf_counter() - start
    return report


def write_loss_csv(path, report: TrainReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for i, (lr, loss) in enumerate(zip(report.lrs, report.losses)):
            w.writerow([i, repr(lr), repr(loss)])


def train_adapter(model: Model, dataset, cfg: TrainConfig, out_dir=None,
                  log_every: int = 0) -> TrainReport:
    """Adapt ``model`` (adapter attached) and optionally write checkpoint + loss curve."""
    if model.adapter is None:
        raise AdapterError("train_adapter needs an attached adapter")
    report = fit(model, dataset, cfg, log_every)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.checkpoint_path = str(checkpoint.save_adapter(out / "adapter.ckpt", model))
        write_loss_csv(out / "loss.csv", report)
    return report


def sequence_nll(model: Model, seq) -> tuple[float, int]:
    """Summed next-token negative log-likelihood and position count for one sequence."""
    s = np.asarray(as_tokens(seq), dtype=np.int64)
    if len(s) < 2:
        return 0.0, 0
    with no_grad():
        logits = forward_logits(model, s[:-1]).data.astype(np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(s) - 1), s[1:]].sum()), len(s) - 1


def perplexity(model: Model, dataset, max_seq: int | None = None) -> float:
    """exp of the mean token-level cross entropy over every predicted position."""
    seqs = [as_tokens(s) for s in dataset]
    if not seqs:
        raise ValueError("perplexity of an empty dataset")
    totals, counts = [], 0
    for s in seqs:
        if max_seq is not None and len(s) > max_seq:
            raise ContextLengthError(f"sequence of {len(s)} tokens exceeds max_seq {max_seq}")
        nll, n = sequence_nll(model, s)
        totals.append(nll)
        counts += n
    if counts == 0:
        raise ValueError("dataset has no predictable positions")
    return math.exp(math.fsum(totals) / counts)
