"""Desk-scale episodic training with hand-written gradients."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import layers as L
from .diagnostics import miou
from .network import HmNetConfig, NetWeights, episode_loss, hmnet_forward

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 1
    lr: float = 3e-3
    optimizer: str = "adam"  # adam | sgd
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0
    warmup: int = 50
    schedule: str = "cosine"  # cosine | constant
    min_lr_frac: float = 0.05
    eval_every: int = 500
    val_limit: int | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("steps, batch size and learning rate must be non-negative/positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup, then constant or cosine decay to ``min_lr_frac * lr``."""
    lr = cfg.lr
    if cfg.warmup and step < cfg.warmup:
        return lr * (step + 1) / cfg.warmup
    if cfg.schedule == "constant" or cfg.steps <= cfg.warmup + 1:
        return lr
    frac = (step - cfg.warmup) / (cfg.steps - cfg.warmup - 1)
    lo = cfg.min_lr_frac * lr
    return lo + 0.5 * (lr - lo) * (1 + np.cos(np.pi * frac))


class Adam:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        c = self.cfg
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / (1 - c.beta1 ** self.t)
            vhat = self.v[k] / (1 - c.beta2 ** self.t)
            out[k] = p - lr * mhat / (np.sqrt(vhat) + c.eps)
        return out


class SGD:
    def __init__(self, params: dict, cfg: TrainConfig):
        pass

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        return {k: p - lr * grads[k] for k, p in params.items()}


def _clip(grads: dict, max_norm: float) -> dict:
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def evaluate(episodes, weights: NetWeights, config: HmNetConfig):
    """``(mIoU, predictions)`` over a list of episodes."""
    preds = [hmnet_forward(ep, weights, config).binary_mask for ep in episodes]
    _, mean = miou(preds, [ep.query_mask for ep in episodes], [ep.class_id for ep in episodes])
    return mean, preds


def train_toy(train_episodes, val_episodes, cfg: TrainConfig, config: HmNetConfig,
              weights: NetWeights | None = None):
    """Train on ``train_episodes``; return the best-validation weights and a trace.

    The trace is a list of ``(step, loss, val_miou)`` rows; ``val_miou`` is
    ``None`` on steps without a validation pass. Episodes are visited in a
    seeded random order, and batch gradients are summed in a fixed order, so a
    run is reproducible from ``cfg.seed``.
    """
    if not train_episodes:
        raise ValueError("no training episodes")
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        weights = NetWeights.init(config, seed=cfg.seed)
    params = L.tree_flatten(weights)
    opt = Adam(params, cfg) if cfg.optimizer == "adam" else SGD(params, cfg)
    val = list(val_episodes or [])
    if cfg.val_limit is not None:
        val = val[:cfg.val_limit]

    best = (-1.0, weights)
    trace = []
    order = rng.permutation(len(train_episodes))
    pos = 0
    for step in range(cfg.steps):
        total = None
        loss_sum = 0.0
        for _ in range(cfg.batch_size):
            if pos == len(order):
                order, pos = rng.permutation(len(train_episodes)), 0
            ep = train_episodes[order[pos]]
            pos += 1
            loss, g, _ = episode_loss(ep, weights, config)
            loss_sum += loss
            gf = L.tree_flatten(g)
            total = gf if total is None else {k: total[k] + gf[k] for k in total}
        loss = loss_sum / cfg.batch_size
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}")
        grads = _clip({k: v / cfg.batch_size for k, v in total.items()}, cfg.grad_clip)
        lr = learning_rate(cfg, step)
        if lr > 0:
            params = opt.step(params, grads, lr)
            weights = L.tree_unflatten(weights, params)
        val_miou = None
        last = step == cfg.steps - 1
        if val and ((cfg.eval_every and (step + 1) % cfg.eval_every == 0) or last):
            val_miou, _ = evaluate(val, weights, config)
            if val_miou > best[0]:
                best = (val_miou, weights)
            log.info("step %d loss %.4f val mIoU %.4f", step + 1, loss, val_miou)
        trace.append((step, float(loss), val_miou))
    if not val or best[0] < 0:
        best = (best[0], weights)
    return best[1], trace


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "val_mIoU"])
        for step, loss, v in trace:
            w.writerow([step, f"{loss:.8g}", "" if v is None else f"{v:.6f}"])


def smoothed(losses, window=50):
    """Trailing moving average (shorter windows at the start)."""
    losses = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(losses)])
    idx = np.arange(1, len(losses) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
