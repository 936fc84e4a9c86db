"""Toy-benchmark runs shared by the acceptance suite and the demos."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import episodes as E
from .diagnostics import episode_intra_class
from .network import HmNetConfig, NetWeights, feature_mask
from .training import TrainConfig, evaluate, smoothed, train_toy

log = logging.getLogger(__name__)

TRAIN_SEED, VAL_SEED = 1, 2


@dataclass
class RunResult:
    ablation: str
    seed: int
    config: HmNetConfig
    weights: NetWeights
    trace: list
    val_miou: float
    seconds: float

    @property
    def losses(self):
        return np.array([r[1] for r in self.trace])

    def smoothed_drop(self, window: int = 50):
        """``(smoothed loss at the first step, at the last step)``."""
        s = smoothed(self.losses, window)
        return float(s[0]), float(s[-1])


def benchmark(n_train: int = 2000, n_val: int = 200, fold: int = 0, image_size: int = 32):
    """Training episodes over the base families and validation episodes over the novel ones."""
    base, novel = E.split_families(fold)
    train = E.generate_episodes(E.SyntheticEpisodeSpec(image_size=image_size, families=base), n_train, TRAIN_SEED)
    val = E.generate_episodes(E.SyntheticEpisodeSpec(image_size=image_size, families=novel), n_val, VAL_SEED)
    return train, val


def train_run(ablation: str, seed: int, train, val, steps: int = 2000, lr: float = 3e-3,
              config: HmNetConfig | None = None) -> RunResult:
    """Train one lattice configuration and score its final weights on ``val``."""
    cfg = (config or HmNetConfig.toy()).with_ablation(ablation)
    tcfg = TrainConfig(steps=steps, lr=lr, seed=seed, eval_every=0)
    t = time.perf_counter()
    weights, trace = train_toy(train, [], tcfg, cfg)
    val_miou, _ = evaluate(val, weights, cfg) if val else (float("nan"), None)
    secs = time.perf_counter() - t
    log.info("%s seed %d: val mIoU %.4f in %.0f s", ablation, seed, val_miou, secs)
    return RunResult(ablation, seed, cfg, weights, trace, float(val_miou), secs)


def intra_class_delta(weights, config, episodes, block: int = 0) -> float:
    """Mean ``sim_after - sim_before`` of the hybrid block over episodes with FG on both sides."""
    deltas = []
    for ep in episodes:
        q = feature_mask(ep.query_mask, config.stride)
        s = feature_mask(ep.supports[0][1], config.stride)
        if not (q.any() and s.any()):
            continue
        before, after = episode_intra_class(ep, weights, config, block)
        deltas.append(after - before)
    return float(np.mean(deltas))
