"""Segmentation metrics, hidden-state probes and the closed-form cost model."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from fractions import Fraction

import numpy as np

from . import geometry as G
from . import layers as L
from .ssm import DomainError, scan_sequential


# metrics ----------------------------------------------------------------------

def _pairs(preds, gts):
    preds = [np.asarray(p).astype(bool) for p in preds]
    gts = [np.asarray(g).astype(bool) for g in gts]
    if len(preds) != len(gts):
        raise DomainError(f"{len(preds)} predictions for {len(gts)} ground truths")
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise DomainError(f"prediction shape {p.shape} != ground truth {g.shape}")
    return preds, gts


def iou(pred, gt) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def miou(pred_masks, gt_masks, class_ids):
    """Per-class mean of per-episode FG IoU, then the mean over classes.

    Returns ``(per_class, mean)``.
    """
    preds, gts = _pairs(pred_masks, gt_masks)
    class_ids = list(class_ids)
    if len(class_ids) != len(preds):
        raise DomainError("one class id per episode is required")
    per = defaultdict(list)
    for p, g, c in zip(preds, gts, class_ids):
        per[c].append(iou(p, g))
    per_class = {c: float(np.mean(v)) for c, v in sorted(per.items())}
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def fbiou(pred_masks, gt_masks) -> float:
    """Mean of foreground IoU and background IoU, accumulated over the whole set."""
    if isinstance(pred_masks, np.ndarray) and pred_masks.ndim == 2:
        pred_masks, gt_masks = [pred_masks], [gt_masks]
    preds, gts = _pairs(pred_masks, gt_masks)
    out = []
    for fg in (True, False):
        inter = sum(int(np.logical_and(p == fg, g == fg).sum()) for p, g in zip(preds, gts))
        union = sum(int(np.logical_or(p == fg, g == fg).sum()) for p, g in zip(preds, gts))
        out.append(1.0 if union == 0 else inter / union)
    return float(np.mean(out))


# similarity probes ----------------------------------------------------------

def _cos(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return (a * b).sum(axis=-1) / np.maximum(na * nb, 1e-12)


@dataclass
class ForgettingTrace:
    index: list  # sequence index of each block boundary
    kind: list  # "support" / "query": block that just ended
    similarity: list  # max cosine between the state readout and any support pixel

    def rows(self):
        return [dict(boundary=i, index=ix, kind=k, similarity=s)
                for i, (ix, k, s) in enumerate(zip(self.index, self.kind, self.similarity))]

    def recap_recoveries(self) -> list:
        """For every support boundary after the first: did similarity not drop vs. the previous query boundary?"""
        out = []
        for i in range(1, len(self.kind)):
            if self.kind[i] == "support" and self.kind[i - 1] == "query":
                out.append(self.similarity[i] >= self.similarity[i - 1])
        return out


def forgetting_trace(hmb, f_q, f_s, mask=None, alpha: int = 4, recap: bool = True,
                     direction: int = 0) -> ForgettingTrace:
    """Track how much support content the SRM state holds at each block boundary.

    ``hmb`` is an :class:`~hmamba.hmb.HmbWeights`; ``f_q`` / ``f_s`` are the
    block-input maps. The state ``h`` (C, N) at a boundary is read out as
    ``h @ c`` with ``c`` the C projection of the mean support feature, then
    compared by cosine with every (foreground) downsampled support pixel.
    The sign of the readout is a gauge of the block (negating ``w_c`` and the
    output projection leaves the block unchanged), so the absolute cosine is
    recorded.
    """
    sq = _stream(f_q, hmb, hmb.q)
    ss = _stream(f_s, hmb, hmb.s)
    m = None if mask is None or not np.any(mask) else np.asarray(mask, bool)
    s_ds, s_mask = G.downsample(ss, m, alpha)
    patches = G.split_patches(sq, alpha, direction)
    seq, layout = G.assemble_srm_sequence(s_ds, patches, direction, recap=recap)
    theta = hmb.theta[direction]
    res = scan_sequential(seq, theta, trace=True)
    pixels = s_ds[s_mask] if s_mask.any() else s_ds.reshape(-1, s_ds.shape[-1])
    c_vec = pixels.mean(axis=0) @ theta.w_c
    idx, kind, sim = [], [], []
    for b in layout.boundaries():
        r = res.h_trace[b] @ c_vec
        idx.append(int(b))
        kind.append("support" if layout.source[b] == G.SUPPORT else "query")
        sim.append(float(np.abs(_cos(pixels, r[None, :])).max()))
    return ForgettingTrace(idx, kind, sim)


def forgetting_trial(seed, size: int = 60, dim: int = 16, state_size: int = 8, alpha: int = 4,
                     noise: float = 0.5, same: bool = False, tied: bool = False):
    """Random block weights and an episode-like feature pair for the forgetting probe.

    Support pixels share one class prototype (plus ``noise``); query pixels
    are drawn independently, or equal the support map when ``same``.
    ``tied`` gives both branches the same input projection, so identical
    maps also scan as identical streams.
    Returns ``(recap_trace, no_recap_trace)``.
    """
    from .hmb import HmbWeights

    rng = np.random.default_rng(seed)
    w = HmbWeights.init(rng, dim, state_size, expand=1)
    if tied:
        w = replace(w, s=w.q)
    proto = rng.normal(size=dim)
    f_s = proto + noise * rng.normal(size=(size, size, dim))
    f_q = f_s.copy() if same else rng.normal(size=(size, size, dim))
    d = int(rng.integers(4))
    return (forgetting_trace(w, f_q, f_s, None, alpha, True, d),
            forgetting_trace(w, f_q, f_s, None, alpha, False, d))


def forgetting_statistics(trials: int = 100, seed: int = 0, **kw):
    """``(recap_recovery_rate, no_recap_decay_rate)`` over random trials.

    The first is the fraction of recap boundaries whose similarity is not
    below the preceding query boundary; the second the fraction of trials
    whose final no-recap similarity is not above the post-support value.
    """
    rec, decay = [], []
    for t in range(trials):
        with_recap, without = forgetting_trial(np.random.SeedSequence([seed, t]), **kw)
        rec += with_recap.recap_recoveries()
        decay.append(without.similarity[-1] <= without.similarity[0])
    return float(np.mean(rec)), float(np.mean(decay))


def _stream(f, w, branch):
    n1, _ = L.layer_norm(np.asarray(f, dtype=np.float64), w.ln1)
    p = L.linear(n1, branch.in_proj)
    return p[..., :p.shape[-1] // 2]


def intra_class_similarity(features_before, features_after, support_fg_features):
    """Average cosine between query FG pixels and the support prototype, before and after a block."""
    before = np.asarray(features_before, dtype=np.float64).reshape(-1, np.shape(features_before)[-1])
    after = np.asarray(features_after, dtype=np.float64).reshape(-1, np.shape(features_after)[-1])
    sup = np.asarray(support_fg_features, dtype=np.float64).reshape(-1, np.shape(support_fg_features)[-1])
    if len(before) == 0 or len(after) == 0 or len(sup) == 0:
        raise DomainError("empty foreground pixel set")
    if before.shape != after.shape:
        raise DomainError("before/after pixel sets are not aligned")
    proto = sup.mean(axis=0)
    return float(_cos(before, proto).mean()), float(_cos(after, proto).mean())


def episode_intra_class(episode, weights, config, block: int = 0):
    """Query-FG / support-prototype similarity before and after hybrid block ``block``.

    The prototype is the mean of the support FG features entering the block.
    Returns ``(sim_before, sim_after)``.
    """
    from .network import block_features

    if not config.hmb:
        raise DomainError("configuration has no hybrid blocks")
    staged, s_mask, q_mask = block_features(episode, weights, config)
    stages = {name: (fq, fs) for name, fq, fs in staged}
    before_name = f"smb{block}"
    if before_name not in stages:
        raise DomainError(f"no hybrid block {block}")
    fq_in, fs_in = stages[before_name]
    fq_out, _ = stages[f"hmb{block}"]
    return intra_class_similarity(fq_in[q_mask], fq_out[q_mask], fs_in[s_mask])


# cost model --------------------------------------------------------------------

@dataclass(frozen=True)
class CostReport:
    M: int
    D: int
    N: int
    alpha: int
    attention_flops: Fraction
    mamba_flops: Fraction
    vmamba_flops: Fraction
    hybrid_flops: Fraction

    def as_row(self) -> dict:
        return {k: (int(v) if isinstance(v, Fraction) and v.denominator == 1 else
                    (float(v) if isinstance(v, Fraction) else v))
                for k, v in asdict(self).items()}


def cost_model(M: int, D: int, N: int, alpha: int = 4) -> CostReport:
    """Operation counts of attention, 1- and 4-direction Mamba, and the hybrid block."""
    for name, v in (("M", M), ("D", D), ("N", N), ("alpha", alpha)):
        if int(v) != v or v < 1:
            raise DomainError(f"{name} must be a positive integer")
    M, D, N, alpha = int(M), int(D), int(N), int(alpha)
    attention = Fraction(4 * M * D * D + 2 * M * M * D)
    mamba = Fraction(8 * M * D * N)
    vmamba = 4 * mamba
    # SRM: four directions over 2M; QIM: one direction over M / alpha^2
    hybrid = 2 * vmamba + mamba / (alpha * alpha)
    return CostReport(M, D, N, alpha, attention, mamba, vmamba, hybrid)


def attention_crossover(D: int, N: int, alpha: int = 4) -> int:
    """Largest M at which attention is not more expensive than the hybrid block.

    For every ``M > M*`` attention costs strictly more.
    """
    threshold = ((64 + Fraction(8, alpha * alpha)) * N - 4 * D) / 2
    return max(0, math.floor(threshold))


# output helpers ----------------------------------------------------------------

def write_csv(rows, path) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(x):
    if isinstance(x, Fraction):
        return int(x) if x.denominator == 1 else float(x)
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))
