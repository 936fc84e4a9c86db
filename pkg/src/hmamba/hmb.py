"""Hybrid Mamba block: support-recapped scan (SRM) plus query-intercepted scan (QIM).

SRM scans ``[S, Q0, S, Q1, ...]`` in four directions with four parameter
sets. The state reached after the first support block of each direction is
averaged into ``H_S``; QIM then applies ``H_S`` to every downsampled query
pixel independently as a length-1 scan, reusing the direction-0 parameters.
The outputs are summed (query) and upsampled back to full size.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import geometry as G
from . import layers as L
from .smb import Branch, scaffold_backward, scaffold_forward
from .ssm import (MODEL_SCAN, DELTA_MAX, DELTA_MIN, DomainError, SsmParams, _zoh_factor, selective_scan,
                  selective_scan_backward, sigmoid, softplus)


class EmptySupportWarning(UserWarning):
    """The support mask had no foreground; an unmasked mean was used instead."""


@dataclass(frozen=True)
class HmbConfig:
    alpha: int = 4
    srm: bool = True
    recap: bool = True
    qim: bool = True
    share: bool = True

    def __post_init__(self):
        if self.alpha < 1:
            raise DomainError("alpha must be >= 1")
        if not (self.srm or self.qim):
            raise DomainError("an HMB needs SRM, QIM or both")

    @property
    def srm_alpha(self) -> int:
        # without recap the support is scanned once, at full resolution, ahead of the query
        return self.alpha if self.recap else 1


@dataclass(frozen=True)
class HmbWeights:
    ln1: L.LayerNorm
    ln2: L.LayerNorm
    theta: SsmParams  # four SRM directions stacked on axis 0; QIM shares theta[0]
    theta_qim: SsmParams  # only read when QIM parameters are not shared
    q: Branch
    s: Branch

    @classmethod
    def init(cls, rng, dim, state_size=16, expand=2, ffn_mult=2):
        rng = np.random.default_rng(rng)
        inner = expand * dim
        theta = SsmParams.stack(SsmParams.init(inner, state_size, rng) for _ in range(4))
        theta_qim = SsmParams.init(inner, state_size, rng)
        return cls(L.LayerNorm.init(dim), L.LayerNorm.init(dim), theta, theta_qim,
                   Branch.init(rng, dim, inner, ffn_mult), Branch.init(rng, dim, inner, ffn_mult))


@lru_cache(maxsize=64)
def srm_layouts(height: int, width: int, alpha: int, recap: bool = True) -> tuple:
    """The four SRM layouts for an ``height x width`` query (content independent)."""
    ph, pw = height // alpha, width // alpha
    dummy_s = np.zeros((ph, pw, 1))
    dummy_q = [np.zeros((ph, pw, 1))] * (alpha * alpha)
    return tuple(G.assemble_srm_sequence(dummy_s, dummy_q, d, recap=recap)[1] for d in range(4))


# QIM closed form -------------------------------------------------------------

def qim_closed_form(x, h_s, p: SsmParams):
    """``y = C (Ā H_S + B̄ x) + D x`` for every row of ``x`` (P, C) independently."""
    x = np.asarray(x, dtype=np.float64)
    b = x @ p.w_b
    c = x @ p.w_c
    z = x @ p.w_delta + p.bias_delta
    sp = softplus(z)
    delta = np.clip(sp, DELTA_MIN, DELTA_MAX)
    A = p.A
    e, da, small = _zoh_factor(A, delta[:, :, None])
    a_bar = np.exp(da)
    b_bar = e * b[:, None, :]
    h = a_bar * h_s + b_bar * x[:, :, None]
    y = np.einsum("pcn,pn->pc", h, c) + p.skip_d * x
    return y, dict(x=x, h_s=h_s, p=p, b=b, c=c, z=z, sp=sp, delta=delta, e=e, small=small,
                   a_bar=a_bar, b_bar=b_bar, h=h)


def qim_closed_form_backward(gy, cache):
    """Returns ``(gx, g_params, g_h_s)``."""
    x, h_s, p = cache["x"], cache["h_s"], cache["p"]
    b, c, h = cache["b"], cache["c"], cache["h"]
    a_bar, b_bar, e, small, delta = cache["a_bar"], cache["b_bar"], cache["e"], cache["small"], cache["delta"]
    A = p.A
    gh = gy[:, :, None] * c[:, None, :]
    gc = np.einsum("pc,pcn->pn", gy, h)
    g_skip = (gy * x).sum(axis=0)
    gx = gy * p.skip_d
    g_a_bar = gh * h_s
    g_hs = (gh * a_bar).sum(axis=0)
    g_b_bar = gh * x[:, :, None]
    gx = gx + (gh * b_bar).sum(axis=-1)
    g_e = g_b_bar * b[:, None, :]
    gb = (g_b_bar * e).sum(axis=1)
    d = delta[:, :, None]
    de_dA = np.where(small, 0.5 * d * d, (d * a_bar - e) / np.where(small, 1.0, A))
    g_delta = (g_e * a_bar + g_a_bar * a_bar * A).sum(axis=-1)
    g_A = (g_e * de_dA + g_a_bar * a_bar * d).sum(axis=0)
    live = (cache["sp"] > DELTA_MIN) & (cache["sp"] < DELTA_MAX)
    gz = g_delta * sigmoid(cache["z"]) * live
    gx = gx + gz @ p.w_delta.T + gb @ p.w_b.T + gc @ p.w_c.T
    grads = SsmParams(g_A * A, x.T @ gb, x.T @ gc, x.T @ gz, gz.sum(axis=0), g_skip)
    return gx, grads, g_hs


def qim_forward(f_q_ds, h_s, theta0: SsmParams):
    """QIM on a downsampled query map ``(h, w, C)``: each pixel is a length-1 scan from ``h_s``."""
    f = np.asarray(f_q_ds)
    y, _ = qim_closed_form(f.reshape(-1, f.shape[-1]), np.asarray(h_s, dtype=np.float64), theta0)
    return y.reshape(f.shape)


def average_hidden(h_s):
    """Elementwise mean of the per-direction support states."""
    h_s = np.asarray(h_s, dtype=np.float64)
    if h_s.ndim != 3:
        raise DomainError(f"expected a stack of states (k, C, N), got {h_s.shape}")
    return h_s.mean(axis=0)


# SRM ----------------------------------------------------------------------------

def _srm_scan(sq, s_ds, theta, alpha, recap=True):
    h, w = sq.shape[:2]
    layouts = srm_layouts(h, w, alpha, recap)
    seqs = np.stack([G.gather_sequence(s_ds, sq, lay) for lay in layouts])
    y, h_all, cache = selective_scan(seqs, theta, method=MODEL_SCAN)
    return layouts, y, h_all, cache


def srm_forward(f_q, f_s_ds, w: HmbWeights, alpha: int = 4, recap: bool = True):
    """Four-direction support-recapped scan.

    Returns ``(q_out, s_head_out, h_s)``: four full-size query maps, four
    support-size head maps and the four states after the first support block.
    """
    f_q = np.asarray(f_q, dtype=np.float64)
    f_s_ds = np.asarray(f_s_ds, dtype=np.float64)
    h, wd = f_q.shape[:2]
    if f_s_ds.shape[:2] != (h // alpha, wd // alpha) or h % alpha or wd % alpha:
        raise DomainError(f"support {f_s_ds.shape[:2]} does not match query {f_q.shape[:2]} / alpha={alpha}")
    layouts, y, h_all, _ = _srm_scan(f_q, f_s_ds, w.theta, alpha, recap)
    q_out, s_head, h_s = [], [], []
    for d, lay in enumerate(layouts):
        q, s = G.scatter_srm_outputs(y[d], lay)
        q_out.append(q)
        s_head.append(s)
        h_s.append(h_all[d, lay.first_support_boundary])
    return q_out, s_head, h_s


def _support_mask(mask, shape):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise DomainError(f"support mask {mask.shape} does not match map {shape}")
    if not mask.any():
        warnings.warn("support mask is empty; falling back to an unmasked support mean",
                      EmptySupportWarning, stacklevel=3)
        return None
    return mask


def hybrid_mix_forward(sq, ss, mask, w: HmbWeights, cfg: HmbConfig):
    """Sequence mixing of the HMB on the two scanned streams ``(H, W, E)``."""
    h, wd, e = sq.shape
    a_s = cfg.srm_alpha
    m = _support_mask(mask, (h, wd))
    s_ds, _ = G.downsample(ss, m, a_s)
    cache = dict(mask=m, s_ds_shape=s_ds.shape)
    if cfg.srm:
        layouts, y, h_all, scache = _srm_scan(sq, s_ds, w.theta, a_s)
        q_hat = np.zeros_like(sq)
        s_sum = np.zeros_like(s_ds)
        h_s = []
        for d, lay in enumerate(layouts):
            q, s = G.scatter_srm_outputs(y[d], lay)
            q_hat += q
            s_sum += s
            h_s.append(h_all[d, lay.first_support_boundary])
        cache.update(layouts=layouts, scache=scache, h_len=h_all.shape[1])
    else:
        # no SRM: the support prefix alone is scanned to obtain the four states
        orders = np.stack([G.direction_order(*s_ds.shape[:2], d) for d in range(4)])
        seqs = s_ds.reshape(-1, e)[orders]
        y, h_all, scache = selective_scan(seqs, w.theta, method=MODEL_SCAN)
        s_sum = np.zeros((s_ds.shape[0] * s_ds.shape[1], e))
        for d in range(4):
            s_sum[orders[d]] += y[d]
        s_sum = s_sum.reshape(s_ds.shape)
        h_s = [h_all[d, -1] for d in range(4)]
        q_hat = np.zeros_like(sq)
        cache.update(orders=orders, scache=scache, h_len=h_all.shape[1])
    s_hat = G.upsample(s_sum, a_s)
    if cfg.qim:
        hs_mean = average_hidden(np.stack(h_s))
        q_ds, _ = G.downsample(sq, None, cfg.alpha)
        p = w.theta[0] if cfg.share else w.theta_qim
        y_qim, qcache = qim_closed_form(q_ds.reshape(-1, e), hs_mean, p)
        q_hat = q_hat + G.upsample(y_qim.reshape(q_ds.shape), cfg.alpha)
        cache.update(qcache=qcache, q_ds_shape=q_ds.shape, h_s=h_s)
    return q_hat, s_hat, cache


def hybrid_mix_backward(g_q, g_s, cache, w: HmbWeights, cfg: HmbConfig):
    """Returns ``(g_sq, g_ss, g_theta, g_theta_qim)``."""
    h, wd, e = g_q.shape
    a_s = cfg.srm_alpha
    g_theta_qim = w.theta_qim.zeros_like()
    g_sq = np.zeros((h, wd, e))
    g_hs = None
    g_theta_extra = None
    if cfg.qim:
        g_y = G.upsample_backward(g_q, cfg.alpha).reshape(-1, e)
        g_qds, g_p, g_hs_mean = qim_closed_form_backward(g_y, cache["qcache"])
        g_sq += G.downsample_backward(g_qds.reshape(cache["q_ds_shape"]), None, cfg.alpha)
        g_hs = g_hs_mean / 4.0
        if cfg.share:
            g_theta_extra = g_p
        else:
            g_theta_qim = g_p
    g_s_sum = G.upsample_backward(g_s, a_s)
    scache = cache["scache"]
    gh_extra = None
    if cfg.srm:
        layouts = cache["layouts"]
        gy = np.stack([G.scatter_srm_outputs_backward(g_q, g_s_sum, lay) for lay in layouts])
        if g_hs is not None:
            gh_extra = np.zeros(gy.shape[:2] + g_hs.shape)
            for d, lay in enumerate(layouts):
                gh_extra[d, lay.first_support_boundary] = g_hs
        gseq, g_theta, _ = selective_scan_backward(gy, scache, gh_extra)
        g_sds = np.zeros(cache["s_ds_shape"])
        for d, lay in enumerate(layouts):
            gs_d, gq_d = G.gather_sequence_backward(gseq[d], lay)
            g_sds += gs_d
            g_sq += gq_d
    else:
        orders = cache["orders"]
        gflat = g_s_sum.reshape(-1, e)
        gy = gflat[orders]
        if g_hs is not None:
            gh_extra = np.zeros(gy.shape + (g_hs.shape[-1],))
            gh_extra[:, -1] = g_hs
        gseq, g_theta, _ = selective_scan_backward(gy, scache, gh_extra)
        g_sds_flat = np.zeros_like(gflat)
        for d in range(4):
            g_sds_flat[orders[d]] += gseq[d]
        g_sds = g_sds_flat.reshape(cache["s_ds_shape"])
    if g_theta_extra is not None:
        g_theta = L.tree_map(lambda g, x: _add_first(g, x), g_theta, g_theta_extra)
    g_ss = G.downsample_backward(g_sds, cache["mask"], a_s)
    return g_sq, g_ss, g_theta, g_theta_qim


def _add_first(stacked, extra):
    out = stacked.copy()
    out[0] += extra
    return out


def hmb_forward_cached(f_q, f_s, mask, w: HmbWeights, cfg: HmbConfig):
    def mix(sq, ss):
        return hybrid_mix_forward(sq, ss, mask, w, cfg)

    return scaffold_forward(f_q, f_s, w, mix)


def hmb_backward(g_q, g_s, cache, w: HmbWeights, cfg: HmbConfig):
    """Returns ``(g_fq, g_fs, HmbWeights-shaped grads)``."""
    def mix_backward(gq, gs, mcache):
        g_sq, g_ss, g_theta, g_qim = hybrid_mix_backward(gq, gs, mcache, w, cfg)
        return g_sq, g_ss, (g_theta, g_qim)

    g_fq, g_fs, g = scaffold_backward(g_q, g_s, cache, w, mix_backward)
    g_theta, g_qim = g["mix"]
    return g_fq, g_fs, HmbWeights(g["ln1"], g["ln2"], g_theta, g_qim, g["q"], g["s"])


def hmb_forward(f_q, f_s, mask, w: HmbWeights, cfg: HmbConfig | int = HmbConfig()):
    """Hybrid Mamba block on ``(H, W, D)`` query/support maps with support FG ``mask``.

    ``cfg`` may be an :class:`HmbConfig` or just the ratio ``alpha``.
    Returns ``(f_q_out, f_s_out)``, both ``(H, W, D)``.
    """
    if isinstance(cfg, int):
        cfg = HmbConfig(alpha=cfg)
    q, s, _ = hmb_forward_cached(f_q, f_s, mask, w, cfg)
    return q, s
