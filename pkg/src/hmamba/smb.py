"""Self Mamba block: LN -> 4-direction selective scan (gated) -> residual -> LN -> FFN -> residual.

Query and support run as two branches. The two layer norms and the four
direction scans are shared by both branches; the in/out projections and the
FFN are per branch. Branches never exchange information inside the block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .geometry import direction_order
from .ssm import MODEL_SCAN, DomainError, SsmParams, selective_scan, selective_scan_backward


@dataclass(frozen=True)
class Branch:
    in_proj: L.Linear  # D -> 2E (scanned stream | gate)
    out_proj: L.Linear  # E -> D
    ffn1: L.Linear  # D -> ffn_mult * D
    ffn2: L.Linear  # ffn_mult * D -> D

    @classmethod
    def init(cls, rng, dim, inner, ffn_mult=2):
        return cls(L.Linear.init(rng, dim, 2 * inner), L.Linear.init(rng, inner, dim, 0.5),
                   L.Linear.init(rng, dim, ffn_mult * dim), L.Linear.init(rng, ffn_mult * dim, dim, 0.5))


@dataclass(frozen=True)
class SmbWeights:
    ln1: L.LayerNorm
    ln2: L.LayerNorm
    ssm: SsmParams  # four directions stacked on axis 0
    q: Branch
    s: Branch

    @classmethod
    def init(cls, rng, dim, state_size=16, expand=2, ffn_mult=2):
        rng = np.random.default_rng(rng)
        inner = expand * dim
        ssm = SsmParams.stack(SsmParams.init(inner, state_size, rng) for _ in range(4))
        return cls(L.LayerNorm.init(dim), L.LayerNorm.init(dim), ssm,
                   Branch.init(rng, dim, inner, ffn_mult), Branch.init(rng, dim, inner, ffn_mult))


# 4-direction self scan ---------------------------------------------------

def _orders(h, w):
    return np.stack([direction_order(h, w, d) for d in range(4)])


def self_scan_forward(maps, ssm: SsmParams):
    """Scan ``maps`` (..., H, W, E) in all four directions and sum the results."""
    maps = np.asarray(maps, dtype=np.float64)
    h, w, e = maps.shape[-3:]
    orders = _orders(h, w)
    seqs = maps.reshape(*maps.shape[:-3], h * w, e)[..., orders, :]
    y, _, cache = selective_scan(seqs, ssm, method=MODEL_SCAN)
    out = np.zeros(maps.shape[:-3] + (h * w, e))
    for d in range(4):
        out[..., orders[d], :] += y[..., d, :, :]
    return out.reshape(maps.shape), (cache, orders)


def self_scan_backward(g, cache):
    scan_cache, orders = cache
    h, w, e = g.shape[-3:]
    gflat = g.reshape(*g.shape[:-3], h * w, e)
    gy = gflat[..., orders, :]
    gseq, gssm, _ = selective_scan_backward(gy, scan_cache)
    gmaps = np.zeros_like(gflat)
    for d in range(4):
        gmaps[..., orders[d], :] += gseq[..., d, :, :]
    return gmaps.reshape(g.shape), gssm


def self_ssm_4dir(f, ssm: SsmParams):
    """Sum of the four directional scans of one ``(H, W, C)`` map (h0 = 0)."""
    return self_scan_forward(f, ssm)[0].astype(np.result_type(f, np.float32), copy=False)


# shared block scaffold -----------------------------------------------------

def scaffold_forward(fq, fs, w, mix):
    """Run the LN/projection/gate/FFN scaffold around a sequence mixer.

    ``mix(sq, ss)`` maps the two scanned streams to ``(mq, ms, cache)``.
    """
    fq = np.asarray(fq, dtype=np.float64)
    fs = np.asarray(fs, dtype=np.float64)
    if fq.shape[-1] != fs.shape[-1]:
        raise DomainError(f"channel mismatch: query {fq.shape[-1]} vs support {fs.shape[-1]}")
    pre = {}
    for name, x, br in (("q", fq, w.q), ("s", fs, w.s)):
        n1, ln1c = L.layer_norm(x, w.ln1)
        p = L.linear(n1, br.in_proj)
        e = p.shape[-1] // 2
        pre[name] = (x, n1, ln1c, p[..., :e], p[..., e:])
    mq, ms, mcache = mix(pre["q"][3], pre["s"][3])
    outs, caches = [], {}
    for name, m, br in (("q", mq, w.q), ("s", ms, w.s)):
        x, n1, ln1c, s, g = pre[name]
        a = m * L.silu(g)
        x1 = x + L.linear(a, br.out_proj)
        n2, ln2c = L.layer_norm(x1, w.ln2)
        h1 = L.linear(n2, br.ffn1)
        h1a = L.gelu(h1)
        outs.append(x1 + L.linear(h1a, br.ffn2))
        caches[name] = (x, n1, ln1c, s, g, m, a, n2, ln2c, h1, h1a)
    return outs[0], outs[1], (caches, mcache)


def scaffold_backward(gq, gs, cache, w, mix_backward):
    """Backward of :func:`scaffold_forward`.

    Returns ``(g_fq, g_fs, grads)`` where ``grads`` holds ``ln1``, ``ln2``, ``q``,
    ``s`` and ``mix`` (whatever ``mix_backward`` returned for the mixer).
    """
    caches, mcache = cache
    gm, gg, gx, bgrads = {}, {}, {}, {}
    ln2_g = []
    for name, gout, br in (("q", gq, w.q), ("s", gs, w.s)):
        x, n1, ln1c, s, g, m, a, n2, ln2c, h1, h1a = caches[name]
        gh1a, g_ffn2 = L.linear_backward(gout, h1a, br.ffn2)
        gh1 = L.gelu_backward(gh1a, h1)
        gn2, g_ffn1 = L.linear_backward(gh1, n2, br.ffn1)
        gx1, g_ln2 = L.layer_norm_backward(gn2, ln2c, w.ln2)
        gx1 = gx1 + gout
        ln2_g.append(g_ln2)
        ga, g_out = L.linear_backward(gx1, a, br.out_proj)
        gm[name] = ga * L.silu(g)
        gg[name] = L.silu_backward(ga * m, g)
        gx[name] = gx1
        bgrads[name] = (g_out, g_ffn1, g_ffn2)
    gsq, gss, gmix = mix_backward(gm["q"], gm["s"], mcache)
    ln1_g = []
    res = {}
    for name, gs_stream, br in (("q", gsq, w.q), ("s", gss, w.s)):
        x, n1, ln1c = caches[name][:3]
        gp = np.concatenate([gs_stream, gg[name]], axis=-1)
        gn1, g_in = L.linear_backward(gp, n1, br.in_proj)
        gxin, g_ln1 = L.layer_norm_backward(gn1, ln1c, w.ln1)
        ln1_g.append(g_ln1)
        g_out, g_ffn1, g_ffn2 = bgrads[name]
        res[name] = (gx[name] + gxin, Branch(g_in, g_out, g_ffn1, g_ffn2))
    grads = dict(ln1=L.tree_add(*ln1_g), ln2=L.tree_add(*ln2_g), q=res["q"][1], s=res["s"][1], mix=gmix)
    return res["q"][0], res["s"][0], grads


def _smb_mix(w: SmbWeights):
    def mix(sq, ss):
        out, cache = self_scan_forward(np.stack([sq, ss]), w.ssm)
        return out[0], out[1], cache

    def mix_backward(gq, gs, cache):
        g, gssm = self_scan_backward(np.stack([gq, gs]), cache)
        return g[0], g[1], gssm

    return mix, mix_backward


def smb_forward_cached(fq, fs, w: SmbWeights):
    mix, _ = _smb_mix(w)
    return scaffold_forward(fq, fs, w, mix)


def smb_backward(gq, gs, cache, w: SmbWeights):
    """Returns ``(g_fq, g_fs, SmbWeights-shaped grads)``."""
    _, mix_backward = _smb_mix(w)
    g_fq, g_fs, g = scaffold_backward(gq, gs, cache, w, mix_backward)
    return g_fq, g_fs, SmbWeights(g["ln1"], g["ln2"], g["mix"], g["q"], g["s"])


def smb_forward(f_q, f_s, w: SmbWeights):
    """Self Mamba block on query and support maps ``(H, W, D)``; returns ``(f_q', f_s')``."""
    q, s, _ = smb_forward_cached(f_q, f_s, w)
    return q, s
