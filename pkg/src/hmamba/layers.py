"""Small differentiable building blocks with hand-written backward passes.

Each ``foo`` has a ``foo_backward`` taking the upstream gradient plus whatever
the forward needs, and returning input and parameter gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class Linear:
    w: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)

    @classmethod
    def init(cls, rng, fan_in, fan_out, scale=1.0):
        w = rng.normal(0.0, scale / np.sqrt(fan_in), (fan_in, fan_out))
        return cls(w, np.zeros(fan_out))


@dataclass(frozen=True)
class LayerNorm:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def init(cls, dim):
        return cls(np.ones(dim), np.zeros(dim))


@dataclass(frozen=True)
class Conv2d:
    w: np.ndarray  # (k, k, in, out)
    b: np.ndarray
    stride: int = 1
    pad: int = 0

    @classmethod
    def init(cls, rng, k, c_in, c_out, stride=1, pad=0):
        w = rng.normal(0.0, 1.0 / np.sqrt(k * k * c_in), (k, k, c_in, c_out))
        return cls(w, np.zeros(c_out), stride, pad)


def linear(x, p: Linear):
    return x @ p.w + p.b


def linear_backward(g, x, p: Linear):
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return g @ p.w.T, Linear(x2.T @ g2, g2.sum(axis=0))


def layer_norm(x, p: LayerNorm):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * p.gamma + p.beta, (xhat, rstd)


def layer_norm_backward(g, cache, p: LayerNorm):
    xhat, rstd = cache
    d = xhat.shape[-1]
    g2 = g.reshape(-1, d)
    grads = LayerNorm((g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0))
    gx_hat = g * p.gamma
    gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                 - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
    return gx, grads


def gelu(x):
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_backward(g, x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_backward(g, x):
    s = sigmoid(x)
    return g * (s * (1.0 + x * (1.0 - s)))


def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))[::stride, ::stride]
    # win: (Ho, Wo, C, k, k) -> (Ho, Wo, k, k, C)
    return win.transpose(0, 1, 3, 4, 2)


def conv2d(x, p: Conv2d):
    """``x`` is (H, W, C_in); returns (H_out, W_out, C_out)."""
    k = p.w.shape[0]
    cols = _im2col(x, k, p.stride, p.pad)
    ho, wo = cols.shape[:2]
    out = cols.reshape(ho * wo, -1) @ p.w.reshape(-1, p.w.shape[-1]) + p.b
    return out.reshape(ho, wo, -1)


def conv2d_backward(g, x, p: Conv2d):
    k, s, pad = p.w.shape[0], p.stride, p.pad
    cols = _im2col(x, k, s, pad)
    ho, wo = g.shape[:2]
    g2 = g.reshape(ho * wo, -1)
    gw = (cols.reshape(ho * wo, -1).T @ g2).reshape(p.w.shape)
    gb = g2.sum(axis=0)
    gcols = (g2 @ p.w.reshape(-1, p.w.shape[-1]).T).reshape(ho, wo, k, k, -1)
    h, w = x.shape[:2]
    gx = np.zeros((h + 2 * pad, w + 2 * pad, x.shape[2]))
    for i in range(k):
        for j in range(k):
            gx[i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, i, j]
    if pad:
        gx = gx[pad:-pad, pad:-pad]
    return gx, Conv2d(gw, gb, p.stride, p.pad)


def softmax_cross_entropy(logits, labels):
    """Mean per-pixel cross-entropy; ``logits`` (..., K), integer ``labels`` (...).

    Returns ``(loss, dloss/dlogits)``.
    """
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = labels.size
    picked = np.take_along_axis(logp, labels[..., None].astype(int), axis=-1)[..., 0]
    grad = np.exp(logp)
    np.put_along_axis(grad, labels[..., None].astype(int),
                      np.take_along_axis(grad, labels[..., None].astype(int), axis=-1) - 1.0, axis=-1)
    return -picked.sum() / n, grad / n


# weight trees -------------------------------------------------------------

def tree_flatten(tree, prefix="") -> dict:
    """Flatten nested dataclasses / tuples / dicts of arrays into ``{dotted.name: array}``.

    Non-array scalar fields (e.g. conv stride) are skipped.
    """
    out = {}
    if isinstance(tree, np.ndarray):
        out[prefix] = tree
    elif is_dataclass(tree):
        for f in fields(tree):
            out.update(tree_flatten(getattr(tree, f.name), f"{prefix}{f.name}."))
    elif isinstance(tree, (tuple, list)):
        for i, v in enumerate(tree):
            out.update(tree_flatten(v, f"{prefix}{i}."))
    elif isinstance(tree, dict):
        for k, v in tree.items():
            out.update(tree_flatten(v, f"{prefix}{k}."))
    return {k.rstrip("."): v for k, v in out.items()}


def tree_unflatten(template, flat: dict, prefix=""):
    """Rebuild ``template``'s structure taking arrays from ``flat``."""
    if isinstance(template, np.ndarray):
        return flat[prefix.rstrip(".")]
    if is_dataclass(template):
        kw = {f.name: tree_unflatten(getattr(template, f.name), flat, f"{prefix}{f.name}.")
              for f in fields(template)}
        return type(template)(**kw)
    if isinstance(template, (tuple, list)):
        return type(template)(tree_unflatten(v, flat, f"{prefix}{i}.") for i, v in enumerate(template))
    if isinstance(template, dict):
        return {k: tree_unflatten(v, flat, f"{prefix}{k}.") for k, v in template.items()}
    return template


def tree_map(fn, *trees):
    """Apply ``fn`` leafwise over trees sharing one structure."""
    flats = [tree_flatten(t) for t in trees]
    return tree_unflatten(trees[0], {k: fn(*(f[k] for f in flats)) for k in flats[0]})


def tree_add(a, b):
    return tree_map(np.add, a, b)


def tree_zeros(tree):
    return tree_map(lambda x: np.zeros_like(x, dtype=np.float64), tree)
