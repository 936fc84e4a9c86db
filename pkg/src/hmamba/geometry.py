"""2D <-> 1D layouts: directional flattening, patches, pooling and SRM sequence assembly.

Feature maps are plain ``(H, W, C)`` arrays. Direction ids:

* 0: row-major, left to right, top to bottom
* 1: reverse of 0
* 2: column-major, top to bottom, left to right
* 3: reverse of 2
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .ssm import DomainError, ScanResult

DIRECTIONS = (0, 1, 2, 3)
SUPPORT, QUERY = 0, 1


class LayoutError(DomainError):
    pass


def _check_direction(d):
    if d not in DIRECTIONS:
        raise DomainError(f"direction must be one of {DIRECTIONS}, got {d!r}")


def direction_order(height: int, width: int, d: int) -> np.ndarray:
    """Row-major flat indices of an ``height x width`` grid in scan order ``d``."""
    _check_direction(d)
    grid = np.arange(height * width).reshape(height, width)
    order = grid.ravel() if d in (0, 1) else grid.T.ravel()
    return order[::-1].copy() if d in (1, 3) else order


@dataclass(frozen=True)
class SequenceLayout:
    """Where every sequence position comes from.

    ``index`` addresses a flat source buffer: support rows first
    (``support_len`` of them), then the query map in row-major order.
    """

    index: np.ndarray
    source: np.ndarray  # SUPPORT / QUERY tag per position
    patch: np.ndarray  # patch index (pair index for SRM layouts)
    row: np.ndarray  # row inside its block
    col: np.ndarray
    direction: int
    query_shape: tuple  # (H, W)
    support_shape: tuple  # (h, w), (0, 0) when absent
    block_len: int  # pixels per support/query block

    @property
    def support_len(self) -> int:
        return self.support_shape[0] * self.support_shape[1]

    @property
    def checksum(self) -> int:
        meta = np.array([self.direction, *self.query_shape, *self.support_shape], dtype=np.int64)
        return zlib.crc32(self.index.astype(np.int64).tobytes() + meta.tobytes())

    def __len__(self):
        return len(self.index)

    @property
    def query_positions(self) -> np.ndarray:
        return np.flatnonzero(self.source == QUERY)

    @property
    def first_support_boundary(self) -> int:
        """Sequence index of the last pixel of the head support block."""
        if self.source[0] != SUPPORT:
            raise LayoutError("layout has no leading support block")
        return self.block_len - 1

    def boundaries(self) -> list:
        """End index of every contiguous support/query block."""
        change = np.flatnonzero(np.diff(self.patch * 2 + self.source) != 0)
        return [int(i) for i in change] + [len(self.index) - 1]


def flatten_direction(f, d: int):
    """Flatten an ``(H, W, C)`` map in direction ``d``; returns ``(seq, layout)``."""
    f = np.asarray(f)
    h, w = f.shape[:2]
    order = direction_order(h, w, d)
    rows, cols = np.divmod(order, w)
    n = h * w
    layout = SequenceLayout(index=order, source=np.full(n, QUERY), patch=np.zeros(n, dtype=int),
                            row=rows, col=cols, direction=d, query_shape=(h, w),
                            support_shape=(0, 0), block_len=n)
    return f.reshape(n, *f.shape[2:])[order], layout


def unflatten_direction(seq, layout: SequenceLayout, expect_checksum: int | None = None):
    """Inverse of :func:`flatten_direction`.

    ``expect_checksum`` (the checksum of the layout that produced ``seq``)
    guards against pairing a sequence with a layout from another direction.
    """
    seq = np.asarray(seq)
    if expect_checksum is not None and expect_checksum != layout.checksum:
        raise LayoutError("layout checksum mismatch: sequence was produced by a different layout")
    h, w = layout.query_shape
    if seq.shape[0] != len(layout) or len(layout) != h * w:
        raise LayoutError(f"sequence length {seq.shape[0]} does not match layout ({h}x{w})")
    out = np.empty_like(seq)
    out[layout.index] = seq
    return out.reshape(h, w, *seq.shape[1:])


def split_patches(f, alpha: int, d: int = 0) -> list:
    """Cut ``f`` into ``alpha**2`` tiles of ``(H/alpha, W/alpha)``, ordered by direction ``d``."""
    f = np.asarray(f)
    h, w = f.shape[:2]
    if alpha < 1 or h % alpha or w % alpha:
        raise DomainError(f"map {h}x{w} is not divisible by alpha={alpha}")
    ph, pw = h // alpha, w // alpha
    tiles = f.reshape(alpha, ph, alpha, pw, *f.shape[2:]).swapaxes(1, 2)
    tiles = tiles.reshape(alpha * alpha, ph, pw, *f.shape[2:])
    return [tiles[j] for j in direction_order(alpha, alpha, d)]


def _block_view(f, alpha):
    h, w = f.shape[:2]
    if alpha < 1 or h % alpha or w % alpha:
        raise DomainError(f"map {h}x{w} is not divisible by alpha={alpha}")
    return f.reshape(h // alpha, alpha, w // alpha, alpha, *f.shape[2:])


def downsample(f, mask=None, alpha: int = 4):
    """Mask-weighted mean pooling over ``alpha x alpha`` cells.

    Returns ``(pooled, pooled_mask)``; cells with no masked pixel pool to zero
    and get mask 0.
    """
    f = np.asarray(f, dtype=np.float64)
    blocks = _block_view(f, alpha)
    if mask is None:
        return blocks.mean(axis=(1, 3)), np.ones(blocks.shape[0:3:2], dtype=bool)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != f.shape[:2]:
        raise DomainError(f"mask shape {m.shape} != map shape {f.shape[:2]}")
    mb = _block_view(m, alpha)
    count = mb.sum(axis=(1, 3))
    total = (blocks * mb[..., None]).sum(axis=(1, 3))
    pooled = np.where(count[..., None] > 0, total / np.maximum(count, 1.0)[..., None], 0.0)
    return pooled, count > 0


def downsample_backward(g, mask, alpha: int):
    """Gradient of :func:`downsample` w.r.t. its input map."""
    g = np.asarray(g, dtype=np.float64)
    hs, ws = g.shape[:2]
    if mask is None:
        weight = np.full((hs, alpha, ws, alpha), 1.0 / alpha ** 2)
    else:
        mb = _block_view(np.asarray(mask, dtype=np.float64), alpha)
        count = mb.sum(axis=(1, 3), keepdims=True)
        weight = mb / np.maximum(count, 1.0)
    out = g[:, None, :, None] * weight[..., None]
    return out.reshape(hs * alpha, ws * alpha, g.shape[-1])


def upsample(f, alpha: int):
    """Nearest-neighbour enlargement by ``alpha`` in both spatial axes."""
    f = np.asarray(f)
    return np.repeat(np.repeat(f, alpha, axis=0), alpha, axis=1)


def upsample_backward(g, alpha: int):
    return _block_view(np.asarray(g), alpha).sum(axis=(1, 3))


def assemble_srm_sequence(support_ds, query_patches, d: int, recap: bool = True):
    """Interleave the support map before every query patch.

    ``query_patches`` must come from :func:`split_patches` with the same ``d``.
    With ``recap=True`` the result is ``[S, Q0, S, Q1, ..., S, Q_{a^2-1}]``
    (length ``2HW``); with ``recap=False`` the support appears only once at the
    head. Returns ``(seq, layout)``.
    """
    _check_direction(d)
    s = np.asarray(support_ds)
    patches = [np.asarray(p) for p in query_patches]
    k = len(patches)
    alpha = int(round(np.sqrt(k)))
    if alpha * alpha != k or k == 0:
        raise DomainError(f"expected a square number of patches, got {k}")
    ph, pw = s.shape[:2]
    for p in patches:
        if p.shape != s.shape:
            raise DomainError(f"query patch {p.shape} does not match support {s.shape}")
    H, W = ph * alpha, pw * alpha
    inner = direction_order(ph, pw, d)
    in_r, in_c = np.divmod(inner, pw)
    pos = direction_order(alpha, alpha, d)
    n_s = ph * pw

    idx, src, pat, rows, cols = [], [], [], [], []
    for j in range(k):
        if recap or j == 0:
            idx.append(inner)
            src.append(np.full(n_s, SUPPORT))
            pat.append(np.full(n_s, j))
            rows.append(in_r)
            cols.append(in_c)
        pr, pc = divmod(int(pos[j]), alpha)
        g_r, g_c = pr * ph + in_r, pc * pw + in_c
        idx.append(n_s + g_r * W + g_c)
        src.append(np.full(n_s, QUERY))
        pat.append(np.full(n_s, j))
        rows.append(in_r)
        cols.append(in_c)

    layout = SequenceLayout(index=np.concatenate(idx), source=np.concatenate(src),
                            patch=np.concatenate(pat), row=np.concatenate(rows),
                            col=np.concatenate(cols), direction=d, query_shape=(H, W),
                            support_shape=(ph, pw), block_len=n_s)
    query_full = np.empty((H, W) + s.shape[2:], dtype=np.result_type(s, *patches))
    for j, p in enumerate(patches):
        pr, pc = divmod(int(pos[j]), alpha)
        query_full[pr * ph:(pr + 1) * ph, pc * pw:(pc + 1) * pw] = p
    return gather_sequence(s, query_full, layout), layout


def gather_sequence(support, query, layout: SequenceLayout):
    """Build a sequence from a support map and a full query map using ``layout``."""
    c = query.shape[2:]
    buf = np.concatenate([np.asarray(support).reshape(-1, *c), np.asarray(query).reshape(-1, *c)])
    return buf[layout.index]


def gather_sequence_backward(g_seq, layout: SequenceLayout):
    """Scatter-add a sequence gradient back to ``(g_support, g_query)``."""
    g_seq = np.asarray(g_seq)
    n_s = layout.support_len
    H, W = layout.query_shape
    c = g_seq.shape[-1]
    buf = np.zeros((n_s + H * W, c))
    np.add.at(buf, layout.index, g_seq)
    h, w = layout.support_shape
    return buf[:n_s].reshape(h, w, c), buf[n_s:].reshape(H, W, c)


def extract_srm_outputs(scan_result: ScanResult, layout: SequenceLayout):
    """Split a scan over an SRM layout into query output, head support output and ``H_S``.

    ``H_S`` is the state right after the first support block, so the scan must
    have been run with ``trace=True``.
    """
    y = np.asarray(scan_result.y)
    if y.shape[0] != len(layout):
        raise LayoutError(f"scan length {y.shape[0]} does not match layout length {len(layout)}")
    if scan_result.h_trace is None:
        raise LayoutError("extract_srm_outputs needs the per-step hidden states (trace=True)")
    q_out, s_head = scatter_srm_outputs(y, layout)
    return q_out, s_head, scan_result.h_trace[layout.first_support_boundary]


def scatter_srm_outputs(y, layout: SequenceLayout):
    """Route scan outputs (L, C) to the query map and the head support block."""
    H, W = layout.query_shape
    h, w = layout.support_shape
    n_s = layout.support_len
    q_pos = layout.query_positions
    q = np.empty((H * W,) + y.shape[1:], dtype=y.dtype)
    q[layout.index[q_pos] - n_s] = y[q_pos]
    head = np.empty((n_s,) + y.shape[1:], dtype=y.dtype)
    head[layout.index[:n_s]] = y[:n_s]
    return q.reshape(H, W, *y.shape[1:]), head.reshape(h, w, *y.shape[1:])


def scatter_srm_outputs_backward(g_q, g_head, layout: SequenceLayout):
    c = g_q.shape[-1]
    n_s = layout.support_len
    g = np.zeros((len(layout), c))
    q_pos = layout.query_positions
    g[q_pos] = g_q.reshape(-1, c)[layout.index[q_pos] - n_s]
    g[:n_s] += g_head.reshape(-1, c)[layout.index[:n_s]]
    return g
