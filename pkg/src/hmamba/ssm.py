"""Selective state-space scan: projection, ZOH discretization, scans and backward.

Shapes follow ``(..., L, C)`` for sequences, where ``L`` is the scan length and
``C`` the channel count. The state of a scan is ``(..., C, N)`` with ``N`` the
state size. ``A`` is diagonal, real and negative, stored as ``a_log`` with
``A = -exp(a_log)``.

Single precision inputs are accepted; all arithmetic runs in float64 and the
outputs are cast back to the input dtype.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import _kernels as K

DELTA_MIN = 1e-6
DELTA_MAX = 1e2
SERIES_EPS = 1e-8
# scan used inside the network blocks
MODEL_SCAN = "fused" if K.AVAILABLE else "sequential"


class DomainError(ValueError):
    """Raised for inputs outside an operation's domain (non-finite, bad shapes)."""


@dataclass(frozen=True)
class SsmParams:
    """Parameters of one selective scan.

    Every field may carry extra leading axes (for example a stack of four scan
    directions); those axes broadcast against the leading axes of the input.
    """

    a_log: np.ndarray  # (C, N)
    w_b: np.ndarray  # (C, N)
    w_c: np.ndarray  # (C, N)
    w_delta: np.ndarray  # (C, C)
    bias_delta: np.ndarray  # (C,)
    skip_d: np.ndarray  # (C,)

    @property
    def channels(self) -> int:
        return self.a_log.shape[-2]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[-1]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)

    @property
    def batch_shape(self) -> tuple:
        return self.a_log.shape[:-2]

    @classmethod
    def init(cls, channels: int, state_size: int = 16, rng=None,
             delta_range=(1e-3, 1e-1), dtype=np.float64) -> "SsmParams":
        """S4D-real style initialisation: ``a_log = log(1..N)``, Δ in ``delta_range``."""
        rng = np.random.default_rng(rng)
        a_log = np.log(np.broadcast_to(np.arange(1, state_size + 1, dtype=np.float64),
                                       (channels, state_size))).copy()
        scale = 1.0 / np.sqrt(channels)
        w_b = rng.normal(0.0, scale, (channels, state_size))
        w_c = rng.normal(0.0, scale, (channels, state_size))
        w_delta = rng.normal(0.0, 0.1 * scale, (channels, channels))
        lo, hi = np.log(delta_range[0]), np.log(delta_range[1])
        dt = np.exp(rng.uniform(lo, hi, channels))
        bias_delta = dt + np.log(-np.expm1(-dt))  # inverse softplus
        skip_d = np.ones(channels)
        out = cls(a_log, w_b, w_c, w_delta, bias_delta, skip_d)
        return out.astype(dtype)

    def astype(self, dtype) -> "SsmParams":
        return SsmParams(*(np.asarray(getattr(self, f.name), dtype=dtype) for f in fields(self)))

    def zeros_like(self) -> "SsmParams":
        return SsmParams(*(np.zeros_like(getattr(self, f.name), dtype=np.float64)
                           for f in fields(self)))

    def __getitem__(self, idx) -> "SsmParams":
        """Index the leading (stack) axes."""
        return SsmParams(*(getattr(self, f.name)[idx] for f in fields(self)))

    @classmethod
    def stack(cls, params) -> "SsmParams":
        params = list(params)
        return cls(*(np.stack([getattr(p, f.name) for p in params]) for f in fields(cls)))

    def replace(self, **kw) -> "SsmParams":
        return replace(self, **kw)


@dataclass
class ScanResult:
    y: np.ndarray  # (..., L, C)
    h_final: np.ndarray  # (..., C, N)
    h_trace: np.ndarray | None = None  # (..., L, C, N)


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_finite(x, what="input"):
    if not np.all(np.isfinite(x)):
        raise DomainError(f"non-finite values in {what}")


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _expand_params(params: SsmParams):
    """Insert a length axis after the stack axes so parameters broadcast over (..., L, C, N)."""
    A = params.A[..., None, :, :]
    bias = params.bias_delta[..., None, :]
    skip = params.skip_d[..., None, :]
    return A, bias, skip


def project_params(x, params: SsmParams):
    """Input-dependent ``B_t``, ``C_t`` and ``Δ_t`` for each position of ``x`` (..., C)."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    b = x @ params.w_b
    c = x @ params.w_c
    z = x @ params.w_delta + params.bias_delta
    delta = np.clip(softplus(z), DELTA_MIN, DELTA_MAX)
    return b, c, delta


def _zoh_factor(a, delta):
    """``E = (exp(Δa) - 1) / a``, i.e. ``B̄ = E·B``; falls back to ``E = Δ`` when ``|Δa|`` underflows."""
    da = delta * a
    small = np.abs(da) < SERIES_EPS
    safe_a = np.where(small, 1.0, a)
    return np.where(small, delta, np.expm1(da) / safe_a), da, small


def discretize(a, b, delta):
    """Zero-order hold for diagonal ``A``, elementwise with numpy broadcasting.

    Returns ``(a_bar, b_bar)`` with ``a_bar = exp(Δa)`` and
    ``b_bar = (Δa)^-1 (exp(Δa) - 1) Δb``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise DomainError("delta must be strictly positive")
    e, da, _ = _zoh_factor(a, delta)
    return np.exp(da), e * b


def _recurrence_sequential(a_bar, u, h0):
    """h_t = a_bar_t * h_{t-1} + u_t over axis 0. Returns all states."""
    out = np.empty(np.broadcast_shapes(u.shape, (1,) + np.shape(h0)))
    h = h0
    for t in range(u.shape[0]):
        h = a_bar[t] * h + u[t]
        out[t] = h
    return out


def _recurrence_parallel(a_bar, u, h0, inject_fault=False):
    """Hillis-Steele inclusive scan of the affine maps ``h -> a*h + u`` over axis 0.

    ``h0`` enters as a virtual leading element ``(1, h0)``.
    """
    shape = np.broadcast_shapes(u.shape, (1,) + np.shape(h0))
    a = np.concatenate([np.ones((1,) + shape[1:]), np.broadcast_to(a_bar, shape)], axis=0)
    b = np.concatenate([np.broadcast_to(h0, (1,) + shape[1:]), np.broadcast_to(u, shape)], axis=0)
    n = a.shape[0]
    step = 1
    while step < n:
        # (a_l, b_l) then (a_r, b_r) composes to (a_l*a_r, a_r*b_l + b_r)
        if inject_fault:
            nb = a[step:] * b[:-step] - b[step:]
        else:
            nb = a[step:] * b[:-step] + b[step:]
        na = a[step:] * a[:-step]
        b[step:] = nb
        a[step:] = na
        step *= 2
    return b[1:]


def _as_sequence(seq, params: SsmParams):
    x = np.asarray(seq)
    if x.ndim < 2:
        raise DomainError(f"sequence must be (..., L, C), got shape {x.shape}")
    if x.shape[-1] != params.channels:
        raise DomainError(f"channel mismatch: sequence has {x.shape[-1]}, params {params.channels}")
    _check_finite(x, "sequence")
    return x


def _initial_state(h0, x, params):
    n = params.state_size
    if h0 is None:
        return np.zeros((params.channels, n))
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.shape[-2:] != (params.channels, n):
        raise DomainError(f"h0 shape {h0.shape} incompatible with ({params.channels}, {n})")
    _check_finite(h0, "h0")
    return h0


def _batch_shape(x, A, h0):
    return np.broadcast_shapes(x.shape[:-2], A.shape[:-3], np.shape(h0)[:-2])


def _fused_forward(x, A, bt, ct, delta, h0):
    """Compiled recurrence; returns ``(readout C h, h_all, expm1(ΔA))``."""
    batch = _batch_shape(x, A, h0)
    L, C = x.shape[-2:]
    N = A.shape[-1]
    fx, fd = K.flat(x, batch, (L, C)), K.flat(delta, batch, (L, C))
    fa = K.flat(A[..., 0, :, :], batch, (C, N))
    fb, fh0 = K.flat(bt, batch, (L, N)), K.flat(h0, batch, (C, N))
    h_all = np.empty((fx.shape[0], L, C, N))
    em1 = np.expm1(fd[..., None] * fa[:, None])
    y = np.empty_like(fx)
    K.scan_forward(fd, fa, fb, K.flat(ct, batch, (L, N)), fx, fh0, h_all, em1, y)
    return y.reshape(batch + (L, C)), h_all.reshape(batch + (L, C, N)), em1


def scan_infer(x, params: SsmParams, h0=None):
    """Forward-only scan ``(y, h_final)`` that never materialises the per-step states.

    Memory is O(L·C) instead of O(L·C·N); falls back to :func:`selective_scan`
    when the compiled kernels are unavailable.
    """
    x = np.asarray(x, dtype=np.float64)
    h0 = _initial_state(h0, x, params)
    if not K.AVAILABLE:
        y, h_all, _ = selective_scan(x, params, h0)
        return y, h_all[..., -1, :, :]
    A, bias, skip = _expand_params(params)
    delta = np.clip(softplus(x @ params.w_delta + bias), DELTA_MIN, DELTA_MAX)
    batch = _batch_shape(x, A, h0)
    L, C = x.shape[-2:]
    N = A.shape[-1]
    fx = K.flat(x, batch, (L, C))
    y = np.empty_like(fx)
    h_final = np.empty((fx.shape[0], C, N))
    K.scan_infer(K.flat(delta, batch, (L, C)), K.flat(A[..., 0, :, :], batch, (C, N)),
                 K.flat(x @ params.w_b, batch, (L, N)), K.flat(x @ params.w_c, batch, (L, N)),
                 fx, K.flat(h0, batch, (C, N)), y, h_final)
    return y.reshape(batch + (L, C)) + skip * x, h_final.reshape(batch + (C, N))


def selective_scan(x, params: SsmParams, h0=None, method="sequential", inject_fault=False):
    """Batched selective scan with cache for :func:`selective_scan_backward`.

    ``method`` is ``"sequential"`` (numpy time loop), ``"parallel"``
    (Hillis-Steele) or ``"fused"`` (compiled per-element loop, used for training).

    ``x`` is (..., L, C); parameter stack axes broadcast against ``...``.
    Returns ``(y, h_all, cache)`` in float64; ``h_all`` is (..., L, C, N).
    """
    x = np.asarray(x, dtype=np.float64)
    h0 = _initial_state(h0, x, params)
    A, bias, skip = _expand_params(params)
    bt = x @ params.w_b  # (..., L, N)
    ct = x @ params.w_c
    z = x @ params.w_delta + bias
    sp = softplus(z)
    delta = np.clip(sp, DELTA_MIN, DELTA_MAX)
    if method == "fused":
        y, h_all, em1 = _fused_forward(x, A, bt, ct, delta, h0)
        y = y + skip * x
        cache = dict(x=x, params=params, h0=h0, A=A, bt=bt, ct=ct, z=z, sp=sp, delta=delta,
                     h_all=h_all, em1=em1, method=method)
        return y, h_all, cache
    e, da, small = _zoh_factor(A, delta[..., None])
    a_bar = np.exp(da)
    b_bar = e * bt[..., None, :]
    u = b_bar * x[..., None]

    # time axis first for the recurrence
    a_t = np.moveaxis(a_bar, -3, 0)
    u_t = np.moveaxis(u, -3, 0)
    if method == "sequential":
        h_t = _recurrence_sequential(a_t, u_t, h0)
    elif method == "parallel":
        h_t = _recurrence_parallel(a_t, u_t, h0, inject_fault=inject_fault)
    else:
        raise ValueError(f"unknown scan method {method!r}")
    h_all = np.moveaxis(h_t, 0, -3)
    y = np.einsum("...lcn,...ln->...lc", h_all, ct) + skip * x
    cache = dict(x=x, params=params, h0=h0, A=A, bt=bt, ct=ct, z=z, sp=sp, delta=delta,
                 e=e, small=small, a_bar=a_bar, b_bar=b_bar, h_all=h_all, method=method)
    return y, h_all, cache


def _reverse_adjoint(a_bar, direct, method):
    """G_t = direct_t + a_bar_{t+1} * G_{t+1} along axis -3."""
    a_next = np.zeros_like(a_bar)
    a_next[..., :-1, :, :] = a_bar[..., 1:, :, :]
    a_r = np.moveaxis(a_next[..., ::-1, :, :], -3, 0)
    d_r = np.moveaxis(direct[..., ::-1, :, :], -3, 0)
    zero = np.zeros(d_r.shape[1:])
    if method == "parallel":
        g = _recurrence_parallel(a_r, d_r, zero)
    else:
        g = _recurrence_sequential(a_r, d_r, zero)
    return np.moveaxis(g, 0, -3)[..., ::-1, :, :]


def _fused_backward(cache, gy, gh_extra):
    x, A, bt, ct, delta, h0, h_all = (cache[k] for k in ("x", "A", "bt", "ct", "delta", "h0", "h_all"))
    batch = h_all.shape[:-3]
    L, C, N = h_all.shape[-3:]
    fx, fd = K.flat(x, batch, (L, C)), K.flat(delta, batch, (L, C))
    fa = K.flat(A[..., 0, :, :], batch, (C, N))
    fb, fh0 = K.flat(bt, batch, (L, N)), K.flat(h0, batch, (C, N))
    fh = K.flat(h_all, batch, (L, C, N))
    extra = np.zeros((1, 1, 1, 1)) if gh_extra is None else K.flat(gh_extra, batch, (L, C, N))
    B = fx.shape[0]
    gx, g_delta = np.zeros((B, L, C)), np.zeros((B, L, C))
    g_bt, g_ct = np.zeros((B, L, N)), np.zeros((B, L, N))
    g_A, gh0 = np.empty((B, C, N)), np.empty((B, C, N))
    K.scan_backward(fd, fa, fb, K.flat(ct, batch, (L, N)), fx, fh0, fh, cache["em1"],
                    K.flat(gy, batch, (L, C)), extra, gh_extra is not None,
                    gx, g_bt, g_ct, g_delta, g_A, gh0)
    shape = lambda a: a.reshape(batch + a.shape[1:])
    # results are over the full broadcast batch; callers reduce with _sum_to
    return (shape(gx), _sum_to(shape(g_bt), bt.shape), _sum_to(shape(g_ct), ct.shape),
            _sum_to(shape(g_delta), delta.shape), shape(g_A), shape(gh0))


def selective_scan_backward(gy, cache, gh_extra=None):
    """Reverse-mode pass of :func:`selective_scan`.

    ``gh_extra`` (same shape as ``h_all``) adds gradient flowing directly into
    intermediate states, e.g. a state read out mid-sequence. Returns ``(gx, gparams, gh0)`` where ``gparams`` is an :class:`SsmParams`
    of float64 gradients shaped like the forward parameters.
    """
    gy = np.asarray(gy, dtype=np.float64)
    x, params, h0 = cache["x"], cache["params"], cache["h0"]
    A, bt, ct = cache["A"], cache["bt"], cache["ct"]
    delta, h_all = cache["delta"], cache["h_all"]
    skip = params.skip_d[..., None, :]

    g_skip = _sum_to((gy * x).sum(axis=-2), params.skip_d.shape)
    gx = gy * skip
    if cache["method"] == "fused":
        g_local, g_bt, g_ct, g_delta, g_A, gh0 = _fused_backward(cache, gy, gh_extra)
        gx = gx + g_local
        gh0 = _sum_to(gh0, h0.shape)
        g_A = g_A[..., None, :, :]
    else:
        g_ct = np.einsum("...lc,...lcn->...ln", gy, h_all)
        direct = gy[..., None] * ct[..., None, :]
        if gh_extra is not None:
            direct = direct + gh_extra
        a_bar, b_bar, e, small = cache["a_bar"], cache["b_bar"], cache["e"], cache["small"]
        G = _reverse_adjoint(a_bar, direct, cache["method"])

        h_prev = np.empty_like(h_all)
        h_prev[..., 1:, :, :] = h_all[..., :-1, :, :]
        h_prev[..., 0, :, :] = h0
        g_a_bar = G * h_prev
        gh0 = _sum_to((a_bar[..., 0, :, :] * G[..., 0, :, :]), h0.shape)

        g_b_bar = G * x[..., None]
        gx = gx + (G * b_bar).sum(axis=-1)
        g_e = g_b_bar * bt[..., None, :]
        g_bt = (g_b_bar * e).sum(axis=-2)

        d = delta[..., None]
        # dE/dΔ = a_bar, dE/dA = (Δ a_bar - E)/A (series: Δ²/2)
        safe_A = np.where(small, 1.0, A)
        de_dA = np.where(small, 0.5 * d * d, (d * a_bar - e) / safe_A)
        g_delta = (g_e * a_bar + g_a_bar * a_bar * A).sum(axis=-1)
        g_A = g_e * de_dA + g_a_bar * a_bar * d
    g_a_log = _sum_to(g_A, params.A.shape[:-2] + (1,) + params.A.shape[-2:])
    g_a_log = g_a_log.reshape(params.a_log.shape) * params.A

    sp = cache["sp"]
    live = (sp > DELTA_MIN) & (sp < DELTA_MAX)
    g_z = g_delta * sigmoid(cache["z"]) * live

    def wgrad(g_out, w):
        return _sum_to(np.swapaxes(x, -1, -2) @ g_out, w.shape)

    g_w_delta = wgrad(g_z, params.w_delta)
    g_bias = _sum_to(g_z.sum(axis=-2), params.bias_delta.shape)
    g_w_b = wgrad(g_bt, params.w_b)
    g_w_c = wgrad(g_ct, params.w_c)
    gx = gx + g_z @ np.swapaxes(params.w_delta, -1, -2) \
        + g_bt @ np.swapaxes(params.w_b, -1, -2) + g_ct @ np.swapaxes(params.w_c, -1, -2)
    grads = SsmParams(g_a_log, g_w_b, g_w_c, g_w_delta, g_bias, g_skip)
    return gx, grads, gh0


def scan_sequential(seq, params: SsmParams, h0=None, trace=False) -> ScanResult:
    """Reference scan: one time step at a time.

    ``h_t = a_bar_t * h_{t-1} + b_bar_t * x_t`` and
    ``y_t = <c_t, h_t> + skip_d * x_t`` for every channel.
    """
    x = _as_sequence(seq, params)
    y, h_all, _ = selective_scan(x, params, h0, method="sequential")
    return ScanResult(y.astype(x.dtype, copy=False), h_all[..., -1, :, :].astype(x.dtype, copy=False),
                      h_all.astype(x.dtype, copy=False) if trace else None)


def scan_parallel(seq, params: SsmParams, h0=None, *, inject_fault=False) -> ScanResult:
    """Associative-scan variant of :func:`scan_sequential` (log-depth over time).

    ``inject_fault`` flips the sign in the combine step; it exists only so the
    verification harness can prove it detects a broken kernel.
    """
    x = _as_sequence(seq, params)
    y, h_all, _ = selective_scan(x, params, h0, method="parallel", inject_fault=inject_fault)
    return ScanResult(y.astype(x.dtype, copy=False), h_all[..., -1, :, :].astype(x.dtype, copy=False))


def scan_backward(seq, params: SsmParams, h0, upstream_grad):
    """Gradients of ``sum(upstream_grad * y)`` w.r.t. the sequence, parameters and ``h0``.

    Recomputes the forward pass.
    """
    x = _as_sequence(seq, params)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != x.shape:
        raise DomainError(f"upstream gradient shape {upstream_grad.shape} != sequence {x.shape}")
    _, _, cache = selective_scan(x, params, h0)
    return selective_scan_backward(upstream_grad, cache)
