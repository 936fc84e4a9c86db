"""Wall-clock scaling of the scan, the hybrid block's scans and a dense attention reference."""
from __future__ import annotations

import time

import numpy as np

from .diagnostics import attention_crossover, cost_model
from .ssm import SsmParams, scan_infer

DEFAULT_M = tuple(128 * 2 ** k for k in range(11))  # 128 .. 131072


def time_call(fn, reps: int = 3) -> float:
    """Best wall time of ``reps`` calls, after one warm-up call (the minimum is least disturbed by other load)."""
    fn()
    ts = []
    for _ in range(max(1, reps)):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return float(min(ts))


def scan_time(M: int, D: int, N: int, reps: int = 3, seed: int = 0) -> float:
    """One forward selective scan of length ``M`` over ``D`` channels."""
    rng = np.random.default_rng(seed)
    p = SsmParams.init(D, N, rng=rng)
    x = rng.normal(size=(M, D))
    return time_call(lambda: scan_infer(x, p), reps)


def scan_times(ms, D: int, N: int, rounds: int = 9, seed: int = 0) -> list:
    """Per-``M`` best scan time, with repetitions interleaved across the grid.

    Cycling through every ``M`` in each round means a slow spell of the host
    hits all lengths alike instead of one, so the minima stay comparable.
    """
    rng = np.random.default_rng(seed)
    p = SsmParams.init(D, N, rng=rng)
    xs = [rng.normal(size=(int(M), D)) for M in ms]
    for x in xs:
        scan_infer(x, p)
    best = [np.inf] * len(xs)
    for _ in range(max(1, rounds)):
        for i, x in enumerate(xs):
            t = time.perf_counter()
            scan_infer(x, p)
            best[i] = min(best[i], time.perf_counter() - t)
    return [float(b) for b in best]


def hybrid_time(M: int, D: int, N: int, alpha: int = 4, reps: int = 3, seed: int = 0) -> float:
    """Scan work of one hybrid block on ``M`` query pixels.

    Four directional scans over the length-``2M`` support/query sequence,
    plus the single-step query scan over ``M / alpha**2`` downsampled pixels.
    """
    rng = np.random.default_rng(seed)
    theta = SsmParams.stack([SsmParams.init(D, N, rng=rng) for _ in range(4)])
    seqs = rng.normal(size=(4, 2 * M, D))
    m_ds = max(1, M // (alpha * alpha))
    q = rng.normal(size=(m_ds, 1, D))
    h0 = rng.normal(size=(m_ds, D, N))

    def run():
        scan_infer(seqs, theta)
        scan_infer(q, theta[0], h0=h0)
    return time_call(run, reps)


def attention(x, wq, wk, wv, wo, chunk: int = 1024):
    """Single-head softmax self-attention, row-chunked so memory stays O(chunk * M)."""
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.empty_like(x)
    scale = 1.0 / np.sqrt(x.shape[-1])
    for i in range(0, len(x), chunk):
        s = (q[i:i + chunk] @ k.T) * scale
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        out[i:i + chunk] = s @ v
    return out @ wo


def attention_time(M: int, D: int, reps: int = 3, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(M, D))
    ws = [rng.normal(0, D ** -0.5, (D, D)) for _ in range(4)]
    return time_call(lambda: attention(x, *ws), reps)


def linear_fit(xs, ys):
    """Least-squares ``y = a + b x``; returns ``(slope, intercept, r2)``."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    b, a = np.polyfit(xs, ys, 1)
    resid = ys - (a + b * xs)
    ss_tot = ((ys - ys.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(b), float(a), float(r2)


def measured_crossover(ms, att, hyb):
    """Smallest grid ``M`` from which attention stays slower than the hybrid scans.

    Returns ``None`` when attention never overtakes within the grid.
    """
    slower = [a > h for a, h in zip(att, hyb)]
    for i in range(len(ms)):
        if all(slower[i:]):
            return int(ms[i])
    return None


def run_bench(ms=DEFAULT_M, D: int = 16, N: int = 8, alpha: int = 4, reps: int = 3,
              attention_max: int = 32768, seed: int = 0, scan_reps: int = 9):
    """Timing rows joined with the operation-count model, plus a fit summary.

    Attention is timed only up to ``attention_max`` (it is quadratic); rows
    above that carry ``None`` in the attention/hybrid columns. The lone scan
    is cheap, so it gets ``scan_reps`` interleaved rounds to steady the linear fit.
    """
    rows = []
    ms = sorted(int(m) for m in ms)
    for M, secs in zip(ms, scan_times(ms, D, N, max(reps, scan_reps), seed)):
        row = {"M": M, "scan_seconds": secs}
        if M <= attention_max:
            row["attention_seconds"] = attention_time(M, D, reps, seed)
            row["hybrid_seconds"] = hybrid_time(M, D, N, alpha, reps, seed)
        else:
            row["attention_seconds"] = row["hybrid_seconds"] = None
        row.update({k: v for k, v in cost_model(M, D, N, alpha).as_row().items()
                    if k.endswith("_flops")})
        rows.append(row)
    slope, intercept, r2 = linear_fit([r["M"] for r in rows], [r["scan_seconds"] for r in rows])
    timed = [r for r in rows if r["attention_seconds"] is not None]
    summary = {
        "D": D, "N": N, "alpha": alpha, "reps": reps,
        "scan_fit": {"slope_s_per_token": slope, "intercept_s": intercept, "r2": r2,
                     "loglog_slope": linear_fit(np.log([r["M"] for r in rows]),
                                                np.log([r["scan_seconds"] for r in rows]))[0]},
        "model_crossover_M": attention_crossover(D, N, alpha),
        "measured_crossover_M": measured_crossover([r["M"] for r in timed],
                                                   [r["attention_seconds"] for r in timed],
                                                   [r["hybrid_seconds"] for r in timed]),
        "attention_ratio_4x": _ratio_4x(timed),
    }
    return rows, summary


def _ratio_4x(rows):
    """``time(4M) / time(M)`` of attention for the largest timed pair on the grid."""
    by_m = {r["M"]: r["attention_seconds"] for r in rows}
    pairs = [(m, 4 * m) for m in by_m if 4 * m in by_m]
    if not pairs:
        return None
    m, m4 = max(pairs)
    return by_m[m4] / by_m[m]
