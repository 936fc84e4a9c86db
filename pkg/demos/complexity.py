"""Operation counts against measured scan / attention time.

Run: python3 demos/complexity.py
"""
from hmamba.bench import run_bench
from hmamba.diagnostics import attention_crossover, cost_model

D, N, alpha = 16, 8, 4
for M in (64, 256, 1024, 4096):
    r = cost_model(M, D, N, alpha)
    print(f"M={M:5d}  attention {int(r.attention_flops):>12,}  hybrid {float(r.hybrid_flops):>12,.0f}")
print("model crossover M* =", attention_crossover(D, N, alpha))

rows, summary = run_bench(ms=[256 * 2 ** k for k in range(7)], attention_max=8192)
print("\n     M   scan ms   attention ms   hybrid ms")
for r in rows:
    att = "-" if r["attention_seconds"] is None else f"{1e3 * r['attention_seconds']:.1f}"
    hyb = "-" if r["hybrid_seconds"] is None else f"{1e3 * r['hybrid_seconds']:.1f}"
    print(f"{r['M']:6d}  {1e3 * r['scan_seconds']:8.2f}  {att:>13}  {hyb:>10}")
fit = summary["scan_fit"]
print(f"scan linear fit R^2 {fit['r2']:.4f}, log-log slope {fit['loglog_slope']:.2f}")
print("measured crossover M =", summary["measured_crossover_M"],
      "(the constant factors of compiled scans and BLAS matmuls differ from raw counts)")
