"""Selective scan walkthrough: ZOH, the three scan paths, and the one-step query scan.

Run: python3 demos/scan_walkthrough.py
"""
import numpy as np

from hmamba import SsmParams, discretize, scan_parallel, scan_sequential
from hmamba.hmb import qim_forward
from hmamba.ssm import scan_infer, selective_scan
from hmamba.verify import random_problem, rel_error

# ZOH with A=-1, B=1, delta=ln 2 halves the state and injects half the input
a_bar, b_bar = discretize(-1.0, 1.0, np.log(2.0))
print(f"ZOH(A=-1, B=1, delta=ln2): a_bar={a_bar:.15f} b_bar={b_bar:.15f}")

# tiny steps fall back to the series form instead of 0/0
print("series limit, delta=1e-12:", discretize(-1.0, 2.5, 1e-12))

x, p, h0 = random_problem(1000, seed=0)
ref = scan_sequential(x, p, h0)
par = scan_parallel(x, p, h0)
fused, _, _ = selective_scan(x, p, h0, method="fused")
y_inf, h_inf = scan_infer(x, p, h0)
print("L=1000 rel error vs sequential:")
print(f"  parallel {rel_error(par.y, ref.y):.1e}  fused {rel_error(fused, ref.y):.1e}  "
      f"inference {rel_error(y_inf, ref.y):.1e}  final state {rel_error(h_inf, ref.h_final):.1e}")

# query pixels as length-1 scans from the support state: each pixel is independent
rng = np.random.default_rng(1)
theta = SsmParams.init(4, 3, rng=rng)
h_s = rng.normal(size=(4, 3))
q = rng.normal(size=(3, 3, 4))
y = qim_forward(q, h_s, theta)
one = scan_sequential(q[1, 2][None], theta, h0=h_s).y[0]
print("closed-form query step vs explicit scan:", f"{rel_error(y[1, 2], one):.1e}")
q[0, 0] += 1.0
changed = np.any(qim_forward(q, h_s, theta) != y, axis=-1)
print("pixels changed after editing one query pixel:", int(changed.sum()))
