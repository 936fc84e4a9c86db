"""Support forgetting along the hybrid block's scan, with and without recapping.

Run: python3 demos/forgetting_probe.py
"""
from hmamba.diagnostics import forgetting_statistics, forgetting_trial

recap, plain = forgetting_trial(3)
print("boundary  kind     recap   | no-recap")
for i in range(len(recap.kind)):
    right = f"{plain.kind[i]:8s} {plain.similarity[i]:.3f}" if i < len(plain.kind) else ""
    print(f"{i:8d}  {recap.kind[i]:8s} {recap.similarity[i]:.3f}   | {right}")

rate, decay = forgetting_statistics(trials=30, seed=0)
print(f"\nover 30 trials: recap recovers at {rate:.0%} of support boundaries, "
      f"no-recap similarity ends at or below its start in {decay:.0%}")

for size in (16, 60):
    r, d = forgetting_statistics(trials=20, seed=1, size=size)
    print(f"feature map {size}x{size}: recovery {r:.2f}, decay {d:.2f}")
