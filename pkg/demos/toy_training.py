"""Short episodic training of the full model and two ablations on synthetic shapes.

Run: python3 demos/toy_training.py [steps]   (the acceptance runs use 2000 steps)
"""
import sys

from hmamba.experiments import benchmark, intra_class_delta, train_run

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
train, val = benchmark(n_train=400, n_val=60)
print(f"{len(train)} training episodes (base shapes), {len(val)} validation episodes (novel shapes)")
for ablation in ("srm-basic", "srm-recap", "full"):
    run = train_run(ablation, seed=0, train=train, val=val, steps=steps)
    start, end = run.smoothed_drop(50)
    print(f"{ablation:10s} loss {start:.3f} -> {end:.3f}  val mIoU {run.val_miou:.3f}  "
          f"intra-class delta {intra_class_delta(run.weights, run.config, val):+.3f}  ({run.seconds:.0f} s)")
