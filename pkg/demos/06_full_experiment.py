"""
The four-method comparison, end to end
======================================

Runs the whole pipeline on a small synthetic cohort: generate, split
6:2:2, train the CNN from random weights (best of an ensemble), pre-train
on the tumour task and fine-tune, sweep the SUVmax percentile on
validation, then evaluate all four methods on the held-out test cases and
print the comparison table.

Sized to finish in a few minutes on one CPU core. The same flow is
available from the command line:

    lrrseg phantom --out cohort --n 14 --n-pretrain 6 --seed 11
    lrrseg split --manifest cohort/cohort.json --out run --seed 11
    lrrseg train --manifest cohort/cohort.json --out run --seed 11
    lrrseg sweep --manifest cohort/cohort.json --out run --seed 11
    lrrseg evaluate --manifest cohort/cohort.json --out run --seed 11
"""

import os
import tempfile

from lrrseg import cli, unet3d

workdir = tempfile.mkdtemp(prefix="lrrseg_demo_")
manifest = cli.run_phantom(os.path.join(workdir, "cohort"), n=14, n_pretrain=6, seed=11)

cfg = cli.ExperimentConfig(
    manifest=manifest,
    out=os.path.join(workdir, "run"),
    seed=11,
    crop_dims=(24, 24, 24),
    train=unet3d.TrainConfig(seed=11, max_epochs=4, ensemble_size=2),
    methods=("ai_random", "ai_finetune", "suvmax", "gtv"),
)

split = cli.run_split(cfg)
print(f"split: {len(split.train)} train / {len(split.val)} val / {len(split.test)} test")

summary = cli.run_train(cfg)
for method, s in summary["methods"].items():
    print(f"{method}: best val dice {s['best_val_dice']:.3f} "
          f"(run {s['best_run']}, epoch {s['best_epoch']})")

sweep = cli.run_sweep(cfg)
print(f"suvmax sweep: best percent {sweep.best_percent} "
      f"(val mean dice {sweep.best_mean_dice:.3f})")

cli.run_evaluate(cfg)
print()
print(open(os.path.join(cfg.out, "report.txt")).read())
print(f"artifacts in {cfg.out}")
