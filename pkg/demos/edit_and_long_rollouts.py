"""Steer one factor at a time, then roll far past the training window.

Two things the factored conditioning buys.  First, swapping only the eye
channels of the driving condition should change the eye coefficients of the
output and little else -- printed here as per-factor deltas between paired
rollouts.  Second, windowed generation with a few frames of carried context
should not show visible seams where windows meet -- printed here as the
jump size at seam frames versus everywhere else.

Reuses the run directory written by train_sample_eval.py (and trains the
same configuration first if it is missing).
"""

import os

import numpy as np

from motionflow.harness import (
    ExperimentConfig,
    boundary_jump_stats,
    load_run,
    run_sample,
    run_train,
)
from motionflow.motionspace import sequence_from_csv

RUN_DIR = os.path.join("demo-out", "tiny-run")


def quick_config(seed: int = 5) -> ExperimentConfig:
    # same recipe as train_sample_eval.py
    return ExperimentConfig(
        seed=seed, stage1_steps=800, pool_sequences=48, pool_len=6,
        stage1_hidden=32, m=16, eye_dim=4, lip_dim=4,
        h=32, heads=2, layers=1, radius=2, time_dim=8, window=8, context=2,
        flow_steps=1500, flow_batch=8, train_sequences=12, train_frames=32,
        checkpoint_every=300, solver_steps=16, eval_sequences=4, eval_frames=32)


def read_sequences(sample_dir):
    out = {}
    for name in sorted(os.listdir(sample_dir)):
        if name.startswith("seq") and name.endswith(".csv"):
            with open(os.path.join(sample_dir, name)) as fh:
                out[name] = sequence_from_csv(fh.read())[0]
    return out


def eye_edits(run_dir):
    print("== swapping only the eye condition channels ==")
    sample_dir = run_sample(run_dir, edit="eye", count=3,
                            out_dir=os.path.join("demo-out", "edit"))
    sequences = read_sequences(sample_dir)
    print(f"{'pair':<9} {'d-eye':>8} {'d-lip':>8} {'d-pose':>8} {'ratio':>7}")
    for name, base in sequences.items():
        if not name.endswith("-base.csv"):
            continue
        edited = sequences[name.replace("-base.csv", "-edit-eye.csv")]
        deltas = {f: np.abs(base.factor_coeffs[f] - edited.factor_coeffs[f]).mean()
                  for f in ("eye", "lip", "pose")}
        ratio = deltas["eye"] / max(deltas["lip"], deltas["pose"])
        tag = name[: -len("-base.csv")]
        print(f"{tag:<9} {deltas['eye']:>8.3f} {deltas['lip']:>8.3f} "
              f"{deltas['pose']:>8.3f} {ratio:>6.1f}x")
    print("even this ~20-second model steers mostly the eye coefficients; "
          "the default\npreset (`motionflow train`) sharpens the ratio to "
          "roughly an order of magnitude\n")


def long_rollouts(run_dir):
    config, *_ = load_run(run_dir)
    frames = 96
    print(f"== {frames}-frame rollouts from a window-{config.window} model ==")
    sample_dir = run_sample(run_dir, frames=frames, count=3,
                            out_dir=os.path.join("demo-out", "long"))
    print(f"{'sequence':<10} {'seam jump':>10} {'interior':>10} {'ratio':>7}")
    for name, seq in read_sequences(sample_dir).items():
        stats = boundary_jump_stats(seq.latents, config.window, config.context)
        print(f"{name[:8]:<10} {stats['seam_median']:>10.3f} "
              f"{stats['interior_median']:>10.3f} {stats['ratio']:>7.2f}")
    print("ratios near 1 mean the seams between generation windows are "
          "indistinguishable\nfrom ordinary motion")


def main():
    if not os.path.isfile(os.path.join(RUN_DIR, "config.ini")):
        print("no trained run found; training the quick configuration first...")
        run_train(quick_config(), out_dir=RUN_DIR)
    eye_edits(RUN_DIR)
    long_rollouts(RUN_DIR)


if __name__ == "__main__":
    main()
