"""Train the flow on a dataset whose optimal field is known, then check it.

With training pairs x1 = x0 + b for one fixed vector b, the ideal velocity
field is the constant b everywhere -- no approximation, no estimate.  The
micro-shift preset builds exactly that dataset, so after a ~10 second
training run we can probe the network at random states and times and
measure how far it is from the truth.  This is the same oracle the test
suite holds the trainer to.
"""

import os
import time

import numpy as np

from motionflow import SeededRng, Tensor, no_grad, predict_field
from motionflow.harness import constant_shift_vector, load_run, preset_config, run_train

OUT_DIR = os.path.join("demo-out", "shift-run")


def main():
    config = preset_config("micro-shift", seed=0)
    print(f"training the micro-shift preset (d={config.d}, "
          f"{config.flow_steps} flow steps)...")
    started = time.monotonic()
    run_dir = run_train(config, out_dir=OUT_DIR)
    print(f"trained in {time.monotonic() - started:.1f}s -> {run_dir}\n")

    config, _, _, predictor, _ = load_run(run_dir)
    shift = constant_shift_vector(config.d, config.seed)
    print(f"true field b = {np.array2string(shift, precision=3)}\n")

    pcfg = predictor.config
    rng = SeededRng(config.seed).spawn("demo-probes")
    cond = np.zeros((pcfg.F, pcfg.cond_dim))
    prev = np.zeros((pcfg.context, pcfg.d))
    errors = []
    with no_grad():
        for _ in range(100):
            t = float(rng.uniform())
            x = rng.normal(size=(pcfg.F, pcfg.d)) + t * shift
            v = predict_field(predictor, x, cond, t, prev).numpy()
            errors.append(float(np.abs(v - shift).max()))
    errors = np.asarray(errors)

    print("probed the trained field at 100 random (state, time) points:")
    print(f"  mean |v - b|  {errors.mean():.4f}")
    print(f"  worst |v - b| {errors.max():.4f}")
    print("\nthe field learned the constant almost exactly; loss curves and "
          f"checkpoints live under {run_dir}")


if __name__ == "__main__":
    main()
