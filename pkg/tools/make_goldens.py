"""Record golden fixtures. Run once; outputs are committed and never regenerated.

Usage: python3 tools/make_goldens.py
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from motionflow.fieldnet import Block, PredictorConfig, modulation_coeffs  # noqa: E402
from motionflow.motionspace import SurrogateExtractors, extract_features  # noqa: E402
from motionflow.params import ParamStore  # noqa: E402
from motionflow.rng import SeededRng  # noqa: E402
from motionflow.tensor import Tensor  # noqa: E402

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "..", "tests", "golden")


def extractor_golden():
    d, p, q, seed = 8, 4, 4, 42
    ex = SurrogateExtractors(d, p, q, seed=seed)
    x = np.arange(1.0, 9.0)  # fixed probe vector
    record = {
        "d": d,
        "p": p,
        "q": q,
        "seed": seed,
        "input": x.tolist(),
        "phi_output": extract_features(ex, x, "phi").tolist(),
        "psi_output": extract_features(ex, x, "psi").tolist(),
    }
    path = os.path.join(GOLDEN_DIR, "extract_features_seed42.json")
    if os.path.exists(path):
        print(f"refusing to overwrite locked golden: {path}")
        return
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1)
    print(f"wrote {path}")


def modulation_golden():
    h, seed = 8, 7
    cfg = PredictorConfig(d=4, h=h, heads=2, layers=1, T=1, F=3,
                          time_dim=4, cond_dim=3, context=1)
    block = Block(ParamStore(), "block0", cfg, SeededRng(seed))
    c = np.linspace(-1.0, 1.0, h)  # fixed probe embedding
    names = ["gamma1", "beta1", "alpha1", "gamma2", "beta2", "alpha2"]
    coeffs = modulation_coeffs(block.mod, Tensor(c))
    record = {
        "h": h,
        "seed": seed,
        "input": c.tolist(),
        "coeffs": {n: v.numpy().tolist() for n, v in zip(names, coeffs)},
    }
    path = os.path.join(GOLDEN_DIR, "modulation_seed7.json")
    if os.path.exists(path):
        print(f"refusing to overwrite locked golden: {path}")
        return
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1)
    print(f"wrote {path}")


def main():
    os.makedirs(GOLDEN_DIR, exist_ok=True)
    extractor_golden()
    modulation_golden()


if __name__ == "__main__":
    main()
