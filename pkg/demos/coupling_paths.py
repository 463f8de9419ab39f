"""Why minibatch transport coupling makes flow targets easier to regress.

Training pairs each noise window with a data window and asks the network to
predict the chord between them.  Pairing at random leaves long, crossing
chords whose directions nearly cancel; the cost-minimising assignment picks
short, coherent ones.  This demo pairs a Gaussian cloud with an off-centre
ring three ways and prints what each choice does to transport cost and to
the spread of the regression targets.
"""

import numpy as np

from motionflow import SeededRng, ot_couple


def describe(name: str, x0: np.ndarray, x1: np.ndarray, perm: np.ndarray):
    chords = x1[perm] - x0
    cost = float((chords ** 2).sum())
    mean_len = float(np.linalg.norm(chords, axis=1).mean())
    # dispersion of the per-pair velocity targets around their mean direction
    spread = float(np.linalg.norm(chords - chords.mean(axis=0), axis=1).mean())
    print(f"{name:<9} cost {cost:>9.2f}   mean chord {mean_len:.3f}   "
          f"target spread {spread:.3f}")
    return cost


def main():
    rng = SeededRng(0).spawn("demo-clouds")
    n = 64
    x0 = rng.normal(size=(n, 2))  # noise cloud at the origin
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ring = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    x1 = 3.0 * ring + np.array([4.0, 0.0]) + 0.2 * rng.normal(size=(n, 2))

    print(f"pairing a {n}-point Gaussian cloud with an off-centre ring\n")
    identity = describe("identity", x0, x1, np.arange(n))
    greedy = ot_couple(x0, x1, method="greedy")
    describe("greedy", x0, x1, greedy.permutation)
    exact = ot_couple(x0, x1, method="exact")
    describe("exact", x0, x1, exact.permutation)

    saved = 100.0 * (1.0 - exact.total_cost / identity)
    moved = int((exact.permutation != np.arange(n)).sum())
    print(f"\nexact assignment re-pairs {moved}/{n} rows and cuts transport "
          f"cost by {saved:.1f}%")
    print("shorter, more parallel chords mean the field regresses a smoother "
          "target,\nwhich is exactly why training couples each batch before "
          "building paths")


if __name__ == "__main__":
    main()
