"""Tour of the float64 autodiff core: tapes, gradients, checks, and a tiny fit.

Everything downstream (encoders, the field predictor, both training loops)
runs on the Tensor class shown here, so this file is the fastest way to see
what the engine does and how to trust it: build a graph, pull gradients off
it, compare them against central differences, then let Adam fit a line.
"""

import numpy as np

from motionflow import Adam, Linear, ParamStore, SeededRng, Tensor, backward, gradcheck


def gradients_by_hand():
    print("== gradients from a recorded graph ==")
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    w = Tensor(np.array([1.5, 0.25, -0.75]), requires_grad=True)
    y = ((w * x).tanh() ** 2).sum()
    backward(y)

    # d/dx tanh(wx)^2 = 2 tanh(wx) (1 - tanh(wx)^2) w, written out by hand
    s = np.tanh(w.numpy() * x.numpy())
    expected = 2.0 * s * (1.0 - s * s) * w.numpy()
    print(f"value        {y.item():+.6f}")
    print(f"x.grad       {np.array2string(x.grad, precision=6)}")
    print(f"hand-derived {np.array2string(expected, precision=6)}")
    print(f"max diff     {np.abs(x.grad - expected).max():.2e}\n")


def check_against_differences():
    print("== central-difference check on a composite map ==")
    rng = SeededRng(3).spawn("demo-gradcheck")
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    report = gradcheck(lambda p, q: ((p @ q).tanh() * 0.5).sum(), [a, b])
    print(report.summary() + "\n")


def fit_a_line():
    print("== fitting y = 2x - 1 with Adam ==")
    rng = SeededRng(14).spawn("demo-fit")
    xs = rng.uniform(-1.0, 1.0, size=(128, 1))
    ys = 2.0 * xs - 1.0 + 0.05 * rng.normal(size=(128, 1))

    store = ParamStore()
    line = Linear(store, "line", 1, 1, rng.spawn("init"))
    opt = Adam(store, lr=0.05)
    for step in range(201):
        opt.zero_grad()
        err = line(Tensor(xs)) - Tensor(ys)
        loss = (err * err).mean()
        backward(loss)
        opt.step()
        if step % 50 == 0:
            print(f"step {step:>3}  mse {loss.item():.5f}")
    w = float(line.weight.numpy()[0, 0])
    b = float(line.bias.numpy()[0])
    print(f"learned slope {w:+.3f}, intercept {b:+.3f} (target +2.000, -1.000)")


def main():
    gradients_by_hand()
    check_against_differences()
    fit_a_line()


if __name__ == "__main__":
    main()
