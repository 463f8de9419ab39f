"""Euler integration of the learned field and sliding-window generation.

Sampling runs the flow ODE from t=0 noise to t=1 latents on a fixed uniform
grid.  Long sequences are produced window by window: every segment integrates
a full window whose first `context` frames re-create the conditioning context
(previous generated frames at sampling time, zeros on the cold start) and
contributes only the remaining frames as new output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SeededRng
from .tensor import ShapeError


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state; carries the offending step."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"non-finite state after Euler step {step}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


@dataclass(frozen=True)
class SolverConfig:
    """Uniform-grid Euler settings plus the windowing of long generations."""

    steps: int
    window: int
    context: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0 <= self.context < self.window:
            raise ValueError(
                f"context must satisfy 0 <= context < window, got {self.context}")

    @property
    def step_size(self) -> float:
        return 1.0 / self.steps


@dataclass(frozen=True)
class Trajectory:
    """All N+1 states of one integration, indexed by t_k = k/N."""

    states: np.ndarray  # (N+1, ...) with states[0] the initial noise

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        n = self.steps
        return np.arange(n + 1) / n

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def euler_integrate(field, x0: np.ndarray, c, steps: int) -> Trajectory:
    """March x_{k+1} = x_k + (1/N) field(x_k, c, k/N) from t=0 to t=1.

    Keeps every intermediate state.  Exact for constant fields at any N;
    raises DivergenceError with the step index if a state goes non-finite.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DivergenceError(0, "initial state is non-finite")
    h = 1.0 / steps
    states = np.empty((steps + 1,) + x.shape)
    states[0] = x
    for k in range(steps):
        x = x + h * np.asarray(field(x, c, k / steps), dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, f"t = {k / steps:g} -> {(k + 1) / steps:g}")
        states[k + 1] = x
    return Trajectory(states=states)


def generate(predictor, conditions, config: SolverConfig, seed: int,
             window_sampler=None) -> np.ndarray:
    """Sample M frames of latents for M frames of conditions, window by window.

    Each segment integrates a full `window`-frame ODE from fresh noise; its
    first `context` frames re-create the previously generated context (zeros
    before the first segment) and the rest extend the output.  Pre-roll
    conditions are zeros; if the final window reaches past the requested
    length, conditions are edge-replicated and the output trimmed.

    `window_sampler` swaps the per-window integrator for another sampler with
    the same contract (e.g. ancestral diffusion): it is called with the
    window's conditions (window, cond_dim), the preceding context (context, d)
    or None, and the segment's seeded rng, and must return a full
    (window, d) array. The default draws noise from that rng and runs Euler.
    """
    cond = conditions.channels if hasattr(conditions, "channels") else conditions
    cond = np.asarray(cond, dtype=np.float64)
    pcfg = predictor.config
    if config.window != pcfg.F or config.context != pcfg.context:
        raise ValueError(
            f"solver window/context ({config.window}/{config.context}) must match "
            f"the predictor's ({pcfg.F}/{pcfg.context})")
    if cond.ndim != 2 or cond.shape[1] != pcfg.cond_dim:
        raise ShapeError(
            f"conditions must be (frames, {pcfg.cond_dim}), got {cond.shape}")
    total = cond.shape[0]
    w, ctx = config.window, config.context
    fresh = w - ctx
    if total < fresh:
        raise ValueError(f"need at least {fresh} frames of conditions, got {total}")

    d = pcfg.d
    rng = SeededRng(seed).spawn("generate")
    out = np.zeros((0, d))
    segments = -(-total // fresh)  # ceil
    for seg in range(segments):
        start = seg * fresh - ctx  # timeline position of the window's first frame
        window_cond = np.empty((w, cond.shape[1]))
        for i in range(w):
            p = start + i
            if p < 0:
                window_cond[i] = 0.0  # cold-start pre-roll
            elif p >= total:
                window_cond[i] = cond[-1]  # edge-replicated tail
            else:
                window_cond[i] = cond[p]
        prev = np.zeros((ctx, d))
        if ctx > 0 and seg > 0:
            tail = out[-ctx:]  # front-padded with zeros while output is short
            prev[ctx - tail.shape[0]:] = tail
        seg_rng = rng.spawn(f"segment-{seg}")
        if window_sampler is None:
            x0 = seg_rng.normal(size=(w, d))
            traj = euler_integrate(
                lambda x, c, t: predictor.field(x, c, t, prev if ctx > 0 else None),
                x0, window_cond, config.steps)
            window = traj.final
        else:
            window = np.asarray(
                window_sampler(window_cond, prev if ctx > 0 else None, seg_rng),
                dtype=np.float64)
            if window.shape != (w, d):
                raise ShapeError(
                    f"window sampler returned {window.shape}, expected {(w, d)}")
        out = np.concatenate([out, window[ctx:]], axis=0)
    return out[:total]


# -- solver-order diagnostics -----------------------------------------------------------


@dataclass(frozen=True)
class ProbeReport:
    """Endpoint error per step count, with the fitted convergence order."""

    ns: tuple
    errors: tuple
    order: float | None

    def ratios(self) -> list:
        """Error shrink factor between consecutive step counts."""
        return [self.errors[i] / self.errors[i + 1]
                for i in range(len(self.errors) - 1) if self.errors[i + 1] > 0]

    def rows(self) -> list:
        return list(zip(self.ns, self.errors))


def convergence_probe(field, x0: np.ndarray, exact_final: np.ndarray,
                      ns, c=None) -> ProbeReport:
    """Integrate with each step count and compare endpoints against the truth.

    The order is the negated slope of log error against log N; first-order
    stepping lands near 1.  Errors at the rounding floor carry no slope
    information and are excluded; fields solved exactly report order None.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    exact_final = np.asarray(exact_final, dtype=np.float64)
    errors = []
    for n in ns:
        final = euler_integrate(field, x0, c, int(n)).final
        errors.append(float(np.linalg.norm((final - exact_final).ravel())))
    errors = np.asarray(errors)
    floor = 1e-12 * max(1.0, float(np.linalg.norm(exact_final.ravel())))
    positive = errors > floor
    if positive.sum() >= 2:
        slope = np.polyfit(np.log(np.asarray(ns, dtype=float)[positive]),
                           np.log(errors[positive]), 1)[0]
        order = float(-slope)
    else:
        order = None
    return ProbeReport(ns=tuple(int(n) for n in ns),
                       errors=tuple(errors.tolist()), order=order)


def linear_field_probe(dim: int = 3, frames: int = 4, seed: int = 0,
                       ns=(8, 16, 32, 64, 128)) -> ProbeReport:
    """Canned probe on dx/dt = x A^T, whose endpoint x0 expm(A)^T is known."""
    from scipy.linalg import expm

    rng = SeededRng(seed).spawn("probe")
    a = rng.normal(0.0, 0.5 / np.sqrt(dim), size=(dim, dim))
    x0 = rng.normal(size=(frames, dim))
    exact = x0 @ expm(a).T
    return convergence_probe(lambda x, c, t: x @ a.T, x0, exact, ns)
