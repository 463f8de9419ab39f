"""Optimal-transport conditional flow matching over motion-feature windows.

Training pairs standard-normal noise with data windows through a minibatch
optimal-transport coupling, regresses the field predictor onto the constant
path velocity with an L1 objective, and adds a temporal velocity-consistency
penalty.  A diffusion-style noise-prediction baseline reuses the same
predictor so the two generative recipes can be compared head to head.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .disentangle import TrainingDiverged
from .optim import Adam
from .rng import SeededRng
from .tensor import ShapeError, Tensor, backward, l1_loss

EXACT_COUPLING_LIMIT = 64  # O(n^3) assignment stays trivial below this
DIFFUSION_STEPS = 1000
BETA_MIN = 1e-4
BETA_MAX = 0.02


# -- domain types -----------------------------------------------------------------


@dataclass(frozen=True)
class FlowSample:
    """One stop along the straight noise-to-data path.

    With sigma_min = 0 the interpolant is x_t = (1-t) x0 + t x1 and the
    target velocity u = x1 - x0 is constant in t for a fixed pair.
    """

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray | float
    x_t: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class OTCoupling:
    """Batch assignment of noise rows to data rows.

    permutation[i] = j pairs noise sample i with data sample j; total_cost is
    the sum of squared Euclidean distances over the chosen pairs.
    """

    permutation: np.ndarray
    total_cost: float


@dataclass(frozen=True)
class TrainConfig:
    lambda_ot: float = 0.6
    lambda_vel: float = 1.0
    lr: float = 1e-4
    batch: int = 16
    steps: int = 1000
    seed: int = 0
    baseline: str = "flow"  # {"flow", "ddpm"}
    coupling: str = "exact"  # {"exact", "greedy"}
    sigma_min: float = 0.0

    def __post_init__(self):
        if self.lambda_ot < 0.0 or self.lambda_vel < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.batch < 1 or self.steps < 0:
            raise ValueError("batch must be >= 1 and steps >= 0")
        if self.baseline not in ("flow", "ddpm"):
            raise ValueError(f"baseline must be 'flow' or 'ddpm', got {self.baseline!r}")
        if self.coupling not in ("exact", "greedy"):
            raise ValueError(f"coupling must be 'exact' or 'greedy', got {self.coupling!r}")
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError("sigma_min must lie in [0, 1)")


@dataclass(frozen=True)
class FlowBatch:
    """One training minibatch of data windows.

    x1 holds the target latents (B, F, d); cond the per-frame conditions
    (B, F, c); prev the preceding-context latents (B, C, d) the window is
    conditioned on.  When x0 is provided the pairing is taken as given and
    no coupling is performed (used by analytically paired datasets).
    """

    x1: np.ndarray
    cond: np.ndarray
    prev: np.ndarray | None = None
    x0: np.ndarray | None = None


# -- minibatch optimal-transport coupling -------------------------------------------


def _pairwise_sq_costs(x0_batch: np.ndarray, x1_batch: np.ndarray) -> np.ndarray:
    a = x0_batch.reshape(x0_batch.shape[0], -1)
    b = x1_batch.reshape(x1_batch.shape[0], -1)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _lexmin_assignment(cost: np.ndarray) -> np.ndarray:
    """Optimal assignment, lexicographically smallest among cost ties.

    A plain solver returns an arbitrary optimum when several assignments
    share the minimal cost; rebuilding row by row and keeping the lowest
    column index whose completion stays optimal makes the result (and the
    identity outcome for self-coupling) deterministic.
    """
    n = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    perm = np.empty(n, dtype=np.int64)
    remaining = list(range(n))
    fixed = 0.0
    for i in range(n):
        chosen = -1
        for j in remaining:
            partial = fixed + cost[i, j]
            if partial - best > tol:  # costs are nonnegative: completion only adds
                continue
            rest = [c for c in remaining if c != j]
            if rest:
                sub = cost[np.ix_(range(i + 1, n), rest)]
                sr, sc = linear_sum_assignment(sub)
                partial += float(sub[sr, sc].sum())
            if partial - best <= tol:
                chosen = j
                break
        if chosen < 0:  # numerical corner: finish with an optimal completion
            sub = cost[np.ix_(range(i, n), remaining)]
            sr, sc = linear_sum_assignment(sub)
            for r, c in zip(sr, sc):
                perm[i + r] = remaining[c]
            return perm
        perm[i] = chosen
        fixed += cost[i, chosen]
        remaining.remove(chosen)
    return perm


def ot_couple(x0_batch: np.ndarray, x1_batch: np.ndarray,
              method: str = "exact") -> OTCoupling:
    """Pair noise rows with data rows by squared distance of flattened windows.

    The exact method returns the cost-minimising assignment (n <= 64, ties
    broken toward the identity by index order); the greedy method walks rows
    in order taking the nearest unused data row, falling back to the identity
    pairing whenever that walk ends up costlier.
    """
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    x1_batch = np.asarray(x1_batch, dtype=np.float64)
    if x0_batch.shape != x1_batch.shape:
        raise ShapeError(
            f"coupling needs equal batches, got {x0_batch.shape} vs {x1_batch.shape}")
    n = x0_batch.shape[0]
    cost = _pairwise_sq_costs(x0_batch, x1_batch)

    if method == "exact":
        if n > EXACT_COUPLING_LIMIT:
            raise ValueError(
                f"exact coupling supports at most {EXACT_COUPLING_LIMIT} samples, got {n}")
        perm = _lexmin_assignment(cost)
    elif method == "greedy":
        perm = np.empty(n, dtype=np.int64)
        used = np.zeros(n, dtype=bool)
        for i in range(n):
            masked = np.where(used, np.inf, cost[i])
            j = int(np.argmin(masked))  # first minimum -> lowest index on ties
            perm[i] = j
            used[j] = True
        identity_cost = float(np.trace(cost))
        if float(cost[np.arange(n), perm].sum()) > identity_cost:
            perm = np.arange(n, dtype=np.int64)
    else:
        raise ValueError(f"method must be 'exact' or 'greedy', got {method!r}")

    total = float(cost[np.arange(n), perm].sum())
    return OTCoupling(permutation=perm, total_cost=total)


# -- conditional path -----------------------------------------------------------------


def sample_path(x0: np.ndarray, x1: np.ndarray, t,
                sigma_min: float = 0.0) -> FlowSample:
    """Interpolant and target velocity at flow time t.

    x_t = (1 - (1 - sigma_min) t) x0 + t x1 and u = x1 - (1 - sigma_min) x0;
    at the default sigma_min = 0 this is the straight path with constant
    velocity x1 - x0.  t may be a scalar or one value per batch row.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"path endpoints differ in shape: {x0.shape} vs {x1.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError(f"flow time must lie in [0, 1], got {t_arr}")
    if t_arr.ndim == 1:
        if t_arr.shape[0] != x0.shape[0]:
            raise ShapeError(
                f"need one time per batch row: {t_arr.shape[0]} times, {x0.shape[0]} rows")
        t_b = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    elif t_arr.ndim == 0:
        t_b = t_arr
    else:
        raise ShapeError(f"t must be scalar or 1-D, got shape {t_arr.shape}")
    keep = 1.0 - sigma_min
    x_t = (1.0 - keep * t_b) * x0 + t_b * x1
    u = x1 - keep * x0
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, u=u)


# -- losses ---------------------------------------------------------------------------


def cfm_loss(pred_field: Tensor, u) -> Tensor:
    """Mean absolute error between the predicted field and the target velocity."""
    target = u if isinstance(u, Tensor) else Tensor(np.asarray(u, dtype=np.float64))
    return l1_loss(pred_field, target)


def velocity_consistency_loss(pred_field: Tensor, u) -> Tensor:
    """Mean absolute error between forward frame differences of field and target.

    Penalises frame-to-frame wobble the plain regression cannot see: any
    per-element offset that is constant across frames cancels out.  Below two
    frames there is no difference to take; the loss is 0 and a warning flags it.
    """
    if not isinstance(pred_field, Tensor):
        pred_field = Tensor(np.asarray(pred_field, dtype=np.float64))
    target = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    if pred_field.shape != target.shape:
        raise ShapeError(
            f"velocity consistency shape mismatch: {pred_field.shape} vs {target.shape}")
    if pred_field.ndim < 2:
        raise ShapeError("velocity consistency expects (..., frames, dims) input")
    frames = pred_field.shape[-2]
    if frames < 2:
        warnings.warn("velocity consistency needs at least 2 frames; returning 0",
                      RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    d_pred = pred_field[..., 1:, :] - pred_field[..., :-1, :]
    d_true = target[..., 1:, :] - target[..., :-1, :]
    return l1_loss(d_pred, Tensor(d_true))


# -- training -------------------------------------------------------------------------


def train_step(predictor, optimizer: Adam, batch: FlowBatch,
               config: TrainConfig, rng: SeededRng, step: int = 0) -> dict:
    """One coupled flow-matching update; returns the loss scalars.

    Noise is drawn fresh, OT-coupled to the data rows (conditions stay with
    their window), a random flow time is sampled per row, and one Adam step
    is taken on  lambda_ot * cfm + lambda_vel * velocity consistency.
    Pre-paired batches (batch.x0 set) skip the coupling and keep row order.
    """
    x1 = np.asarray(batch.x1, dtype=np.float64)
    n = x1.shape[0]
    if batch.x0 is not None:
        x0 = np.asarray(batch.x0, dtype=np.float64)
        if x0.shape != x1.shape:
            raise ShapeError(f"pre-paired noise shape {x0.shape} != data {x1.shape}")
        coupling_cost = float(((x0 - x1) ** 2).sum())
    else:
        x0 = rng.normal(size=x1.shape)
        coupling = ot_couple(x0, x1, method=config.coupling)
        x0 = x0[np.argsort(coupling.permutation)]  # align noise rows to data rows
        coupling_cost = coupling.total_cost

    t = rng.uniform(size=n)
    path = sample_path(x0, x1, t, sigma_min=config.sigma_min)
    prev = None if batch.prev is None else Tensor(np.asarray(batch.prev))
    pred = predictor(Tensor(path.x_t), Tensor(np.asarray(batch.cond)), t, prev)

    l_cfm = cfm_loss(pred, path.u)
    l_vel = velocity_consistency_loss(pred, path.u)
    total = l_cfm * config.lambda_ot + l_vel * config.lambda_vel

    scalars = {"l_cfm": float(l_cfm), "l_vel": float(l_vel),
               "total": float(total), "coupling_cost": coupling_cost}
    if not np.isfinite(scalars["total"]):
        raise TrainingDiverged(step, scalars)
    predictor.store.zero_grad()
    backward(total)
    optimizer.step()
    return scalars


# -- diffusion baseline ---------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """Fixed-variance forward process over K discrete noise levels."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def build(cls, steps: int = DIFFUSION_STEPS,
              beta_min: float = BETA_MIN, beta_max: float = BETA_MAX) -> "DiffusionSchedule":
        betas = np.linspace(beta_min, beta_max, steps)
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))

    @property
    def steps(self) -> int:
        return self.betas.shape[0]

    def time_slot(self, k) -> np.ndarray:
        """Map a noise-level index into the [0, 1] flow-time embedding slot."""
        return np.asarray(k, dtype=np.float64) / (self.steps - 1)


def noise_prediction_loss(pred: Tensor, eps) -> Tensor:
    """Mean squared error between predicted and injected noise."""
    target = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=np.float64))
    if pred.shape != target.shape:
        raise ShapeError(f"noise prediction shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def ddpm_baseline_step(predictor, optimizer: Adam, batch: FlowBatch,
                       config: TrainConfig, rng: SeededRng, step: int = 0,
                       schedule: DiffusionSchedule | None = None) -> dict:
    """One noise-prediction update reusing the field predictor as denoiser.

    A noise level k is drawn per row, x1 is diffused to x_k, and the
    predictor (fed k mapped into the flow-time slot) regresses the injected
    noise under squared error.
    """
    if config.baseline != "ddpm":
        raise ValueError("ddpm_baseline_step requires baseline='ddpm'")
    if schedule is None:
        schedule = DiffusionSchedule.build()
    x1 = np.asarray(batch.x1, dtype=np.float64)
    n = x1.shape[0]
    k = rng.integers(0, schedule.steps, size=n)
    eps = rng.normal(size=x1.shape)
    bar = schedule.alpha_bars[k].reshape(-1, 1, 1)
    x_k = np.sqrt(bar) * x1 + np.sqrt(1.0 - bar) * eps

    prev = None if batch.prev is None else Tensor(np.asarray(batch.prev))
    pred = predictor(Tensor(x_k), Tensor(np.asarray(batch.cond)),
                     schedule.time_slot(k), prev)
    loss = noise_prediction_loss(pred, eps)

    scalars = {"loss": float(loss)}
    if not np.isfinite(scalars["loss"]):
        raise TrainingDiverged(step, scalars)
    predictor.store.zero_grad()
    backward(loss)
    optimizer.step()
    return scalars


def ddpm_sample(predictor, cond: np.ndarray, prev: np.ndarray | None,
                rng: SeededRng, schedule: DiffusionSchedule | None = None) -> np.ndarray:
    """Fixed-variance ancestral sampling from the trained denoiser.

    Walks the schedule backwards from pure noise; each step removes the
    predicted noise and re-injects variance beta_k (none at the final step).
    """
    if schedule is None:
        schedule = DiffusionSchedule.build()
    cond = np.asarray(cond, dtype=np.float64)
    frames = cond.shape[0]
    d = predictor.config.d
    x = rng.normal(size=(frames, d))
    for k in range(schedule.steps - 1, -1, -1):
        eps_hat = predictor.field(x, cond, float(schedule.time_slot(k)), prev)
        beta = schedule.betas[k]
        bar = schedule.alpha_bars[k]
        mean = (x - beta / np.sqrt(1.0 - bar) * eps_hat) / np.sqrt(schedule.alphas[k])
        if k > 0:
            x = mean + np.sqrt(beta) * rng.normal(size=x.shape)
        else:
            x = mean
    return x


# -- feature standardisation ----------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpace:
    """Per-feature affine map between raw motion features and flow space.

    The flow model trains on standardised features; decode undoes the
    standardisation before features are mapped back to latents.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, floor: float = 1e-6) -> "FeatureSpace":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ShapeError(f"fit expects (samples, features), got {features.shape}")
        mean = features.mean(axis=0)
        std = np.maximum(features.std(axis=0), floor)
        return cls(mean=mean, std=std)

    def encode(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.mean) / self.std

    def decode(self, standardized: np.ndarray) -> np.ndarray:
        return np.asarray(standardized, dtype=np.float64) * self.std + self.mean


# -- batch assembly -------------------------------------------------------------------


def window_batches(feature_seqs, cond_seqs, window: int, context: int,
                   batch: int, rng: SeededRng):
    """Endless stream of FlowBatch windows cut from full sequences.

    Each draw picks a sequence and an offset; the window's own first
    `context` frames double as the preceding-context conditioning, matching
    how generation re-creates the context frames of every segment.
    """
    if len(feature_seqs) != len(cond_seqs) or not feature_seqs:
        raise ValueError("need matching, non-empty feature and condition sequences")
    for z, c in zip(feature_seqs, cond_seqs):
        if z.shape[0] != c.shape[0]:
            raise ShapeError(f"sequence lengths differ: {z.shape[0]} vs {c.shape[0]}")
        if z.shape[0] < window:
            raise ValueError(f"sequence of {z.shape[0]} frames is shorter than "
                             f"the {window}-frame window")
    n_seq = len(feature_seqs)
    while True:
        xs, cs, ps = [], [], []
        for _ in range(batch):
            s = int(rng.integers(0, n_seq))
            start = int(rng.integers(0, feature_seqs[s].shape[0] - window + 1))
            z = feature_seqs[s][start:start + window]
            xs.append(z)
            cs.append(cond_seqs[s][start:start + window])
            ps.append(z[:context] if context > 0 else np.zeros((0, z.shape[1])))
        prev = np.stack(ps) if context > 0 else None
        yield FlowBatch(x1=np.stack(xs), cond=np.stack(cs), prev=prev)


def constant_shift_batches(shift: np.ndarray, batch: int, frames: int,
                           cond_dim: int, context: int, rng: SeededRng):
    """Endless stream of analytically paired batches with x1 = x0 + shift.

    The optimal field for this dataset is the constant `shift`; conditions
    and context are zeros so the predictor must express it through the
    field itself.
    """
    shift = np.asarray(shift, dtype=np.float64)
    d = shift.shape[-1]
    cond = np.zeros((batch, frames, cond_dim))
    prev = np.zeros((batch, context, d)) if context > 0 else None
    while True:
        x0 = rng.normal(size=(batch, frames, d))
        yield FlowBatch(x1=x0 + shift, cond=cond, prev=prev, x0=x0)


# -- training loop --------------------------------------------------------------------


def train_flow(predictor, batches, config: TrainConfig,
               csv_path=None, optimizer: Adam | None = None) -> dict:
    """Drive train_step (or the diffusion baseline) for config.steps updates.

    Loss scalars stream to CSV as (step, l_cfm, l_vel, total, coupling_cost);
    baseline rows carry the noise-prediction loss in l_cfm and total with
    zeros elsewhere.  Returns the in-memory loss curves.
    """
    opt = optimizer if optimizer is not None else Adam(predictor.store, lr=config.lr)
    base = SeededRng(config.seed).spawn("flow-train")
    schedule = DiffusionSchedule.build() if config.baseline == "ddpm" else None
    curves = {"step": [], "l_cfm": [], "l_vel": [], "total": [], "coupling_cost": []}

    writer = None
    handle = None
    if csv_path is not None:
        handle = open(csv_path, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(["step", "l_cfm", "l_vel", "total", "coupling_cost"])
    try:
        for step, batch in zip(range(config.steps), batches):
            step_rng = base.spawn(f"step-{step}")
            if config.baseline == "ddpm":
                out = ddpm_baseline_step(predictor, opt, batch, config, step_rng,
                                         step=step, schedule=schedule)
                row = {"l_cfm": out["loss"], "l_vel": 0.0,
                       "total": out["loss"], "coupling_cost": 0.0}
            else:
                row = train_step(predictor, opt, batch, config, step_rng, step=step)
            curves["step"].append(step)
            for key in ("l_cfm", "l_vel", "total", "coupling_cost"):
                curves[key].append(row[key])
            if writer is not None:
                writer.writerow([step, f"{row['l_cfm']:.10g}", f"{row['l_vel']:.10g}",
                                 f"{row['total']:.10g}", f"{row['coupling_cost']:.10g}"])
                handle.flush()
    finally:
        if handle is not None:
            handle.close()
    return curves
