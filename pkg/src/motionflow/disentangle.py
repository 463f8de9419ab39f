"""Encoder stack and loss suite that recover the latent factor structure.

Five losses train jointly, all at weight 1.0: feature-space reconstruction,
an eye contrastive term driven by composited anchor frames, L1 pose
regression, and a bidirectional audio-visual InfoNCE pair. Similarities are
raw cosines inside exp; ``temperature`` rescales them and defaults to 1.0.

The stack also carries a decoder head back to the latent space. It exists
so the reconstruction loss has a generated latent to score, and so anything
modeled later in the motion-feature space can be read back out as latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .motionspace import MotionWorld, PoseParams, composite_anchor, pose_ground_truth
from .optim import Adam
from .params import MLP, ParamStore
from .rng import SeededRng
from .tensor import (
    ShapeError,
    Tensor,
    ZeroVectorError,
    backward,
    cosine_similarity,
    no_grad,
    softmax,
    stack as stack_tensors,
)

__all__ = [
    "DisentangleConfig",
    "EncoderStack",
    "DisentangleBatch",
    "TrainingDiverged",
    "motion_recon_loss",
    "eye_contrastive_loss",
    "eye_contrastive_batch",
    "pose_loss",
    "infonce",
    "infonce_batch",
    "make_batch_stream",
    "train_disentangler",
    "linear_probe_r2",
]

EYE_LOSS_LO = float(np.log1p(np.exp(-2.0)))
EYE_LOSS_HI = float(np.log1p(np.exp(2.0)))


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the step and last loss values."""

    def __init__(self, step: int, losses: dict):
        self.step = step
        self.losses = losses
        super().__init__(f"non-finite loss at step {step}: {losses}")


@dataclass(frozen=True)
class DisentangleConfig:
    m: int = 32          # unified motion feature width
    eye_dim: int = 8
    lip_dim: int = 8
    hidden: int = 64
    lr: float = 1e-3
    batch: int = 16
    steps: int = 2000
    temperature: float = 1.0
    seed: int = 0
    pool_sequences: int = 192
    pool_len: int = 8
    # "full" trains all heads; "recon" trains reconstruction only; "vae" trains a
    # standard variational autoencoder (reparameterized samples + unit-Gaussian KL)
    objective: str = "full"

    def __post_init__(self):
        if self.objective not in ("full", "recon", "vae"):
            raise ValueError(
                f"objective must be 'full', 'recon', or 'vae', got {self.objective!r}")


class EncoderStack:
    """E_mot plus its four heads and the latent decoder.

    Every head consumes the unified motion feature from ``E_mot`` except the
    audio head, which consumes condition frames directly.  When
    ``audio_channels`` is given, the audio head reads only that many leading
    condition channels (the audio group of a synthesized world) so the
    lip-sync alignment cannot latch onto pose or eye side channels; by
    default it reads the whole frame.
    """

    def __init__(self, latent_dim: int, cond_dim: int, config: DisentangleConfig,
                 audio_channels: int | None = None):
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.audio_channels = cond_dim if audio_channels is None else int(audio_channels)
        if not 0 < self.audio_channels <= cond_dim:
            raise ValueError(
                f"audio_channels must lie in [1, {cond_dim}], got {self.audio_channels}")
        self.config = config
        self.store = ParamStore()
        rng = SeededRng(config.seed).spawn("encoder-init")
        h, m = config.hidden, config.m
        self.e_mot = MLP(self.store, "e_mot", [latent_dim, h, h, m], rng, activation="tanh")
        self.e_eye = MLP(self.store, "e_eye", [m, h, h, config.eye_dim], rng, activation="tanh")
        self.e_pose = MLP(self.store, "e_pose", [m, h, h, 6], rng, activation="tanh")
        self.e_lip = MLP(self.store, "e_lip", [m, h, h, config.lip_dim], rng, activation="tanh")
        self.e_aud = MLP(self.store, "e_aud", [self.audio_channels, h, h, config.lip_dim],
                         rng, activation="tanh")
        self.decoder = MLP(self.store, "decoder", [m, h, h, latent_dim], rng, activation="tanh")
        # per-dim posterior log-variance, used only by the "vae" objective
        self.vae_logvar = self.store.add("vae_logvar", np.zeros(m))

    # forward paths; accept (B, d) Tensors
    def motion(self, x: Tensor) -> Tensor:
        return self.e_mot(x)

    def eye(self, x: Tensor) -> Tensor:
        return self.e_eye(self.motion(x))

    def pose(self, x: Tensor) -> Tensor:
        return self.e_pose(self.motion(x))

    def lip(self, x: Tensor) -> Tensor:
        return self.e_lip(self.motion(x))

    def audio(self, cond: Tensor) -> Tensor:
        if self.audio_channels != self.cond_dim:
            cond = cond[:, : self.audio_channels]
        return self.e_aud(cond)

    def reconstruct(self, x: Tensor) -> Tensor:
        return self.decoder(self.motion(x))

    def motion_array(self, x: np.ndarray) -> np.ndarray:
        """Frozen-weights feature pass for numpy pipelines."""
        with no_grad():
            return self.motion(Tensor(np.atleast_2d(x))).numpy()


# -- losses (single-sample forms) ---------------------------------------------------


def motion_recon_loss(i0, ig, extractors) -> Tensor:
    """Squared feature error under both surrogate maps, summed."""
    i0 = i0 if isinstance(i0, Tensor) else Tensor(i0)
    ig = ig if isinstance(ig, Tensor) else Tensor(ig)
    if i0.shape != ig.shape:
        raise ShapeError(f"latent shapes differ: {i0.shape} vs {ig.shape}")
    d_phi = extractors.extract(i0, "phi") - extractors.extract(ig, "phi")
    d_psi = extractors.extract(i0, "psi") - extractors.extract(ig, "psi")
    return (d_phi * d_phi).sum() + (d_psi * d_psi).sum()


def _check_eye_bounds(value: float, temperature: float) -> None:
    lo = float(np.log1p(np.exp(-2.0 / temperature)))
    hi = float(np.log1p(np.exp(2.0 / temperature)))
    if not (lo - 1e-9 <= value <= hi + 1e-9):
        raise AssertionError(f"contrastive loss {value} outside [{lo}, {hi}]")


def eye_contrastive_loss(f1: Tensor, f2: Tensor, fa: Tensor, temperature: float = 1.0) -> Tensor:
    """Two-way contrast: pull anchor toward f1's eye features, away from f2's.

    Equals -log[ e^{S(f1,fa)/t} / (e^{S(f1,fa)/t} + e^{S(f2,fa)/t}) ] with S
    the cosine similarity; always inside [log(1+e^{-2/t}), log(1+e^{2/t})],
    asserted on every call.
    """
    s1 = cosine_similarity(f1, fa)
    s2 = cosine_similarity(f2, fa)
    gap = (s2 - s1) * (1.0 / temperature)
    loss = (gap.exp() + 1.0).log()
    _check_eye_bounds(loss.item(), temperature)
    return loss


def pose_loss(p_pred, p_gt) -> Tensor:
    """Sum of absolute differences over all six pose parameters."""
    if isinstance(p_pred, PoseParams):
        p_pred = p_pred.as_vector()
    if isinstance(p_gt, PoseParams):
        p_gt = p_gt.as_vector()
    p_pred = p_pred if isinstance(p_pred, Tensor) else Tensor(p_pred)
    p_gt = p_gt if isinstance(p_gt, Tensor) else Tensor(p_gt)
    if p_pred.shape != (6,) or p_gt.shape != (6,):
        raise ShapeError(f"pose params must be 6-dim, got {p_pred.shape} and {p_gt.shape}")
    return (p_pred - p_gt).abs().sum()


def infonce(query: Tensor, positive: Tensor, negatives, temperature: float = 1.0) -> Tensor:
    """One-positive many-negative contrast over cosine similarities."""
    negatives = list(negatives)
    if not negatives:
        raise ValueError("infonce needs at least one negative")
    inv_t = 1.0 / temperature
    s_pos = cosine_similarity(query, positive) * inv_t
    sims = [s_pos] + [cosine_similarity(query, n) * inv_t for n in negatives]
    z = stack_tensors(sims)
    return z.exp().sum().log() - s_pos


# -- batched forms used in training ---------------------------------------------------


def _row_normalize(x: Tensor) -> Tensor:
    norms_sq = (x * x).sum(axis=-1, keepdims=True)
    if np.any(norms_sq.numpy() <= 0.0):
        raise ZeroVectorError("zero-norm feature row in contrastive batch")
    return x / norms_sq.sqrt()


def eye_contrastive_batch(f1: Tensor, f2: Tensor, fa: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean of eye_contrastive_loss over batch rows, computed in one graph."""
    n1, n2, na = _row_normalize(f1), _row_normalize(f2), _row_normalize(fa)
    s1 = (n1 * na).sum(axis=-1)
    s2 = (n2 * na).sum(axis=-1)
    gap = (s2 - s1) * (1.0 / temperature)
    losses = (gap.exp() + 1.0).log()
    for v in np.atleast_1d(losses.numpy()):
        _check_eye_bounds(float(v), temperature)
    return losses.mean()


def infonce_batch(queries: Tensor, keys: Tensor, temperature: float = 1.0) -> Tensor:
    """In-batch InfoNCE: row i's positive is key i, negatives are all other keys."""
    b = queries.shape[0]
    if b < 2:
        raise ValueError("in-batch infonce needs batch >= 2 for negatives")
    qn, kn = _row_normalize(queries), _row_normalize(keys)
    sims = (qn @ kn.T) * (1.0 / temperature)  # B x B cosine table
    log_probs = softmax(sims).log()
    diag = log_probs[np.arange(b), np.arange(b)]
    return -diag.mean()


# -- training ----------------------------------------------------------------------------


@dataclass
class DisentangleBatch:
    v1: np.ndarray        # B x d latents
    v2: np.ndarray        # B x d latents, eye-contrast partners
    anchor: np.ndarray    # B x d composited anchors
    cond: np.ndarray      # B x c condition frames aligned with v1
    pose_gt: np.ndarray   # B x 6 ground-truth pose params for v1


@dataclass
class FramePool:
    """Flattened pile of frames from many synthesized sequences."""

    latents: np.ndarray
    conds: np.ndarray
    pose_params: np.ndarray
    eye_coeffs: np.ndarray
    pose_coeffs: np.ndarray

    @property
    def size(self) -> int:
        return self.latents.shape[0]


def build_frame_pool(world: MotionWorld, n_sequences: int, seq_len: int, seed: int) -> FramePool:
    latents, conds, poses, eyes, pose_coeffs = [], [], [], [], []
    base = SeededRng(seed).spawn("pool")
    for i in range(n_sequences):
        seq, cond = world.synthesize(seq_len, seed=int(base.spawn(str(i)).integers(0, 2 ** 62)))
        latents.append(seq.latents)
        conds.append(cond.channels)
        poses.append(np.stack([
            pose_ground_truth(c).as_vector() for c in seq.factor_coeffs["pose"]
        ]))
        eyes.append(seq.factor_coeffs["eye"])
        pose_coeffs.append(seq.factor_coeffs["pose"])
    return FramePool(
        latents=np.concatenate(latents),
        conds=np.concatenate(conds),
        pose_params=np.concatenate(poses),
        eye_coeffs=np.concatenate(eyes),
        pose_coeffs=np.concatenate(pose_coeffs),
    )


def make_batch_stream(world: MotionWorld, config: DisentangleConfig, seed: int | None = None):
    """Endless stream of DisentangleBatch drawn from a fixed frame pool."""
    seed = config.seed if seed is None else seed
    pool = build_frame_pool(world, config.pool_sequences, config.pool_len, seed)
    rng = SeededRng(seed).spawn("batches")
    b = config.batch
    while True:
        i1 = rng.integers(0, pool.size, size=b)
        i2 = rng.integers(0, pool.size, size=b)
        v1 = pool.latents[i1]
        v2 = pool.latents[i2]
        anchor = composite_anchor(v1, v2, world.spaces)
        yield DisentangleBatch(
            v1=v1, v2=v2, anchor=anchor,
            cond=pool.conds[i1],
            pose_gt=pool.pose_params[i1],
        )


def train_disentangler(config: DisentangleConfig, batches, world: MotionWorld,
                       stack: EncoderStack | None = None):
    """Joint training of the encoder stack; returns (stack, loss curves).

    Stops after ``config.steps`` batches or when the stream ends. A
    non-finite total loss aborts immediately with the offending values.
    With ``config.objective == "recon"`` only the reconstruction term is
    optimized (the factor heads keep their initial weights) and the curves
    carry just ``recon`` and ``total``.  With ``"vae"`` the latent code is
    trained as a standard variational autoencoder instead: reconstruction
    through reparameterized samples plus a unit-Gaussian KL penalty, curves
    ``recon``/``kl``/``total``; the factor heads again stay at their
    initial weights.
    """
    if stack is None:
        stack = EncoderStack(world.d, world.cond_dim, config,
                             audio_channels=world.signal_spec.audio_dim)
    opt = Adam(stack.store, lr=config.lr)
    vae = config.objective == "vae"
    recon_only = config.objective == "recon"
    if vae:
        keys = ("recon", "kl", "total")
    elif recon_only:
        keys = ("recon", "total")
    else:
        keys = ("recon", "eye", "pose", "a2v", "v2a", "total")
    curves = {k: [] for k in keys}
    extractors = world.extractors
    tau = config.temperature
    noise = SeededRng(config.seed).spawn("vae-noise") if vae else None

    for step, batch in enumerate(batches):
        if step >= config.steps:
            break
        v1 = Tensor(batch.v1)
        scale = 1.0 / batch.v1.shape[0]

        if vae:
            mu = stack.motion(v1)
            sigma = (stack.vae_logvar * 0.5).exp()
            feat = mu + Tensor(noise.normal(size=mu.shape)) * sigma
            l_recon = motion_recon_loss(stack.decoder(feat), v1, extractors) * scale
            l_kl = ((mu * mu + sigma * sigma - stack.vae_logvar - 1.0)
                    .sum(axis=-1).mean() * 0.5)
            total = l_recon + l_kl
            values = {"recon": l_recon.item(), "kl": l_kl.item(),
                      "total": total.item()}
        elif recon_only:
            recon = stack.reconstruct(v1)
            l_recon = motion_recon_loss(recon, v1, extractors) * scale
            total = l_recon
            values = {"recon": l_recon.item(), "total": total.item()}
        else:
            recon = stack.reconstruct(v1)
            l_recon = motion_recon_loss(recon, v1, extractors) * scale
            # anchor keeps v1's eye factor, v2's everything else
            f1 = stack.eye(v1)
            f2 = stack.eye(Tensor(batch.v2))
            fa = stack.eye(Tensor(batch.anchor))
            l_eye = eye_contrastive_batch(f1, f2, fa, temperature=tau)

            p_pred = stack.pose(v1)
            l_pose = (p_pred - Tensor(batch.pose_gt)).abs().sum(axis=-1).mean()

            f_v = stack.lip(v1)
            f_a = stack.audio(Tensor(batch.cond))
            l_a2v = infonce_batch(f_a, f_v, temperature=tau)
            l_v2a = infonce_batch(f_v, f_a, temperature=tau)

            total = l_recon + l_eye + l_pose + l_a2v + l_v2a
            values = {
                "recon": l_recon.item(), "eye": l_eye.item(), "pose": l_pose.item(),
                "a2v": l_a2v.item(), "v2a": l_v2a.item(), "total": total.item(),
            }
        if not np.isfinite(values["total"]):
            raise TrainingDiverged(step, values)
        for k, v in values.items():
            curves[k].append(v)

        opt.zero_grad()
        backward(total)
        opt.step()

    return stack, curves


# -- linear probes --------------------------------------------------------------------


def linear_probe_r2(features: np.ndarray, targets: np.ndarray) -> float:
    """R-squared of the closed-form least-squares probe (with intercept)."""
    X = np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(X, targets, rcond=None)
    pred = X @ sol
    ss_res = float(((targets - pred) ** 2).sum())
    ss_tot = float(((targets - targets.mean(axis=0)) ** 2).sum())
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - ss_res / ss_tot
