"""Synthetic motion latent world with known, orthogonal factor structure.

Frame latents live in R^d and decompose exactly over four mutually
orthogonal subspaces: lip (driven deterministically by the condition's
audio channels), pose (a smoothed AR(1) walk), eye (piecewise constant
with random jump times, saccade-like), and residual (small white noise).
Because the generating coefficients are kept alongside every sequence,
claims about disentanglement, editing locality, and audio sync are all
checkable against ground truth instead of against perception.

Condition frames carry the raw audio channels plus mixed (not raw) eye and
pose side channels, so conditional models must learn the fixed mixing maps
rather than copy coefficients through.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .rng import SeededRng
from .tensor import Tensor

__all__ = [
    "FACTORS",
    "FactorSubspace",
    "MotionLatentSequence",
    "ConditionSequence",
    "PoseParams",
    "SignalSpec",
    "SurrogateExtractors",
    "CapacityError",
    "build_factor_spaces",
    "get_space",
    "synthesize_sequence",
    "composite_anchor",
    "pose_ground_truth",
    "pose_coeffs_from_params",
    "sequence_to_csv",
    "sequence_from_csv",
    "MotionWorld",
]

FACTORS = ("lip", "pose", "eye", "residual")
FRAME_RATE = 25


class CapacityError(ValueError):
    """Requested factor dimensions exceed the latent dimension."""


@dataclass(frozen=True)
class FactorSubspace:
    """One named orthonormal block of the latent space."""

    name: str
    basis: np.ndarray  # d x k, orthonormal columns

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[0]

    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def project(self, x: np.ndarray) -> np.ndarray:
        """Component of x (last axis = latent) inside this subspace."""
        return (x @ self.basis) @ self.basis.T

    def coords(self, x: np.ndarray) -> np.ndarray:
        """Coefficients of x in this subspace's basis."""
        return x @ self.basis


def build_factor_spaces(d: int, dims: dict, seed: int) -> list[FactorSubspace]:
    """Mutually orthogonal orthonormal bases, one per factor, via seeded QR."""
    unknown = set(dims) - set(FACTORS)
    if unknown:
        raise ValueError(f"unknown factor names: {sorted(unknown)}")
    total = sum(dims.values())
    if total > d:
        raise CapacityError(f"factor dims sum to {total} but latent dim is {d}")
    raw = SeededRng(seed).spawn("factor-basis").normal(size=(d, d))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # fix column signs for stable determinism
    spaces = []
    start = 0
    for name in FACTORS:
        if name not in dims:
            continue
        k = dims[name]
        basis = q[:, start:start + k].copy()
        basis.flags.writeable = False
        spaces.append(FactorSubspace(name, basis))
        start += k
    return spaces


def get_space(spaces, name: str) -> FactorSubspace:
    for s in spaces:
        if s.name == name:
            return s
    raise KeyError(f"no factor named {name!r}")


@dataclass(frozen=True)
class MotionLatentSequence:
    """F frames of latents plus the ground-truth coefficients that built them."""

    latents: np.ndarray  # F x d
    factor_coeffs: dict  # factor name -> F x k
    frame_rate_tag: int = FRAME_RATE

    @property
    def frames(self) -> int:
        return self.latents.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]


@dataclass(frozen=True)
class ConditionSequence:
    """Per-frame conditioning: raw audio plus mixed factor side channels."""

    channels: np.ndarray  # F x c
    layout: dict  # channel-group name -> slice into the channel axis

    @property
    def frames(self) -> int:
        return self.channels.shape[0]

    @property
    def dim(self) -> int:
        return self.channels.shape[1]

    def group(self, name: str) -> np.ndarray:
        return self.channels[:, self.layout[name]]


@dataclass(frozen=True)
class PoseParams:
    """Head pose: three Euler angles (radians) and three translations."""

    euler: np.ndarray
    translation: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.euler, self.translation])


@dataclass(frozen=True)
class SignalSpec:
    """Knobs for the generating process, plus the seed of its fixed maps.

    ``map_seed`` pins the audio-to-lip map and the condition mixing maps, so
    sequences drawn with different per-sequence seeds stay mutually
    consistent. ``lip_mode`` 'linear' makes lip coefficients an exact linear
    image of the audio; 'tanh' bends the map while staying near-linear.
    """

    audio_dim: int = 4
    audio_harmonics: int = 3
    lip_mode: str = "linear"
    lip_gain: float = 0.8
    pose_rho: float = 0.9
    pose_scale: float = 1.0
    eye_jump_rate: float = 0.12
    eye_scale: float = 1.0
    residual_scale: float = 0.1
    map_seed: int = 0
    include_eye_channels: bool = True
    include_pose_channels: bool = True


def _fixed_maps(spec: SignalSpec, lip_dim: int, pose_dim: int, eye_dim: int):
    rng = SeededRng(spec.map_seed).spawn("signal-maps")
    lip_map = rng.spawn("lip").normal(0.0, spec.lip_gain / np.sqrt(spec.audio_dim),
                                      size=(lip_dim, spec.audio_dim))
    mix_eye = rng.spawn("mix-eye").normal(0.0, 1.0 / np.sqrt(eye_dim), size=(eye_dim, eye_dim))
    mix_eye += np.eye(eye_dim)  # keep the mixing well conditioned
    mix_pose = rng.spawn("mix-pose").normal(0.0, 1.0 / np.sqrt(pose_dim), size=(pose_dim, pose_dim))
    mix_pose += np.eye(pose_dim)
    return lip_map, mix_eye, mix_pose


def synthesize_sequence(F: int, spaces, signal_spec: SignalSpec, seed: int):
    """Draw one (MotionLatentSequence, ConditionSequence) pair.

    The per-sequence randomness comes from ``seed``; the audio-to-lip and
    condition mixing maps come from ``signal_spec.map_seed`` and are shared
    by every sequence drawn against the same signal spec.
    """
    if F < 1:
        raise ValueError(f"F must be >= 1, got {F}")
    spec = signal_spec
    lip = get_space(spaces, "lip")
    pose = get_space(spaces, "pose")
    eye = get_space(spaces, "eye")
    residual = get_space(spaces, "residual")
    lip_map, mix_eye, mix_pose = _fixed_maps(spec, lip.dim, pose.dim, eye.dim)

    rng = SeededRng(seed).spawn("sequence")

    # audio: per-channel sums of sinusoids, smooth in the frame index
    arng = rng.spawn("audio")
    t = np.arange(F) / FRAME_RATE
    freqs = arng.uniform(0.5, 4.0, size=(spec.audio_dim, spec.audio_harmonics))
    phases = arng.uniform(0.0, 2 * np.pi, size=(spec.audio_dim, spec.audio_harmonics))
    amps = arng.normal(0.0, 1.0, size=(spec.audio_dim, spec.audio_harmonics))
    amps = amps / np.sqrt(spec.audio_harmonics)
    audio = np.einsum("ch,chf->fc", amps, np.sin(2 * np.pi * freqs[:, :, None] * t + phases[:, :, None]))

    # lip: deterministic function of the audio frame
    lin = audio @ lip_map.T
    c_lip = lin if spec.lip_mode == "linear" else np.tanh(lin)

    # pose: stationary AR(1) walk, smooth by construction
    prng = rng.spawn("pose")
    c_pose = np.empty((F, pose.dim))
    c_pose[0] = prng.normal(0.0, spec.pose_scale, size=pose.dim)
    sigma_w = spec.pose_scale * np.sqrt(1.0 - spec.pose_rho ** 2)
    innovations = prng.normal(0.0, sigma_w, size=(F, pose.dim))
    for f in range(1, F):
        c_pose[f] = spec.pose_rho * c_pose[f - 1] + innovations[f]

    # eye: piecewise constant, jump times Bernoulli per frame
    erng = rng.spawn("eye")
    jumps = erng.bernoulli(spec.eye_jump_rate, size=F).astype(bool)
    jumps[0] = True
    values = erng.normal(0.0, spec.eye_scale, size=(F, eye.dim))
    c_eye = np.empty((F, eye.dim))
    current = values[0]
    for f in range(F):
        if jumps[f]:
            current = values[f]
        c_eye[f] = current

    # residual: small white noise
    c_res = rng.spawn("residual").normal(0.0, spec.residual_scale, size=(F, residual.dim))

    coeffs = {"lip": c_lip, "pose": c_pose, "eye": c_eye, "residual": c_res}
    latents = sum(coeffs[s.name] @ s.basis.T for s in spaces)

    groups = [("audio", audio)]
    if spec.include_eye_channels:
        groups.append(("eye", c_eye @ mix_eye.T))
    if spec.include_pose_channels:
        groups.append(("pose", c_pose @ mix_pose.T))
    layout = {}
    start = 0
    for name, block in groups:
        layout[name] = slice(start, start + block.shape[1])
        start += block.shape[1]
    channels = np.concatenate([block for _, block in groups], axis=1)

    seq = MotionLatentSequence(latents=latents, factor_coeffs=coeffs)
    cond = ConditionSequence(channels=channels, layout=layout)
    return seq, cond


def composite_anchor(v1: np.ndarray, v2: np.ndarray, spaces) -> np.ndarray:
    """Eye component of v1 plus everything-but-eye of v2 (an anchor frame)."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape:
        raise ValueError(f"frame shapes differ: {v1.shape} vs {v2.shape}")
    eye = get_space(spaces, "eye")
    if v1.shape[-1] != eye.latent_dim:
        raise ValueError(f"frame dim {v1.shape[-1]} does not match latent dim {eye.latent_dim}")
    p_eye = eye.projector()
    return v1 @ p_eye.T + v2 @ (np.eye(eye.latent_dim) - p_eye).T


# -- pose parameterization -------------------------------------------------------


def pose_ground_truth(coeffs: np.ndarray) -> PoseParams:
    """Map 6 pose coefficients to bounded Euler angles and raw translations.

    Angles squash through pi * tanh(c / pi): strictly monotone, identity to
    first order at 0, range (-pi, pi).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (6,):
        raise ValueError(f"pose coefficients must have shape (6,), got {coeffs.shape}")
    euler = np.pi * np.tanh(coeffs[:3] / np.pi)
    return PoseParams(euler=euler, translation=coeffs[3:].copy())


def pose_coeffs_from_params(params: PoseParams) -> np.ndarray:
    """Inverse of pose_ground_truth on its range."""
    return np.concatenate([np.pi * np.arctanh(params.euler / np.pi), params.translation])


# -- surrogate feature extractors ---------------------------------------------------


class SurrogateExtractors:
    """Two frozen random linear feature maps standing in for pretrained networks."""

    def __init__(self, d: int, p: int, q: int, seed: int):
        rng = SeededRng(seed).spawn("extractors")
        phi = rng.spawn("phi").normal(0.0, 1.0 / np.sqrt(d), size=(p, d))
        psi = rng.spawn("psi").normal(0.0, 1.0 / np.sqrt(d), size=(q, d))
        phi.flags.writeable = False
        psi.flags.writeable = False
        self.phi_map = phi
        self.psi_map = psi
        self.d, self.p, self.q, self.seed = d, p, q, seed
        self._phi_t = Tensor(phi)
        self._psi_t = Tensor(psi)

    def extract(self, x, which: str):
        """Apply the named map; differentiable when x is a Tensor."""
        if which == "phi":
            m, mt = self.phi_map, self._phi_t
        elif which == "psi":
            m, mt = self.psi_map, self._psi_t
        else:
            raise ValueError(f"which must be 'phi' or 'psi', got {which!r}")
        if isinstance(x, Tensor):
            if x.ndim == 1:
                return (x.reshape(1, -1) @ mt.T).reshape(m.shape[0])
            return x @ mt.T
        return np.asarray(x) @ m.T


def extract_features(extractors: SurrogateExtractors, x, which: str):
    return extractors.extract(x, which)


# -- sequence files -------------------------------------------------------------------


def sequence_to_csv(seq: MotionLatentSequence, cond: ConditionSequence, seed: int) -> str:
    """Serialize one (sequence, condition) pair.

    Line 1 is the header: ``# motionseq v1 d=.. F=.. lip=.. pose=.. eye=..
    residual=.. cond=.. seed=..``. Line 2 names the columns: frame index,
    latent channels, per-factor coefficient channels, condition channels.
    Floats print at 17 significant digits so the round trip is exact.
    """
    F, d = seq.latents.shape
    dims = {name: seq.factor_coeffs[name].shape[1] for name in FACTORS if name in seq.factor_coeffs}
    head = f"# motionseq v1 d={d} F={F} " + " ".join(f"{k}={v}" for k, v in dims.items())
    layout_desc = ";".join(f"{name}:{sl.start}:{sl.stop}" for name, sl in cond.layout.items())
    head += f" cond={cond.dim} layout={layout_desc} seed={seed}"
    cols = ["frame"]
    cols += [f"x{i}" for i in range(d)]
    for name, k in dims.items():
        cols += [f"{name}{i}" for i in range(k)]
    cols += [f"c{i}" for i in range(cond.dim)]
    out = io.StringIO()
    out.write(head + "\n")
    out.write(",".join(cols) + "\n")
    for f in range(F):
        row = [str(f)]
        row += [f"{v:.17g}" for v in seq.latents[f]]
        for name in dims:
            row += [f"{v:.17g}" for v in seq.factor_coeffs[name][f]]
        row += [f"{v:.17g}" for v in cond.channels[f]]
        out.write(",".join(row) + "\n")
    return out.getvalue()


def sequence_from_csv(text: str):
    """Parse ``sequence_to_csv`` output; returns (sequence, condition, seed)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0]
    if not head.startswith("# motionseq v1 "):
        raise ValueError(f"unrecognized sequence header: {head!r}")
    fields = dict(part.split("=") for part in head[2:].split()[2:])
    d, F, c = int(fields["d"]), int(fields["F"]), int(fields["cond"])
    seed = int(fields["seed"])
    dims = {name: int(fields[name]) for name in FACTORS if name in fields}

    body = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    if body.shape[0] != F:
        raise ValueError(f"header says F={F} but body has {body.shape[0]} rows")
    expected_cols = 1 + d + sum(dims.values()) + c
    if body.shape[1] != expected_cols:
        raise ValueError(f"expected {expected_cols} columns, got {body.shape[1]}")

    pos = 1
    latents = body[:, pos:pos + d]
    pos += d
    coeffs = {}
    for name, k in dims.items():
        coeffs[name] = body[:, pos:pos + k]
        pos += k
    channels = body[:, pos:pos + c]
    layout = {}
    for part in fields["layout"].split(";"):
        name, start, stop = part.split(":")
        layout[name] = slice(int(start), int(stop))
    seq = MotionLatentSequence(latents=latents, factor_coeffs=coeffs)
    cond = ConditionSequence(channels=channels, layout=layout)
    return seq, cond, seed


# -- world bundle -----------------------------------------------------------------------


@dataclass(frozen=True)
class MotionWorld:
    """Everything fixed about one experiment's data distribution."""

    d: int
    dims: dict
    spaces: list
    extractors: SurrogateExtractors
    signal_spec: SignalSpec
    seed: int

    @staticmethod
    def build(d: int = 32, dims: dict | None = None, seed: int = 0,
              feature_dim: int | None = None,
              signal_spec: SignalSpec | None = None) -> "MotionWorld":
        dims = dict(dims) if dims else {"lip": 6, "pose": 6, "eye": 4, "residual": 16}
        spec = signal_spec if signal_spec is not None else SignalSpec(map_seed=seed)
        p = q = feature_dim if feature_dim is not None else d
        return MotionWorld(
            d=d,
            dims=dims,
            spaces=build_factor_spaces(d, dims, seed),
            extractors=SurrogateExtractors(d, p, q, seed),
            signal_spec=spec,
            seed=seed,
        )

    @property
    def cond_dim(self) -> int:
        c = self.signal_spec.audio_dim
        if self.signal_spec.include_eye_channels:
            c += self.dims["eye"]
        if self.signal_spec.include_pose_channels:
            c += self.dims["pose"]
        return c

    def space(self, name: str) -> FactorSubspace:
        return get_space(self.spaces, name)

    def synthesize(self, F: int, seed: int):
        return synthesize_sequence(F, self.spaces, self.signal_spec, seed)
