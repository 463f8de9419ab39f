"""Population and sequence metrics for generated motion latents.

Realism is scored by the closed-form Fréchet distance between Gaussian
summaries of latent populations (computed on raw latents, and on pose
coefficients for a pose-specific view).  Conditioning fidelity is scored by
a least-squares audio-to-lip probe, controllability by per-factor leakage of
single-factor edits, and temporal coherence by second-difference smoothness.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

SYMMETRY_TOL = 1e-10
EIGENVALUE_TOL = 1e-10


# -- gaussian summaries and Fréchet distance -----------------------------------------


@dataclass(frozen=True)
class GaussianSummary:
    """First two moments of a latent population."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ShapeError(
                f"need mean (d,) and covariance (d, d), got {mean.shape} and {cov.shape}")
        if np.abs(cov - cov.T).max() > SYMMETRY_TOL:
            raise ValueError("covariance is not symmetric within 1e-10")
        cov = (cov + cov.T) / 2.0
        eigs = np.linalg.eigvalsh(cov)
        if eigs.min() < -EIGENVALUE_TOL:
            raise ValueError(
                f"covariance has eigenvalue {eigs.min():g} below -1e-10")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def fit(cls, samples: np.ndarray) -> "GaussianSummary":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 2:
            raise ShapeError(
                f"fit expects at least two (samples, d) rows, got {samples.shape}")
        return cls(mean=samples.mean(axis=0),
                   covariance=np.cov(samples, rowvar=False).reshape(
                       samples.shape[1], samples.shape[1]))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to zero."""
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """Squared 2-Wasserstein distance between two Gaussian summaries.

    ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), with matrix
    roots taken by symmetric eigendecomposition.  Rounding can push the
    exact-zero case a hair negative; the result is clamped at zero.
    """
    if a.dim != b.dim:
        raise ShapeError(f"summary dims differ: {a.dim} vs {b.dim}")
    delta = a.mean - b.mean
    root_a = _psd_sqrt(a.covariance)
    cross = _psd_sqrt(root_a @ b.covariance @ root_a)
    value = float(delta @ delta
                  + np.trace(a.covariance) + np.trace(b.covariance)
                  - 2.0 * np.trace(cross))
    return max(0.0, value)


# -- condition-sync probe --------------------------------------------------------------


@dataclass(frozen=True)
class SyncProbe:
    """Frozen least-squares map from audio channels to lip coefficients."""

    weights: np.ndarray | None = None  # (audio_dim + 1, lip_dim), last row intercept

    @classmethod
    def fit(cls, audio: np.ndarray, lip_coeffs: np.ndarray) -> "SyncProbe":
        audio = np.asarray(audio, dtype=np.float64)
        lip_coeffs = np.asarray(lip_coeffs, dtype=np.float64)
        if audio.ndim != 2 or lip_coeffs.ndim != 2 or audio.shape[0] != lip_coeffs.shape[0]:
            raise ShapeError(
                f"fit expects matching (frames, ...) arrays, got {audio.shape} "
                f"and {lip_coeffs.shape}")
        design = np.concatenate([audio, np.ones((audio.shape[0], 1))], axis=1)
        weights, *_ = np.linalg.lstsq(design, lip_coeffs, rcond=None)
        return cls(weights=weights)

    @property
    def audio_dim(self) -> int:
        self._require_fitted()
        return self.weights.shape[0] - 1

    def predict(self, audio: np.ndarray) -> np.ndarray:
        self._require_fitted()
        audio = np.asarray(audio, dtype=np.float64)
        if audio.ndim != 2 or audio.shape[1] != self.audio_dim:
            raise ShapeError(
                f"predict expects (frames, {self.audio_dim}), got {audio.shape}")
        return audio @ self.weights[:-1] + self.weights[-1]

    def _require_fitted(self):
        if self.weights is None:
            raise RuntimeError("sync probe is not fitted; call SyncProbe.fit first")


def sync_distance(generated: np.ndarray, conditions, lip_space,
                  probe: SyncProbe) -> float:
    """Mean distance between generated lip coefficients and probe predictions.

    Conditions may be a ConditionSequence (its audio group is used) or a raw
    (frames, channels) array whose leading probe.audio_dim columns are audio.
    Lower is better; matched ground truth sits at the probe's residual floor.
    """
    generated = np.asarray(generated, dtype=np.float64)
    if hasattr(conditions, "group"):
        audio = conditions.group("audio")
    else:
        audio = np.asarray(conditions, dtype=np.float64)[:, :probe.audio_dim]
    if generated.shape[0] != audio.shape[0]:
        raise ShapeError(
            f"got {generated.shape[0]} generated frames for {audio.shape[0]} "
            "condition frames")
    coeffs = lip_space.coords(generated)
    predicted = probe.predict(audio)
    return float(np.linalg.norm(coeffs - predicted, axis=1).mean())


# -- factor leakage ---------------------------------------------------------------------


def factor_leakage(pairs: dict, spaces) -> dict:
    """Where single-factor edits land: L[f][g] = mean ||P_g delta|| / ||delta||.

    `pairs` maps an edited factor name to (base, edited) latent-sequence
    pairs; every pair's difference is projected onto each factor subspace in
    `spaces`.  A perfectly targeted edit gives 1 for its own factor and 0
    elsewhere.
    """
    spaces = list(spaces)
    if not pairs or all(len(v) == 0 for v in pairs.values()):
        raise ValueError("factor_leakage needs at least one edited pair")
    matrix: dict = {}
    for edited, pair_list in pairs.items():
        if not pair_list:
            raise ValueError(f"no pairs supplied for edited factor {edited!r}")
        ratios = {space.name: [] for space in spaces}
        for base, changed in pair_list:
            delta = np.asarray(changed, dtype=np.float64) - np.asarray(base, dtype=np.float64)
            norm = np.linalg.norm(delta.ravel())
            if norm == 0.0:
                raise ValueError(
                    f"an edit targeting {edited!r} produced identical sequences")
            for space in spaces:
                part = space.project(delta)
                ratios[space.name].append(np.linalg.norm(part.ravel()) / norm)
        matrix[edited] = {name: float(np.mean(vals)) for name, vals in ratios.items()}
    return matrix


def leakage_summary(matrix: dict) -> tuple[float, float]:
    """(diagonal mean, off-diagonal mean) of a leakage matrix."""
    diag, off = [], []
    for edited, row in matrix.items():
        for measured, value in row.items():
            (diag if measured == edited else off).append(value)
    return float(np.mean(diag)), float(np.mean(off)) if off else 0.0


# -- smoothness ---------------------------------------------------------------------------


def smoothness(sequence: np.ndarray) -> float:
    """Mean norm of per-frame second differences; 0 for affine-in-time motion."""
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.ndim != 2 or sequence.shape[0] < 3:
        raise ShapeError(
            f"smoothness needs at least 3 (frames, d) rows, got {sequence.shape}")
    second = sequence[2:] - 2.0 * sequence[1:-1] + sequence[:-2]
    return float(np.linalg.norm(second, axis=1).mean())


# -- report ---------------------------------------------------------------------------------


REQUIRED_PROVENANCE = ("config_hash", "seed", "samples")


@dataclass(frozen=True)
class MetricsReport:
    """Named scalar metrics plus the provenance needed to reproduce them.

    Serialized columns are the provenance keys in declaration order followed
    by metric names sorted alphabetically.
    """

    metrics: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in REQUIRED_PROVENANCE:
            if key not in self.provenance:
                raise ValueError(f"provenance is missing {key!r}")
        for name, value in self.metrics.items():
            if not math.isfinite(float(value)):
                raise ValueError(f"metric {name!r} is not finite: {value}")

    def columns(self) -> list:
        return list(self.provenance) + sorted(self.metrics)

    def row(self) -> list:
        return ([self.provenance[k] for k in self.provenance]
                + [float(self.metrics[k]) for k in sorted(self.metrics)])

    def to_json(self) -> str:
        return json.dumps({"provenance": self.provenance,
                           "metrics": {k: float(self.metrics[k])
                                       for k in sorted(self.metrics)}},
                          indent=2, sort_keys=False)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(self.columns())
            writer.writerow(self.row())

    def write_json(self, path) -> None:
        with open(path, "w") as handle:
            handle.write(self.to_json() + "\n")
