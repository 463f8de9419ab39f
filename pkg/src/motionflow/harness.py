"""Experiment orchestration: configs, presets, pipelines, manifests, ablation grid.

One flat :class:`ExperimentConfig` drives everything.  It serializes to a
sectioned key=value text file (see ``_SCHEMA`` for the grammar) whose hash —
computed with the seed and output directory blanked — stamps every artifact a
run produces.  ``run_train`` executes the two-stage pipeline (feature-space
pretraining, then flow training on frozen features), ``run_sample`` rolls out
sequences window by window, ``run_eval`` scores a directory of generated
sequences against a reference directory, and ``run_ablate`` runs the
three-cell comparison grid with shared seeds.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .disentangle import (
    DisentangleConfig,
    EncoderStack,
    TrainingDiverged,
    make_batch_stream,
    train_disentangler,
)
from .fieldnet import FieldPredictor, PredictorConfig
from .flowmatch import (
    DiffusionSchedule,
    FeatureSpace,
    TrainConfig,
    constant_shift_batches,
    ddpm_sample,
    train_flow,
    window_batches,
)
from .gradcheck import gradcheck
from .metrics import (
    GaussianSummary,
    MetricsReport,
    SyncProbe,
    factor_leakage,
    frechet_distance,
    leakage_summary,
    smoothness,
    sync_distance,
)
from .motionspace import (
    FACTORS,
    ConditionSequence,
    MotionLatentSequence,
    MotionWorld,
    SignalSpec,
    sequence_from_csv,
    sequence_to_csv,
)
from .params import ParamsFormatError, load_params, save_params
from .rng import SeededRng
from .sampler import SolverConfig, generate
from .svgplot import line_chart
from .tensor import (
    Tensor,
    cosine_similarity,
    gelu,
    l1_loss,
    layer_norm,
    matmul,
    no_grad,
    softmax,
)
from .tensor import concat as tensor_concat
from .tensor import stack as tensor_stack

MANIFEST_VERSION = "motionflow-manifest v1"
CONFIG_VERSION = "motionflow-config v1"
ABLATION_VERSION = "motionflow-ablation v1"
OUT_ROOT_ENV = "MOTIONFLOW_OUT_ROOT"


class ConfigError(ValueError):
    """A config file could not be parsed or describes an impossible setup."""


class CheckpointMismatch(RuntimeError):
    """A checkpoint's dimensions or identity disagree with the active config."""


# -- experiment configuration ----------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one experiment, flattened; see ``_SCHEMA`` for file layout."""

    # [run]
    preset: str = "default"
    seed: int = 0
    out: str = ""
    # [world]
    d: int = 32
    lip: int = 6
    pose: int = 6
    eye: int = 4
    residual: int = 16
    world_seed: int = 0
    lip_mode: str = "linear"
    # [stage1]
    m: int = 32
    eye_dim: int = 8
    lip_dim: int = 8
    stage1_hidden: int = 64
    stage1_lr: float = 1e-3
    stage1_batch: int = 16
    stage1_steps: int = 2000
    temperature: float = 1.0
    pool_sequences: int = 192
    pool_len: int = 8
    objective: str = "full"
    # [predictor]
    h: int = 64
    heads: int = 4
    layers: int = 2
    radius: int = 4
    time_dim: int = 32
    window: int = 16
    context: int = 4
    # [flow]
    data: str = "world"
    lambda_ot: float = 0.6
    lambda_vel: float = 1.0
    flow_lr: float = 1e-4
    flow_batch: int = 16
    flow_steps: int = 1000
    baseline: str = "flow"
    coupling: str = "exact"
    sigma_min: float = 0.0
    train_sequences: int = 48
    train_frames: int = 72
    checkpoint_every: int = 200
    # [eval]
    solver_steps: int = 32
    eval_sequences: int = 8
    eval_frames: int = 64
    sample_seed: int = 0

    def __post_init__(self):
        total = self.lip + self.pose + self.eye + self.residual
        if total != self.d:
            raise ConfigError(
                f"factor dims sum to {total} but d = {self.d}")
        if self.data not in ("world", "constant-shift"):
            raise ConfigError(
                f"data must be 'world' or 'constant-shift', got {self.data!r}")
        if not 0 <= self.context < self.window:
            raise ConfigError(
                f"context must satisfy 0 <= context < window, got "
                f"{self.context}/{self.window}")


# (section, key-in-file, attribute, type) — single source of truth for the format
_SCHEMA = {
    "run": [
        ("preset", "preset", str), ("seed", "seed", int), ("out", "out", str),
    ],
    "world": [
        ("d", "d", int), ("lip", "lip", int), ("pose", "pose", int),
        ("eye", "eye", int), ("residual", "residual", int),
        ("world_seed", "world_seed", int), ("lip_mode", "lip_mode", str),
    ],
    "stage1": [
        ("m", "m", int), ("eye_dim", "eye_dim", int), ("lip_dim", "lip_dim", int),
        ("hidden", "stage1_hidden", int), ("lr", "stage1_lr", float),
        ("batch", "stage1_batch", int), ("steps", "stage1_steps", int),
        ("temperature", "temperature", float),
        ("pool_sequences", "pool_sequences", int), ("pool_len", "pool_len", int),
        ("objective", "objective", str),
    ],
    "predictor": [
        ("h", "h", int), ("heads", "heads", int), ("layers", "layers", int),
        ("radius", "radius", int), ("time_dim", "time_dim", int),
        ("window", "window", int), ("context", "context", int),
    ],
    "flow": [
        ("data", "data", str), ("lambda_ot", "lambda_ot", float),
        ("lambda_vel", "lambda_vel", float), ("lr", "flow_lr", float),
        ("batch", "flow_batch", int), ("steps", "flow_steps", int),
        ("baseline", "baseline", str), ("coupling", "coupling", str),
        ("sigma_min", "sigma_min", float),
        ("train_sequences", "train_sequences", int),
        ("train_frames", "train_frames", int),
        ("checkpoint_every", "checkpoint_every", int),
    ],
    "eval": [
        ("solver_steps", "solver_steps", int),
        ("sequences", "eval_sequences", int), ("frames", "eval_frames", int),
        ("sample_seed", "sample_seed", int),
    ],
}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse the sectioned key=value format; errors carry section and key."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        known = {key: (attr, typ) for key, attr, typ in _SCHEMA[section]}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            attr, typ = known[key]
            try:
                values[attr] = raw if typ is str else typ(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"{source}: [{section}] {key} expects {typ.__name__}, "
                    f"got {raw!r}") from exc
    return ExperimentConfig(**values)


def parse_config_file(path: str) -> ExperimentConfig:
    try:
        with open(path) as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config(text, source=path)


def serialize_config(config: ExperimentConfig) -> str:
    """Emit the config in schema order; ``parse_config`` round-trips it exactly."""
    lines = [f"# {CONFIG_VERSION}"]
    for section, entries in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, attr, typ in entries:
            value = getattr(config, attr)
            lines.append(f"{key} = {value!r}" if typ is float else f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def config_hash(config: ExperimentConfig) -> str:
    """12-hex digest of the config with run identity (seed, out dir) blanked."""
    canon = replace(config, seed=0, out="")
    return hashlib.sha256(serialize_config(canon).encode()).hexdigest()[:12]


# -- presets --------------------------------------------------------------------------


PRESETS = {
    "default": {},
    # tiny world + tiny net trained on the analytically-solvable shifted pairs
    "micro-shift": dict(
        data="constant-shift", d=8, lip=2, pose=2, eye=2, residual=2,
        m=8, stage1_steps=0, h=32, heads=2, layers=1, radius=2, time_dim=8,
        window=4, context=1, flow_lr=2e-3, flow_batch=32, flow_steps=3000,
        solver_steps=16, eval_sequences=4, eval_frames=16,
    ),
    # full-size geometry for shape/contract checks only; never in timed runs
    "paper": dict(
        d=512, lip=96, pose=96, eye=64, residual=256, m=512,
        h=1024, heads=8, layers=2, radius=10, time_dim=256,
        window=50, context=10,
    ),
    # comparison-grid cells
    "fcme-flow": {},
    "vae-flow": dict(objective="vae"),
    "fcme-diff": dict(baseline="ddpm"),
}

ABLATION_CELLS = ("fcme-flow", "vae-flow", "fcme-diff")


def preset_config(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = dict(PRESETS[name])
    merged.update(overrides)
    return ExperimentConfig(preset=name, **merged)


# -- component-config builders ----------------------------------------------------------


def build_world(config: ExperimentConfig) -> MotionWorld:
    dims = {"lip": config.lip, "pose": config.pose,
            "eye": config.eye, "residual": config.residual}
    spec = SignalSpec(map_seed=config.world_seed, lip_mode=config.lip_mode)
    return MotionWorld.build(d=config.d, dims=dims, seed=config.world_seed,
                             signal_spec=spec)


def stage1_config(config: ExperimentConfig) -> DisentangleConfig:
    return DisentangleConfig(
        m=config.m, eye_dim=config.eye_dim, lip_dim=config.lip_dim,
        hidden=config.stage1_hidden, lr=config.stage1_lr,
        batch=config.stage1_batch, steps=config.stage1_steps,
        temperature=config.temperature, seed=config.seed,
        pool_sequences=config.pool_sequences, pool_len=config.pool_len,
        objective=config.objective,
    )


def predictor_config(config: ExperimentConfig, world: MotionWorld) -> PredictorConfig:
    feature_dim = config.m if config.data == "world" else config.d
    return PredictorConfig(
        d=feature_dim, h=config.h, heads=config.heads, layers=config.layers,
        T=config.radius, F=config.window, time_dim=config.time_dim,
        cond_dim=world.cond_dim, context=config.context,
    )


def train_config(config: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        lambda_ot=config.lambda_ot, lambda_vel=config.lambda_vel,
        lr=config.flow_lr, batch=config.flow_batch, steps=config.flow_steps,
        seed=config.seed, baseline=config.baseline, coupling=config.coupling,
        sigma_min=config.sigma_min,
    )


def solver_config(config: ExperimentConfig, steps: int | None = None) -> SolverConfig:
    return SolverConfig(steps=steps or config.solver_steps,
                        window=config.window, context=config.context)


def constant_shift_vector(dim: int, seed: int) -> np.ndarray:
    """The fixed target offset of the analytically-paired training set."""
    return SeededRng(seed).spawn("constant-shift").uniform(-1.0, 1.0, size=dim)


# -- filesystem plumbing ----------------------------------------------------------------


def _write_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as handle:
        handle.write(text)
    os.replace(tmp, path)


def _copy_atomic(src: str, dst: str) -> None:
    tmp = f"{dst}.tmp.{os.getpid()}"
    shutil.copyfile(src, tmp)
    os.replace(tmp, dst)


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def default_run_dir(config: ExperimentConfig) -> str:
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return os.path.join(root, f"{config.preset}-s{config.seed}-{config_hash(config)}")


def write_manifest(run_dir: str, config: ExperimentConfig, wall_clock: float,
                   extra: dict | None = None) -> str:
    """List every file in the run directory with its checksum; written atomically."""
    files = {}
    for root, _, names in os.walk(run_dir):
        for name in names:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, run_dir)
            if rel == "manifest.json" or rel.endswith(".tmp"):
                continue
            files[rel] = _sha256_file(path)
    payload = {
        "format_version": MANIFEST_VERSION,
        "config_hash": config_hash(config),
        "preset": config.preset,
        "seed": config.seed,
        "wall_clock_seconds": round(wall_clock, 3),
        "files": dict(sorted(files.items())),
    }
    if extra:
        payload.update(extra)
    path = os.path.join(run_dir, "manifest.json")
    _write_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(run_dir: str) -> list:
    """Re-hash a run directory against its manifest; returns problems (empty = good)."""
    path = os.path.join(run_dir, "manifest.json")
    try:
        with open(path) as handle:
            payload = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        return [f"unreadable manifest: {exc}"]
    problems = []
    if payload.get("format_version") != MANIFEST_VERSION:
        problems.append(f"unexpected format_version {payload.get('format_version')!r}")
    listed = payload.get("files", {})
    for rel, expected in listed.items():
        full = os.path.join(run_dir, rel)
        if not os.path.exists(full):
            problems.append(f"missing file {rel}")
        elif _sha256_file(full) != expected:
            problems.append(f"checksum mismatch for {rel}")
    for root, _, names in os.walk(run_dir):
        for name in names:
            rel = os.path.relpath(os.path.join(root, name), run_dir)
            if rel != "manifest.json" and rel not in listed:
                problems.append(f"unlisted file {rel}")
    return problems


# -- loss-curve artifacts ----------------------------------------------------------------


def _write_loss_csv(path: str, curves: dict) -> None:
    keys = list(curves)
    rows = [f"step,{','.join(keys)}"]
    for i in range(len(curves[keys[0]])):
        rows.append(f"{i}," + ",".join(f"{curves[k][i]:.10g}" for k in keys))
    _write_atomic(path, "\n".join(rows) + "\n")


def _read_loss_csv(path: str) -> dict:
    with open(path) as handle:
        lines = [ln.strip() for ln in handle if ln.strip()]
    keys = lines[0].split(",")[1:]
    curves = {k: [] for k in keys}
    for line in lines[1:]:
        parts = line.split(",")[1:]
        for k, value in zip(keys, parts):
            curves[k].append(float(value))
    return curves


def _write_loss_svg(path: str, curves: dict, title: str) -> None:
    series = {k: np.asarray(v, dtype=np.float64) for k, v in curves.items() if v}
    if not series:
        return
    _write_atomic(path, line_chart(series, title=title, x_label="step", y_label="loss"))


# -- training pipeline -------------------------------------------------------------------


def _snapshotting(stream, store, every: int, holder: dict):
    """Yield batches unchanged, stashing a params snapshot every ``every`` steps.

    The snapshot taken before batch ``i`` is the state produced by the first
    ``i`` finite updates — the recovery point if a later step diverges.
    """
    for i, item in enumerate(stream):
        if every > 0 and i % every == 0:
            holder["step"] = i
            holder["arrays"] = store.state_arrays()
        yield item


def _stage1_key(config: ExperimentConfig) -> str:
    parts = []
    for section in ("world", "stage1"):
        for key, attr, _ in _SCHEMA[section]:
            parts.append(f"{key}={getattr(config, attr)!r}")
    parts.append(f"seed={config.seed!r}")
    return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]


def run_stage1(config: ExperimentConfig, world: MotionWorld, out_dir: str,
               cache_dir: str | None = None) -> EncoderStack:
    """Pretrain (or reuse) the feature stack; writes checkpoint, curves, chart."""
    scfg = stage1_config(config)
    params_path = os.path.join(out_dir, "stage1.params")
    csv_path = os.path.join(out_dir, "loss_stage1.csv")
    cached_params = cached_csv = None
    if cache_dir:
        key = _stage1_key(config)
        os.makedirs(cache_dir, exist_ok=True)
        cached_params = os.path.join(cache_dir, f"{key}.params")
        cached_csv = os.path.join(cache_dir, f"{key}.csv")
        if os.path.exists(cached_params) and os.path.exists(cached_csv):
            arrays, _ = load_params(cached_params)
            stack = EncoderStack(world.d, world.cond_dim, scfg,
                             audio_channels=world.signal_spec.audio_dim)
            stack.store.load_state(arrays)
            _copy_atomic(cached_params, params_path)
            _copy_atomic(cached_csv, csv_path)
            _write_loss_svg(os.path.join(out_dir, "loss_stage1.svg"),
                            _read_loss_csv(csv_path), "feature pretraining")
            return stack

    stack = EncoderStack(world.d, world.cond_dim, scfg,
                             audio_channels=world.signal_spec.audio_dim)
    meta = {"kind": "stage1", "key": _stage1_key(config), "seed": config.seed,
            "latent_dim": world.d, "cond_dim": world.cond_dim, "m": config.m,
            "objective": config.objective}
    holder = {"step": -1, "arrays": None}
    stream = _snapshotting(make_batch_stream(world, scfg), stack.store,
                           config.checkpoint_every, holder)
    try:
        stack, curves = train_disentangler(scfg, stream, world, stack=stack)
    except TrainingDiverged as exc:
        if holder["arrays"] is not None:
            stack.store.load_state(holder["arrays"])
        save_params(params_path, stack.store,
                    meta={**meta, "aborted_at_step": exc.step,
                          "last_good_step": holder["step"]})
        raise
    save_params(params_path, stack.store, meta=meta)
    _write_loss_csv(csv_path, curves)
    _write_loss_svg(os.path.join(out_dir, "loss_stage1.svg"), curves,
                    "feature pretraining")
    if cached_params:
        _copy_atomic(params_path, cached_params)
        _copy_atomic(csv_path, cached_csv)
    return stack


def extract_feature_sequences(config: ExperimentConfig, world: MotionWorld,
                              stack: EncoderStack):
    """Synthesize the flow-training pool, encode it, and fit the feature scaler."""
    seeds = SeededRng(config.seed).spawn("flow-data").integers(
        0, 2 ** 31 - 1, size=config.train_sequences)
    raw_seqs, cond_seqs = [], []
    for seq_seed in seeds:
        seq, cond = world.synthesize(config.train_frames, seed=int(seq_seed))
        raw_seqs.append(stack.motion_array(seq.latents))
        cond_seqs.append(cond.channels)
    fspace = FeatureSpace.fit(np.concatenate(raw_seqs, axis=0))
    feature_seqs = [fspace.encode(raw) for raw in raw_seqs]
    return feature_seqs, cond_seqs, fspace


def run_stage2(config: ExperimentConfig, world: MotionWorld, out_dir: str,
               stack: EncoderStack | None):
    """Train the velocity/noise predictor on frozen features; returns the pieces."""
    pcfg = predictor_config(config, world)
    predictor = FieldPredictor(pcfg, seed=config.seed)
    tcfg = train_config(config)

    if config.data == "world":
        if stack is None:
            raise ConfigError("world-data training needs a pretrained feature stack")
        feature_seqs, cond_seqs, fspace = extract_feature_sequences(config, world, stack)
        batches = window_batches(feature_seqs, cond_seqs, config.window,
                                 config.context, tcfg.batch,
                                 SeededRng(config.seed).spawn("windows"))
    else:
        shift = constant_shift_vector(pcfg.d, config.seed)
        fspace = FeatureSpace(mean=np.zeros(pcfg.d), std=np.ones(pcfg.d))
        batches = constant_shift_batches(shift, tcfg.batch, config.window,
                                         world.cond_dim, config.context,
                                         SeededRng(config.seed).spawn("shift-batches"))

    params_path = os.path.join(out_dir, "flow.params")
    meta = {"kind": "flow", "config_hash": config_hash(config), "seed": config.seed,
            "d": pcfg.d, "cond_dim": pcfg.cond_dim, "window": pcfg.F,
            "context": pcfg.context, "baseline": config.baseline,
            "fspace_mean": [float(v) for v in fspace.mean],
            "fspace_std": [float(v) for v in fspace.std]}
    holder = {"step": -1, "arrays": None}
    stream = _snapshotting(batches, predictor.store, config.checkpoint_every, holder)
    try:
        curves = train_flow(predictor, stream, tcfg,
                            csv_path=os.path.join(out_dir, "loss_flow.csv"))
    except TrainingDiverged as exc:
        if holder["arrays"] is not None:
            predictor.store.load_state(holder["arrays"])
        save_params(params_path, predictor.store,
                    meta={**meta, "aborted_at_step": exc.step,
                          "last_good_step": holder["step"]})
        raise
    save_params(params_path, predictor.store, meta=meta)
    _write_loss_svg(os.path.join(out_dir, "loss_flow.svg"), curves, "flow training")
    return predictor, fspace, curves


def write_reference(config: ExperimentConfig, world: MotionWorld, ref_dir: str) -> None:
    """Synthesize the held-out ground-truth sequences evaluations compare against."""
    os.makedirs(ref_dir, exist_ok=True)
    seeds = SeededRng(config.seed).spawn("reference").integers(
        0, 2 ** 31 - 1, size=config.eval_sequences)
    for i, seq_seed in enumerate(seeds):
        seq, cond = world.synthesize(config.eval_frames, seed=int(seq_seed))
        _write_atomic(os.path.join(ref_dir, f"seq-{i:03d}.csv"),
                      sequence_to_csv(seq, cond, seed=int(seq_seed)))


def run_train(config: ExperimentConfig, out_dir: str | None = None,
              stage1_cache: str | None = None) -> str:
    """Full training run: stage 1, stage 2, reference set, manifest. Returns the dir."""
    run_dir = out_dir or config.out or default_run_dir(config)
    os.makedirs(run_dir, exist_ok=True)
    started = time.monotonic()
    _write_atomic(os.path.join(run_dir, "config.ini"), serialize_config(config))
    world = build_world(config)
    try:
        stack = None
        if config.data == "world":
            stack = run_stage1(config, world, run_dir, cache_dir=stage1_cache)
        run_stage2(config, world, run_dir, stack)
        write_reference(config, world, os.path.join(run_dir, "reference"))
    except TrainingDiverged as exc:
        write_manifest(run_dir, config, time.monotonic() - started,
                       extra={"aborted_at_step": exc.step})
        raise
    write_manifest(run_dir, config, time.monotonic() - started)
    return run_dir


# -- sampling ----------------------------------------------------------------------------


def load_run(run_dir: str):
    """Rebuild (config, world, stack, predictor, feature space) from a run directory."""
    config = parse_config_file(os.path.join(run_dir, "config.ini"))
    world = build_world(config)
    stack = None
    if config.data == "world":
        arrays, _ = load_params(os.path.join(run_dir, "stage1.params"))
        stack = EncoderStack(world.d, world.cond_dim, stage1_config(config),
                             audio_channels=world.signal_spec.audio_dim)
        try:
            stack.store.load_state(arrays)
        except ParamsFormatError as exc:
            raise CheckpointMismatch(f"stage-1 checkpoint: {exc}") from exc
    pcfg = predictor_config(config, world)
    predictor = FieldPredictor(pcfg, seed=config.seed)
    arrays, meta = load_params(os.path.join(run_dir, "flow.params"))
    expected = {"d": pcfg.d, "cond_dim": pcfg.cond_dim,
                "window": pcfg.F, "context": pcfg.context}
    for key, want in expected.items():
        if key in meta and meta[key] != want:
            raise CheckpointMismatch(
                f"flow checkpoint has {key}={meta[key]}, config expects {want}")
    try:
        predictor.store.load_state(arrays)
    except ParamsFormatError as exc:
        raise CheckpointMismatch(f"flow checkpoint: {exc}") from exc
    fspace = FeatureSpace(mean=np.asarray(meta["fspace_mean"], dtype=np.float64),
                          std=np.asarray(meta["fspace_std"], dtype=np.float64))
    return config, world, stack, predictor, fspace


def decode_latents(stack: EncoderStack | None, fspace: FeatureSpace,
                   features: np.ndarray) -> np.ndarray:
    """Map flow-space features back to world latents (identity without a stack)."""
    raw = fspace.decode(features)
    if stack is None:
        return raw
    with no_grad():
        return stack.decoder(Tensor(raw)).numpy()


def _latents_to_sequence(world: MotionWorld, latents: np.ndarray) -> MotionLatentSequence:
    coeffs = {name: world.space(name).coords(latents) for name in FACTORS}
    return MotionLatentSequence(latents=latents, factor_coeffs=coeffs)


def _factor_plots(out_dir: str, stem: str, seq: MotionLatentSequence) -> None:
    for name in FACTORS:
        coeffs = seq.factor_coeffs[name]
        series = {f"{name}{j}": coeffs[:, j] for j in range(coeffs.shape[1])}
        _write_atomic(os.path.join(out_dir, f"{stem}-{name}.svg"),
                      line_chart(series, title=f"{stem} {name} coefficients",
                                 x_label="frame", y_label="coefficient"))


def run_sample(run_dir: str, steps: int | None = None, sample_seed: int | None = None,
               frames: int | None = None, count: int | None = None,
               edit: str | None = None, plots: bool = False,
               out_dir: str | None = None) -> str:
    """Generate sequences from a trained run; returns the sample directory."""
    started = time.monotonic()
    config, world, stack, predictor, fspace = load_run(run_dir)
    solver = solver_config(config, steps)
    seed = config.sample_seed if sample_seed is None else sample_seed
    frames = frames or config.eval_frames
    count = count or config.eval_sequences
    sample_dir = out_dir or os.path.join(run_dir, f"samples-s{seed}")
    os.makedirs(sample_dir, exist_ok=True)

    window_sampler = None
    if config.baseline == "ddpm":
        schedule = DiffusionSchedule.build()

        def window_sampler(cond, prev, rng):
            return ddpm_sample(predictor, cond, prev, rng, schedule)

    base = SeededRng(seed)
    cond_seeds = base.spawn("sample-conditions").integers(0, 2 ** 31 - 1, size=count)
    gen_seeds = base.spawn("sample-noise").integers(0, 2 ** 31 - 1, size=count)
    donor_seeds = base.spawn("edit-donors").integers(0, 2 ** 31 - 1, size=count)

    if edit is not None and edit not in ("eye", "pose"):
        raise ConfigError(f"edit group must be 'eye' or 'pose', got {edit!r}")

    def roll_out(cond_channels, gen_seed):
        features = generate(predictor, cond_channels, solver, seed=int(gen_seed),
                            window_sampler=window_sampler)
        return decode_latents(stack, fspace, features)

    for i in range(count):
        _, cond = world.synthesize(frames, seed=int(cond_seeds[i]))
        latents = roll_out(cond.channels, gen_seeds[i])
        stem = f"seq-{i:03d}"
        name = f"{stem}-base" if edit else stem
        seq = _latents_to_sequence(world, latents)
        _write_atomic(os.path.join(sample_dir, f"{name}.csv"),
                      sequence_to_csv(seq, cond, seed=int(gen_seeds[i])))
        if plots and i < 2:
            _factor_plots(sample_dir, name, seq)
        if edit:
            _, donor = world.synthesize(frames, seed=int(donor_seeds[i]))
            channels = cond.channels.copy()
            group = cond.layout[edit]
            channels[:, group] = donor.channels[:, group]
            edited_cond = ConditionSequence(channels=channels, layout=cond.layout)
            edited = roll_out(edited_cond.channels, gen_seeds[i])
            edited_seq = _latents_to_sequence(world, edited)
            _write_atomic(
                os.path.join(sample_dir, f"{stem}-edit-{edit}.csv"),
                sequence_to_csv(edited_seq, edited_cond, seed=int(gen_seeds[i])))

    _write_atomic(os.path.join(sample_dir, "config.ini"), serialize_config(config))
    write_manifest(sample_dir, config, time.monotonic() - started)
    return sample_dir


# -- evaluation --------------------------------------------------------------------------


def _load_sequence_dir(path: str):
    """Read every motion-sequence CSV in a directory; returns (entries, edit pairs)."""
    if not os.path.isdir(path):
        raise ValueError(f"{path!r} is not a directory")
    entries = {}
    for name in sorted(os.listdir(path)):
        if not name.endswith(".csv"):
            continue
        full = os.path.join(path, name)
        with open(full) as handle:
            text = handle.read()
        if not text.startswith("# motionseq"):
            continue  # metrics/loss tables live alongside sequences
        entries[name[:-4]] = sequence_from_csv(text)
    bases, pairs = [], []
    for stem, parsed in entries.items():
        if "-edit-" in stem:
            continue
        if stem.endswith("-base"):
            prefix = stem[: -len("-base")]
            for other in entries:
                marker = f"{prefix}-edit-"
                if other.startswith(marker):
                    factor = other[len(marker):]
                    pairs.append((factor, parsed[0].latents, entries[other][0].latents))
            bases.append(parsed)
        else:
            bases.append(parsed)
    if not bases:
        raise ValueError(f"no sequence files found in {path!r}")
    return bases, pairs


def _discover_config(gen_dir: str) -> ExperimentConfig:
    for candidate in (os.path.join(gen_dir, "config.ini"),
                      os.path.join(os.path.dirname(os.path.abspath(gen_dir)),
                                   "config.ini")):
        if os.path.exists(candidate):
            return parse_config_file(candidate)
    raise ConfigError(
        f"no config.ini found in {gen_dir!r} or its parent; pass one explicitly")


def run_eval(gen_dir: str, ref_dir: str, config: ExperimentConfig | None = None,
             out_dir: str | None = None) -> MetricsReport:
    """Score generated sequences against references; writes metrics CSV + JSON."""
    if config is None:
        config = _discover_config(gen_dir)
    world = build_world(config)
    generated, pairs = _load_sequence_dir(gen_dir)
    reference, _ = _load_sequence_dir(ref_dir)

    gen_dim = generated[0][0].latents.shape[1]
    ref_dim = reference[0][0].latents.shape[1]
    if gen_dim != ref_dim or gen_dim != world.d:
        raise ValueError(
            f"incompatible latent dims: generated {gen_dim}, reference {ref_dim}, "
            f"world {world.d}")

    gen_pool = np.concatenate([seq.latents for seq, _, _ in generated], axis=0)
    ref_pool = np.concatenate([seq.latents for seq, _, _ in reference], axis=0)
    pose_space = world.space("pose")
    lip_space = world.space("lip")

    ref_audio = np.concatenate([cond.group("audio") for _, cond, _ in reference], axis=0)
    probe = SyncProbe.fit(ref_audio, lip_space.coords(ref_pool))

    metrics = {
        "frechet_latent": frechet_distance(GaussianSummary.fit(gen_pool),
                                           GaussianSummary.fit(ref_pool)),
        "frechet_pose": frechet_distance(
            GaussianSummary.fit(pose_space.coords(gen_pool)),
            GaussianSummary.fit(pose_space.coords(ref_pool))),
        "sync": float(np.mean([sync_distance(seq.latents, cond, lip_space, probe)
                               for seq, cond, _ in generated])),
        "smooth": float(np.mean([smoothness(seq.latents)
                                 for seq, _, _ in generated])),
    }
    if pairs:
        grouped = {}
        for factor, base_latents, edited_latents in pairs:
            grouped.setdefault(factor, []).append((base_latents, edited_latents))
        matrix = factor_leakage(grouped, world.spaces)
        self_leak, off_leak = leakage_summary(matrix)
        metrics["leak_self"] = self_leak
        metrics["leak_off"] = off_leak

    report = MetricsReport(
        metrics=metrics,
        provenance={"config_hash": config_hash(config), "seed": config.seed,
                    "samples": int(gen_pool.shape[0])},
    )
    target = out_dir or gen_dir
    os.makedirs(target, exist_ok=True)
    report.write_csv(os.path.join(target, "metrics.csv"))
    report.write_json(os.path.join(target, "metrics.json"))
    return report


def boundary_jump_stats(latents: np.ndarray, window: int, context: int) -> dict:
    """Frame-to-frame jump sizes at segment seams versus inside segments.

    Segment k >= 1 of a windowed rollout starts at frame k*(window-context);
    the jump across that seam is compared with every other consecutive-frame
    jump. Returns medians plus their ratio (seam / interior).
    """
    latents = np.asarray(latents, dtype=np.float64)
    jumps = np.linalg.norm(np.diff(latents, axis=0), axis=1)
    fresh = window - context
    seam_idx = [k * fresh - 1 for k in range(1, latents.shape[0] // fresh + 1)
                if k * fresh - 1 < jumps.shape[0]]
    if not seam_idx:
        raise ValueError(
            f"sequence of {latents.shape[0]} frames has no segment seams at "
            f"window {window}, context {context}")
    mask = np.zeros(jumps.shape[0], dtype=bool)
    mask[seam_idx] = True
    seam = float(np.median(jumps[mask]))
    interior = float(np.median(jumps[~mask])) if (~mask).any() else float("nan")
    return {"seam_median": seam, "interior_median": interior,
            "ratio": seam / interior if interior > 0 else float("inf")}


# -- comparison grid ---------------------------------------------------------------------


def cell_config(base: ExperimentConfig, cell: str, seed: int) -> ExperimentConfig:
    if cell not in ABLATION_CELLS:
        raise ConfigError(f"unknown preset {cell!r}; grid cells are {ABLATION_CELLS}")
    overrides = dict(PRESETS[cell])
    return replace(base, preset=cell, seed=seed, out="", **overrides)


def _grid_cell(payload):
    ini, cell, seed, run_dir, ref_dir, cache_dir = payload
    config = parse_config(ini)
    run_train(config, run_dir, stage1_cache=cache_dir)
    sample_dir = run_sample(run_dir)
    report = run_eval(sample_dir, ref_dir)
    return {"cell": cell, "seed": seed,
            **{k: float(v) for k, v in sorted(report.metrics.items())}}


def run_ablate(base: ExperimentConfig, cells, seeds, out_dir: str,
               workers: int = 2) -> list:
    """Run every (cell, seed) end to end with shared references; merge the table."""
    cells = list(cells)
    seeds = [int(s) for s in seeds]
    for cell in cells:
        if cell not in ABLATION_CELLS:
            raise ConfigError(
                f"unknown preset {cell!r}; grid cells are {ABLATION_CELLS}")
    os.makedirs(out_dir, exist_ok=True)
    started = time.monotonic()
    cache_dir = os.path.join(out_dir, "stage1-cache")

    for seed in seeds:
        ref_dir = os.path.join(out_dir, f"reference-s{seed}")
        if not os.path.isdir(ref_dir):
            seeded = replace(base, seed=seed)
            write_reference(seeded, build_world(seeded), ref_dir)

    payloads = []
    for seed in seeds:
        for cell in cells:
            config = cell_config(base, cell, seed)
            payloads.append((serialize_config(config), cell, seed,
                             os.path.join(out_dir, f"{cell}-s{seed}"),
                             os.path.join(out_dir, f"reference-s{seed}"),
                             cache_dir))

    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_grid_cell, payloads))
    else:
        rows = [_grid_cell(p) for p in payloads]
    rows.sort(key=lambda r: (r["cell"], r["seed"]))

    metric_names = sorted(k for k in rows[0] if k not in ("cell", "seed"))
    lines = [f"# {ABLATION_VERSION}", "cell,seed," + ",".join(metric_names)]
    for row in rows:
        lines.append(f"{row['cell']},{row['seed']},"
                     + ",".join(f"{row[m]:.10g}" for m in metric_names))
    _write_atomic(os.path.join(out_dir, "ablation.csv"), "\n".join(lines) + "\n")

    summary = {}
    for cell in sorted({row["cell"] for row in rows}):
        cell_rows = [row for row in rows if row["cell"] == cell]
        summary[cell] = {m: float(np.mean([row[m] for row in cell_rows]))
                         for m in metric_names}
    _write_atomic(os.path.join(out_dir, "ablation.json"), json.dumps(
        {"format_version": ABLATION_VERSION, "rows": rows, "summary": summary},
        indent=2, sort_keys=True) + "\n")
    write_manifest(out_dir, base, time.monotonic() - started)
    return rows


# -- gradient battery ---------------------------------------------------------------------


def gradcheck_battery(include_net: bool = True) -> list:
    """Check every differentiable op (and the composed micro net) against
    central differences. Linear ops must agree to 1e-6, the rest to 1e-4.
    Returns (name, kind, report) triples.
    """
    rng = SeededRng(2024).spawn("battery")
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 5))
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    far = rng.normal(size=(3, 4)) + 4.0  # keeps |pred - target| away from the L1 kink

    cases = [
        ("add", "linear", lambda x, y: (x + y).sum(), [a, b]),
        ("sub", "linear", lambda x, y: (x - y).mean(), [a, b]),
        ("mul", "linear", lambda x, y: (x * y).sum(), [a, b]),
        ("div", "nonlinear", lambda x, y: (x / y).sum(), [a, pos]),
        ("neg", "linear", lambda x: (-x).sum(), [a]),
        ("pow", "nonlinear", lambda x: (x ** 2.5).sum(), [pos]),
        ("matmul", "linear", lambda x, y: (x @ y).sum(), [a, m]),
        ("reshape", "linear", lambda x: (x.reshape(4, 3) * 0.5).sum(), [a]),
        ("transpose", "linear", lambda x: x.T[1].sum(), [a]),
        ("slice", "linear", lambda x: x[1:, 2].sum(), [a]),
        ("sum-axis", "linear", lambda x: x.sum(axis=0).mean(), [a]),
        ("mean-keepdims", "linear",
         lambda x: (x.mean(axis=-1, keepdims=True) * 2.0).sum(), [a]),
        ("concat", "linear",
         lambda x, y: tensor_concat([x, y], axis=1).mean(), [a, b]),
        ("stack", "linear",
         lambda x, y: tensor_stack([x, y], axis=0)[1].sum(), [a, b]),
        ("exp", "nonlinear", lambda x: x.exp().sum(), [a]),
        ("log", "nonlinear", lambda x: x.log().sum(), [pos]),
        ("sqrt", "nonlinear", lambda x: x.sqrt().sum(), [pos]),
        ("tanh", "nonlinear", lambda x: x.tanh().sum(), [a]),
        ("abs", "nonlinear", lambda x: x.abs().sum(), [pos]),
        ("gelu", "nonlinear", lambda x: gelu(x).sum(), [a]),
        ("softmax", "nonlinear",
         lambda x, y: (softmax(x) * y).sum(), [a, b]),
        ("layer-norm", "nonlinear",
         lambda x, y: (layer_norm(x) * y).sum(), [a, b]),
        ("cosine-similarity", "nonlinear",
         lambda x, y: cosine_similarity(x, y), [a[0], b[0]]),
        ("l1-loss", "nonlinear", lambda x: l1_loss(x, Tensor(far)), [a]),
        ("matmul-op", "linear", lambda x, y: matmul(x, y).sum(), [a, m]),
        ("readout-mix", "linear", lambda x, y: (x @ y * Tensor(w)).sum(), [a, m]),
    ]

    if include_net:
        pcfg = PredictorConfig(d=4, h=8, heads=2, layers=1, T=1, F=3,
                               time_dim=4, cond_dim=3, context=1)
        net = FieldPredictor(pcfg, seed=7)
        for name, param in net.store.items():
            if name.endswith(".mod.weight") or name == "out_proj.weight":
                opened = SeededRng(77).spawn(name).normal(0.0, 0.3, size=param.shape)
                opened.flags.writeable = False
                param.data = opened
        net_rng = SeededRng(31).spawn("net-inputs")
        x = net_rng.normal(size=(2, pcfg.F, pcfg.d))
        cond = net_rng.normal(size=(2, pcfg.F, pcfg.cond_dim))
        prev = net_rng.normal(size=(2, pcfg.context, pcfg.d))
        mix = net_rng.normal(size=(2, pcfg.F, pcfg.d))

        def net_loss(x_in):
            return (net(x_in, cond, 0.3, prev) * Tensor(mix)).sum()

        cases.append(("field-net", "nonlinear", net_loss, [x]))

    results = []
    for name, kind, fn, arrays in cases:
        tol = 1e-6 if kind == "linear" else 1e-4
        results.append((name, kind, gradcheck(fn, arrays, tol=tol)))
    return results
