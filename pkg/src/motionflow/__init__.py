"""Optimal-transport conditional flow matching on a factored motion latent space.

The package is a small, fully deterministic research stack:

  * :mod:`motionflow.tensor` - float64 reverse-mode autodiff core
  * :mod:`motionflow.motionspace` - synthetic factored motion world
  * :mod:`motionflow.disentangle` - encoder stack and its loss suite
  * :mod:`motionflow.fieldnet` - transformer vector-field predictor
  * :mod:`motionflow.flowmatch` - OT coupling, flow-matching losses, training
  * :mod:`motionflow.sampler` - Euler ODE integration and long-form generation
  * :mod:`motionflow.metrics` - distribution, sync, leakage, smoothness metrics
  * :mod:`motionflow.harness` - configs, presets, manifests, experiment grid
"""

from .tensor import (
    Tensor,
    tensor,
    zeros,
    ones,
    matmul,
    concat,
    stack,
    softmax,
    layer_norm,
    gelu,
    cosine_similarity,
    l1_loss,
    backward,
    no_grad,
)
from .rng import SeededRng
from .gradcheck import gradcheck, finite_difference
from .params import ParamStore, Linear, MLP, save_params, load_params
from .optim import Adam
from .motionspace import (
    MotionWorld,
    MotionLatentSequence,
    ConditionSequence,
    SignalSpec,
    sequence_to_csv,
    sequence_from_csv,
)
from .disentangle import (
    DisentangleConfig,
    EncoderStack,
    TrainingDiverged,
    train_disentangler,
    linear_probe_r2,
)
from .fieldnet import PredictorConfig, FieldPredictor, predict_field
from .flowmatch import (
    TrainConfig,
    FlowBatch,
    FeatureSpace,
    ot_couple,
    sample_path,
    cfm_loss,
    velocity_consistency_loss,
    train_flow,
    window_batches,
)
from .sampler import (
    SolverConfig,
    Trajectory,
    DivergenceError,
    euler_integrate,
    generate,
    convergence_probe,
    linear_field_probe,
)
from .metrics import (
    GaussianSummary,
    MetricsReport,
    SyncProbe,
    frechet_distance,
    sync_distance,
    factor_leakage,
    smoothness,
)
from .harness import (
    ExperimentConfig,
    ConfigError,
    parse_config,
    serialize_config,
    config_hash,
    preset_config,
    run_train,
    run_sample,
    run_eval,
    run_ablate,
    verify_manifest,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "concat",
    "stack",
    "softmax",
    "layer_norm",
    "gelu",
    "cosine_similarity",
    "l1_loss",
    "backward",
    "no_grad",
    "SeededRng",
    "gradcheck",
    "finite_difference",
    "ParamStore",
    "Linear",
    "MLP",
    "save_params",
    "load_params",
    "Adam",
    "MotionWorld",
    "MotionLatentSequence",
    "ConditionSequence",
    "SignalSpec",
    "sequence_to_csv",
    "sequence_from_csv",
    "DisentangleConfig",
    "EncoderStack",
    "TrainingDiverged",
    "train_disentangler",
    "linear_probe_r2",
    "PredictorConfig",
    "FieldPredictor",
    "predict_field",
    "TrainConfig",
    "FlowBatch",
    "FeatureSpace",
    "ot_couple",
    "sample_path",
    "cfm_loss",
    "velocity_consistency_loss",
    "train_flow",
    "window_batches",
    "SolverConfig",
    "Trajectory",
    "DivergenceError",
    "euler_integrate",
    "generate",
    "convergence_probe",
    "linear_field_probe",
    "GaussianSummary",
    "MetricsReport",
    "SyncProbe",
    "frechet_distance",
    "sync_distance",
    "factor_leakage",
    "smoothness",
    "ExperimentConfig",
    "ConfigError",
    "parse_config",
    "serialize_config",
    "config_hash",
    "preset_config",
    "run_train",
    "run_sample",
    "run_eval",
    "run_ablate",
    "verify_manifest",
    "__version__",
]
