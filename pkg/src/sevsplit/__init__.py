"""Decompose fluorescence microscopy images that superimpose two structures.

An acquisition is modeled as a pixel-wise convex blend of two constituent
channels at an unknown ratio.  The package estimates that ratio from the
image alone and reconstructs both constituents: severity-conditioned
normalization (`scin`), ratio regression and conditional generation (`nets`,
`train`), tiled inference with ratio aggregation (`infer`), and scoring
across mixing regimes (`evaluation`).
"""

from .data import (
    ChannelFrameSet,
    PatchSampler,
    PatchSpec,
    SynthConfig,
    clip_frames,
    extract_patches,
    fingerprint,
    load_dataset,
    save_dataset,
    synthesize_dataset,
)
from .errors import (
    ConfigurationError,
    DivergenceError,
    FingerprintMismatchError,
    IngestionError,
)
from .evaluation import (
    EvalReport,
    RegimeSpec,
    degradation_sweep,
    emit_report,
    emit_sweep,
    evaluate_regimes,
    ms_ssim,
    psnr,
)
from .infer import (
    AcquisitionInput,
    InferenceConfig,
    UnmixResult,
    save_unmix_result,
    unmix,
    unmix_iterative,
)
from .mixing import (
    NoiseConfig,
    TSamplerConfig,
    convert_w_to_t,
    mix,
    perturb,
    sample_t,
    validate_ratio,
)
from .nets import (
    GeneratorNet,
    GenSpec,
    ModelBundle,
    RegressorNet,
    RegSpec,
    load_bundle,
    save_bundle,
)
from .scin import (
    ChannelStats,
    ScinTable,
    TargetChannelStats,
    build_table,
    compute_target_stats,
    load_table,
    predict_variance,
    save_table,
)
from .train import TrainConfig, TrainReport, make_bundle, train_generators, train_regressor

__version__ = "0.1.0"

__all__ = [
    "AcquisitionInput",
    "ChannelFrameSet",
    "ChannelStats",
    "ConfigurationError",
    "DivergenceError",
    "EvalReport",
    "FingerprintMismatchError",
    "GenSpec",
    "GeneratorNet",
    "InferenceConfig",
    "IngestionError",
    "ModelBundle",
    "NoiseConfig",
    "PatchSampler",
    "PatchSpec",
    "RegimeSpec",
    "RegSpec",
    "RegressorNet",
    "ScinTable",
    "SynthConfig",
    "TSamplerConfig",
    "TargetChannelStats",
    "TrainConfig",
    "TrainReport",
    "UnmixResult",
    "build_table",
    "clip_frames",
    "compute_target_stats",
    "convert_w_to_t",
    "degradation_sweep",
    "emit_report",
    "emit_sweep",
    "evaluate_regimes",
    "extract_patches",
    "fingerprint",
    "load_bundle",
    "load_dataset",
    "load_table",
    "make_bundle",
    "mix",
    "ms_ssim",
    "perturb",
    "predict_variance",
    "psnr",
    "sample_t",
    "save_bundle",
    "save_dataset",
    "save_table",
    "save_unmix_result",
    "synthesize_dataset",
    "train_generators",
    "train_regressor",
    "unmix",
    "unmix_iterative",
    "validate_ratio",
]
