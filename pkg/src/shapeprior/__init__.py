"""Segmentation with learnable explicit shape priors.

A small numpy library: a reverse-mode autodiff tensor engine, the
prior self/cross update blocks, a residual U-shape backbone that threads the
prior through its skip connections, atlas and GMM baselines, a synthetic
data generator with bit-exact file formats, and a training harness.
"""

from .backbone import (
    ModelConfig,
    StageSnapshot,
    UNetModel,
    build_model,
    export_stage_priors,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .baselines import (
    AtlasBase,
    GaussianMixture,
    Registration,
    atlas_segment,
    gmm_fit_em,
    gmm_segment,
    register_translation,
    translate_mask,
)
from .data import (
    CaseEntry,
    DatasetManifest,
    MaskVolume,
    Volume,
    gen_case,
    gen_dataset,
    load_manifest,
    make_manifest,
    read_mask,
    read_volume,
    write_mask,
    write_volume,
    zscore,
)
from .functional import (
    MlpWeights,
    conv3d,
    downsample_avg,
    gelu,
    layer_norm,
    log_softmax,
    mlp,
    one_hot,
    relu,
    replicate_pad,
    softmax,
    upsample_trilinear,
)
from .gradcheck import GradCheckResult, check_op_suite, grad_check
from .losses import ce_loss, dice_loss, total_loss
from .metrics import MetricsRecord, dice_score, hd95, summarize_case
from .spm import (
    FeatureMap,
    ShapePrior,
    SpmWeights,
    StageMismatchError,
    affinity_cross,
    affinity_self,
    cross_update_block,
    init_shape_prior,
    init_spm_weights,
    prior_extents_for,
    self_update_block,
    spm_forward,
    spm_parameter_count,
)
from .tensor import Tensor, concat, matmul, no_grad, tensor
from .training import (
    AdamW,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    evaluate,
    export_attention,
    lr_at,
    train,
    write_pgm,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AtlasBase", "CaseEntry", "DatasetManifest", "FeatureMap",
    "GaussianMixture", "GradCheckResult", "MaskVolume", "MetricsRecord",
    "MlpWeights", "ModelConfig", "Registration", "ShapePrior", "SpmWeights",
    "StageMismatchError", "StageSnapshot", "Tensor", "TrainConfig",
    "TrainResult", "TrainingDiverged", "UNetModel", "Volume",
    "affinity_cross", "affinity_self", "atlas_segment", "build_model",
    "ce_loss", "check_op_suite", "concat", "conv3d", "cross_update_block",
    "dice_loss", "dice_score", "downsample_avg", "evaluate",
    "export_attention", "export_stage_priors", "forward", "gelu", "gen_case",
    "gen_dataset", "gmm_fit_em", "gmm_segment", "grad_check", "hd95",
    "init_shape_prior", "init_spm_weights", "layer_norm", "load_checkpoint",
    "load_manifest", "log_softmax", "lr_at", "make_manifest", "matmul",
    "mlp", "no_grad", "one_hot", "prior_extents_for", "read_mask",
    "read_volume", "register_translation", "relu", "replicate_pad",
    "save_checkpoint", "self_update_block", "softmax", "spm_forward",
    "spm_parameter_count", "summarize_case", "tensor", "total_loss", "train",
    "translate_mask", "upsample_trilinear", "write_mask", "write_pgm",
    "write_volume", "zscore",
]
