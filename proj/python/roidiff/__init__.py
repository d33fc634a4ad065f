"""Metadata-conditioned diffusion pretraining for ROI x time signals."""

from roidiff._core import (
    CheckpointError,
    ConfigError,
    DitModel,
    MetadataRecord,
    ModelConfig,
    NoiseSchedule,
    cosine_schedule,
    diffusion_loss,
    fc,
    fc_error,
    forward_noise,
    generate_corpus_dir,
    group_fc,
    linear_probe,
    load_checkpoint,
    recover_x0_eps,
    sample,
    save_checkpoint,
    v_target,
)
from roidiff._core import __version__

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DitModel",
    "MetadataRecord",
    "ModelConfig",
    "NoiseSchedule",
    "cosine_schedule",
    "diffusion_loss",
    "fc",
    "fc_error",
    "forward_noise",
    "generate_corpus_dir",
    "group_fc",
    "linear_probe",
    "load_checkpoint",
    "recover_x0_eps",
    "sample",
    "save_checkpoint",
    "v_target",
    "__version__",
]
