from .accounting import FlopsReport, LayerCost, ablation_grid, count_buffers, count_flops, count_params
from .checkpoint import (
    BadMagicError,
    CheckpointError,
    ManifestMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from .network import STRIDES, ConfigError, ModelConfig, YoloPPA, build, decode_predictions, encode_targets

__all__ = [
    "BadMagicError", "CheckpointError", "ConfigError", "FlopsReport", "LayerCost",
    "ManifestMismatchError", "ModelConfig", "STRIDES", "TruncatedPayloadError",
    "VersionMismatchError", "YoloPPA", "ablation_grid", "build", "count_buffers", "count_flops",
    "count_params", "decode_predictions", "encode_targets", "load_checkpoint", "read_manifest",
    "save_checkpoint",
]
