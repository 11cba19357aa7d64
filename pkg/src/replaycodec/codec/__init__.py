from .config import ModelConfig, dataclass_from_text, dataclass_to_text, parse_kv
from .model import (
    ForwardResult,
    Model,
    StageLatent,
    batch_to_image,
    image_to_batch,
    model_fingerprint,
    quantize_residual,
    round_half_away,
)

__all__ = [
    "ModelConfig",
    "parse_kv",
    "dataclass_to_text",
    "dataclass_from_text",
    "Model",
    "ForwardResult",
    "StageLatent",
    "batch_to_image",
    "image_to_batch",
    "model_fingerprint",
    "quantize_residual",
    "round_half_away",
]
