"""Training-ecosystem glue for judge-distillation artifacts.

Three operations over the file formats exported by the evaluation
harness: validate chat-format training JSONL, prepare a fine-tuning run
with pinned default hyperparameters, and linearly merge two safetensors
checkpoints tensor by tensor.
"""

from .exportcheck import SchemaError, validate_export
from .finetune import FinetuneParams, RunHandle, launch_finetune
from .merge import ShapeMismatch, linear_merge
from .safetensors_io import SafetensorsReader, TensorInfo, write_safetensors

__all__ = [
    "FinetuneParams",
    "RunHandle",
    "SafetensorsReader",
    "SchemaError",
    "ShapeMismatch",
    "TensorInfo",
    "launch_finetune",
    "linear_merge",
    "validate_export",
    "write_safetensors",
]
