"""Lens-aligned knowledge distillation for small decoder-only language models."""

from .autodiff import NumericError, Tensor, no_grad
from .distill import DistillConfig, LayerMapping, TeacherConfig, select_student_layers, uniform_map
from .lens import LensConfig, logit_lens
from .model import ModelCheckpoint, ModelConfig, forward_with_states, generate, init_model

__version__ = "0.1.0"

__all__ = [
    "DistillConfig", "LayerMapping", "LensConfig", "ModelCheckpoint", "ModelConfig", "NumericError",
    "TeacherConfig", "Tensor", "forward_with_states", "generate", "init_model", "logit_lens",
    "no_grad", "select_student_layers", "uniform_map",
]
