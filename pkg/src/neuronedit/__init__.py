"""Entropy-guided sparse neuron masks for lifelong knowledge editing of small
transformer language models."""

from __future__ import annotations

__version__ = "0.1.0"

from .attribution import AttributionConfig, AttributionMatrix, attribute
from .corpus import FactWorld, generate_world, make_edit_stream
from .editor import EditorConfig, EditorState, apply_edit, apply_edit_batch
from .editor_types import EditRequest
from .errors import ConfigError, DataError, EditError, NeuronEditError, NumericalError
from .masking import MaskingConfig, NeuronMask, make_mask
from .model import ModelCheckpoint, ModelConfig, forward, init_model

__all__ = [
    "AttributionConfig", "AttributionMatrix", "ConfigError", "DataError", "EditError", "EditRequest",
    "EditorConfig", "EditorState", "FactWorld", "MaskingConfig", "ModelCheckpoint", "ModelConfig",
    "NeuronEditError", "NeuronMask", "NumericalError", "__version__", "apply_edit", "apply_edit_batch",
    "attribute", "forward", "generate_world", "init_model", "make_edit_stream", "make_mask",
]
