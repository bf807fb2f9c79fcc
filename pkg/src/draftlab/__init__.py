"""Desk-scale laboratory for residual-adapter domain adaptation of self-supervised speech models."""

from .errors import DraftError
from .model import AcousticModel, ModelConfig, desk_preset, paper_preset
from .params import Group, ParamStore

__version__ = "0.1.0"
__all__ = ["AcousticModel", "DraftError", "Group", "ModelConfig", "ParamStore", "desk_preset", "paper_preset"]
