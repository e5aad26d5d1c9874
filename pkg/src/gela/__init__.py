"""Desk-scale workbench for grounded entity-landmark pre-training of navigation agents."""

from .errors import GelaError
from .model import ModelConfig, NavModel

__all__ = ["GelaError", "ModelConfig", "NavModel"]
__version__ = "0.1.0"
