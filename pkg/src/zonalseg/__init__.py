"""Prostate zonal segmentation on a small numpy autodiff engine."""

from .estimator import SlicePreprocessor, ZonalSegmenter
from .zonal_net import ModelConfig, build_model, forward_segment

__all__ = ["ModelConfig", "SlicePreprocessor", "ZonalSegmenter", "build_model", "forward_segment"]
__version__ = "0.1.0"
