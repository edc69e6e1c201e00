"""tap: promptable region tokenization.

Given an image and a visual prompt (points, box or sketch), produce a
segmentation mask, an open-vocabulary concept prediction distilled from a
frozen teacher, and a generated region caption, all read off a single
semantic token per region.
"""

from .config import ModelConfig, TrainConfig, load_configs, paper_model_config

__version__ = "0.1.0"

__all__ = ["ModelConfig", "TrainConfig", "load_configs", "paper_model_config", "__version__"]
