"""3D wavelet-attention segmentation network on a numpy autodiff core."""

from .model import ModelConfig, Variant, count_params, forward, init_params, predict, toy_config

__all__ = ["ModelConfig", "Variant", "count_params", "forward", "init_params", "predict", "toy_config"]
__version__ = "0.1.0"
