"""Dense blended attention network for single-image super-resolution.

Pure-numpy layer kernels with analytic backward passes, the blended
attention block, the dense network, its training loop, the bicubic
degradation pipeline and PSNR/SSIM evaluation.
"""

from dban.tensor import ShapeError, get_dtype, precision, set_dtype
from dban.network import ModelConfig, build_model, count_params, model_backward, model_forward
from dban.training import TrainConfig, train

__all__ = [
    "ShapeError",
    "get_dtype",
    "set_dtype",
    "precision",
    "ModelConfig",
    "build_model",
    "count_params",
    "model_forward",
    "model_backward",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
