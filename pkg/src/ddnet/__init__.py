"""Dense deformable saliency network in numpy."""

from .model import DDNet, ModelConfig, build, param_count
from .tensor import NumericError, Parameter, ShapeError, Tensor, backward, no_grad

__all__ = [
    "DDNet",
    "ModelConfig",
    "NumericError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "backward",
    "build",
    "no_grad",
    "param_count",
]
__version__ = "0.1.0"
