"""HC-Mamba segmentation on a small numpy autodiff engine."""
from .autodiff import Tensor, backward, grad_check, no_grad
from .config import RunConfig, load_config
from .model import HCMamba, ModelConfig, count_parameters, forward, init_params

__all__ = ["HCMamba", "ModelConfig", "RunConfig", "Tensor", "backward", "count_parameters",
           "forward", "grad_check", "init_params", "load_config", "no_grad"]
__version__ = "0.1.0"
