"""FC2N super-resolution: weighted channel concatenation networks on a NumPy autograd engine."""

from fc2n.autograd import Parameter, Tape, Tensor, precision
from fc2n.model import ModelConfig, build_model, compute_multiadds, count_params, model_forward
from fc2n.optim import AdamHyper, adam_step

__all__ = [
    "AdamHyper",
    "ModelConfig",
    "Parameter",
    "Tape",
    "Tensor",
    "adam_step",
    "build_model",
    "compute_multiadds",
    "count_params",
    "model_forward",
    "precision",
]
__version__ = "0.1.0"
