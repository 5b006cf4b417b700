"""Conditional wavelet diffusion for paired 3D volume-to-volume synthesis."""

from .wavelet import dwt3d, idwt3d, pad_to_even, crop_with_record
from .schedule import make_schedule, posterior_params, q_sample
from .diffusion import reverse_step, training_loss, training_step_inputs

__all__ = [
    "dwt3d",
    "idwt3d",
    "pad_to_even",
    "crop_with_record",
    "make_schedule",
    "posterior_params",
    "q_sample",
    "reverse_step",
    "training_loss",
    "training_step_inputs",
]
__version__ = "0.1.0"
