"""Transmission-guided single-image dehazing built on a small numpy autograd core."""

from .errors import HazeError
from .metrics import dcp_dehaze, ssim
from .physics import HazeParams, depth_to_transmission, invert_closed_form, synthesize_hazy
from .tensor import Tensor, backward, gradcheck, no_grad

__version__ = "0.1.0"

__all__ = [
    "HazeError",
    "HazeParams",
    "Tensor",
    "backward",
    "dcp_dehaze",
    "depth_to_transmission",
    "gradcheck",
    "invert_closed_form",
    "no_grad",
    "ssim",
    "synthesize_hazy",
]
