"""Text-conditioned Swin-transformer U-Net diffusion on a small numpy autodiff engine."""

from .diffusion import GuidanceConfig, NoiseSchedule, sample_loop
from .rng import Rng
from .search import StageSchedule, build_staged_schedule, greedy_substep_search, scan_scalar
from .tensor import Tensor, no_grad
from .unet import ModelConfig, TecSwinUNet

__version__ = "0.1.0"
