"""Deformable generator: separate appearance and geometry latents composed
through a differentiable warp, trained by alternating back-propagation."""

__version__ = "0.1.0"

from .generators import (  # noqa: F401
    ArchitectureConfig,
    LatentPair,
    ModelParams,
    init_params,
    model_forward,
    sample_prior,
)
from .inference import ChainStore, LangevinConfig, alternating_inference  # noqa: F401
from .training import TrainConfig, train  # noqa: F401
