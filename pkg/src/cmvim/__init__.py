"""Contrastive masked Vision-Mamba autoencoder for paired 3D volumes, on numpy."""
__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig, load_config, preset  # noqa: E402
from .model import CMViM  # noqa: E402

__all__ = ["CMViM", "ModelConfig", "TrainConfig", "load_config", "preset", "__version__"]
