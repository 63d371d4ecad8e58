"""Object-centric 3D embeddings.

Converts per-object multi-view RGB-D observations into fixed-size latent
embeddings, decodes them back into 3D Gaussian splat models for rendering
and mesh extraction, and reuses the same embeddings for coarse visual
localization and scene alignment.
"""

__version__ = "0.1.0"

from .errors import ConfigError, FormatError, InvalidInputError, TrainingDiverged

__all__ = [
    "ConfigError",
    "FormatError",
    "InvalidInputError",
    "TrainingDiverged",
    "__version__",
]
