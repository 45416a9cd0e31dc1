"""Multi-illuminant color constancy: synthesis, multi-task transformer network,
six-term training objective, and angular-error evaluation."""

from transcc.imaging import (
    AngleMap,
    ChromaVector,
    IlluminantMap,
    LinearImage,
    PixelMask,
    angular_error_map,
    chromaticity,
    estimate_illuminant_map,
    masked_mean,
    render_scene,
    white_balance,
)

__all__ = [
    "AngleMap",
    "ChromaVector",
    "IlluminantMap",
    "LinearImage",
    "PixelMask",
    "angular_error_map",
    "chromaticity",
    "estimate_illuminant_map",
    "masked_mean",
    "render_scene",
    "white_balance",
]

__version__ = "0.1.0"
