"""Linear-RGB image containers, illuminant-map arithmetic, and angular-error primitives.

Everything in this module is a pure function over numpy arrays wrapped in thin
validated containers. Angles are reported in degrees throughout, matching the
convention of color-constancy error tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Epsilon floor applied to denominators before per-pixel division.
DIVISION_EPSILON = 1e-4


def _require_hwc3(arr: np.ndarray, name: str) -> None:
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must be an HxWx3 array, got shape {arr.shape}")


@dataclass(frozen=True)
class LinearImage:
    """H x W x 3 nonnegative linear-light RGB raster, nominal range [0, 1].

    Minimum-size requirements for the network are enforced at the model level;
    this container only checks shape, finiteness, and nonnegativity.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        _require_hwc3(px, "LinearImage.pixels")
        if not np.all(np.isfinite(px)):
            raise ValueError("LinearImage contains non-finite values")
        if np.any(px < 0):
            raise ValueError("LinearImage contains negative values")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class IlluminantMap:
    """H x W x 3 per-pixel illuminant color (gains). Finite and nonnegative;
    strictly positive wherever produced by a floored division of positive data."""

    gains: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gains)
        _require_hwc3(g, "IlluminantMap.gains")
        if not np.all(np.isfinite(g)):
            raise ValueError("IlluminantMap contains non-finite values")
        if np.any(g < 0):
            raise ValueError("IlluminantMap contains negative values")
        object.__setattr__(self, "gains", g)

    @property
    def height(self) -> int:
        return self.gains.shape[0]

    @property
    def width(self) -> int:
        return self.gains.shape[1]


@dataclass(frozen=True, eq=False)
class ChromaVector:
    """Unit-Euclidean-norm RGB direction with nonnegative components."""

    rgb: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.rgb, dtype=np.float64)
        if v.shape != (3,):
            raise ValueError(f"ChromaVector needs 3 components, got shape {v.shape}")
        if np.any(v < 0):
            raise ValueError("ChromaVector components must be nonnegative")
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"ChromaVector norm {n} deviates from 1 by more than 1e-6")
        object.__setattr__(self, "rgb", v)

    def __eq__(self, other):
        return isinstance(other, ChromaVector) and np.array_equal(self.rgb, other.rgb)

    def __hash__(self):
        return hash(self.rgb.tobytes())


@dataclass(frozen=True)
class PixelMask:
    """H x W booleans; True marks pixels that participate in losses/metrics."""

    included: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.included)
        if m.ndim != 2:
            raise ValueError(f"PixelMask must be 2-D, got shape {m.shape}")
        if m.dtype != np.bool_:
            m = m.astype(bool)
        if not m.any():
            raise ValueError("PixelMask excludes every pixel")
        object.__setattr__(self, "included", m)

    @property
    def height(self) -> int:
        return self.included.shape[0]

    @property
    def width(self) -> int:
        return self.included.shape[1]

    @classmethod
    def full(cls, height: int, width: int) -> "PixelMask":
        return cls(np.ones((height, width), dtype=bool))


@dataclass(frozen=True)
class AngleMap:
    """H x W per-pixel angles in degrees, each in [0, 180]."""

    angles: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.angles)
        if a.ndim != 2:
            raise ValueError(f"AngleMap must be 2-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("AngleMap contains non-finite values")
        if np.any(a < 0) or np.any(a > 180):
            raise ValueError("AngleMap values must lie in [0, 180] degrees")
        object.__setattr__(self, "angles", a)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def estimate_illuminant_map(
    numerator: LinearImage, denominator: LinearImage, epsilon: float = DIVISION_EPSILON
) -> IlluminantMap:
    """Per-pixel, per-channel division with an epsilon floor on the denominator.

    gains[i,j,k] = numerator[i,j,k] / max(denominator[i,j,k], epsilon)
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    _check_same_shape(numerator.pixels, denominator.pixels, "estimate_illuminant_map")
    gains = numerator.pixels / np.maximum(denominator.pixels, epsilon)
    return IlluminantMap(gains)


def render_scene(surface: LinearImage, illum: IlluminantMap) -> LinearImage:
    """Forward image formation: observed = surface * illuminant, per pixel and channel."""
    _check_same_shape(surface.pixels, illum.gains, "render_scene")
    return LinearImage(surface.pixels * illum.gains)


def white_balance(
    observed: LinearImage, illum: IlluminantMap, epsilon: float = DIVISION_EPSILON
) -> LinearImage:
    """Invert render_scene: divide the observed image by the floored illuminant map."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    _check_same_shape(observed.pixels, illum.gains, "white_balance")
    return LinearImage(observed.pixels / np.maximum(illum.gains, epsilon))


def angular_error_map(a: IlluminantMap, b: IlluminantMap) -> AngleMap:
    """Per-pixel angle between two illuminant maps, in degrees.

    Computed as atan2(|a x b|, a . b), which equals arccos of the clamped
    cosine but stays exact for parallel pixels. Zero-norm pixels are rejected
    (the angle is undefined there).
    """
    _check_same_shape(a.gains, b.gains, "angular_error_map")
    na = np.linalg.norm(a.gains, axis=2)
    nb = np.linalg.norm(b.gains, axis=2)
    for name, n in (("first", na), ("second", nb)):
        if np.any(n == 0):
            i, j = np.argwhere(n == 0)[0]
            raise ValueError(f"zero-norm pixel at ({i}, {j}) in {name} map")
    dot = np.sum(a.gains * b.gains, axis=2)
    cross = np.cross(a.gains, b.gains)
    angles = np.degrees(np.arctan2(np.linalg.norm(cross, axis=2), dot))
    return AngleMap(angles)


def chromaticity(v) -> ChromaVector:
    """Normalize a nonnegative RGB triple to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0:
        raise ValueError("cannot take the chromaticity of a zero vector")
    return ChromaVector(v / n)


def masked_mean(values: np.ndarray, mask: PixelMask) -> float:
    """Arithmetic mean of `values` over the mask's included pixels only."""
    values = np.asarray(values)
    _check_same_shape(values, mask.included, "masked_mean")
    return float(values[mask.included].mean())
