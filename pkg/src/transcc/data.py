"""Synthetic multi-illuminant scenes with exact ground truth, plus the on-disk
dataset format.

A sample is a piecewise-smooth reflectance image (seeded Voronoi regions under
a smooth shading field) lit by a mixture of 1-3 Gaussian-weighted illuminants.
The observed input is the per-pixel product of surface and illuminant map, so
ground truth is exact by construction. Edge supervision comes from a Sobel
gradient oracle on the ground-truth image. Tensors are stored as "TCC1" files:
little-endian float32, row-major, self-describing header.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from transcc.imaging import (
    ChromaVector,
    IlluminantMap,
    LinearImage,
    PixelMask,
    chromaticity,
)

NEUTRAL_CHROMA = np.ones(3) / math.sqrt(3.0)

# plausible-illuminant gamut: lights stay within this angle of neutral
MAX_LIGHT_TILT_DEG = 25.0
# distinguishability: pairwise light separation in multi-light scenes
MIN_LIGHT_SEPARATION_DEG = 3.0

DATASET_VERSION = 1
TENSOR_MAGIC = b"TCC1"
_SPLIT_NAMES = ("train", "val", "test")
_TENSOR_FILES = ("input.t", "gt.t", "illum.t", "mask.t", "edge.t")


def _angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    cross = np.cross(a, b)
    return math.degrees(math.atan2(float(np.linalg.norm(cross)), float(np.dot(a, b))))


@dataclass(frozen=True)
class SceneSpec:
    """Illumination layout of one synthetic scene."""

    num_lights: int
    light_chromas: tuple[ChromaVector, ...]
    mixing_centers: tuple[tuple[float, float], ...]
    mixing_bandwidth: float
    surface_seed: int

    def __post_init__(self):
        if not 1 <= self.num_lights <= 3:
            raise ValueError(f"num_lights must be 1, 2, or 3, got {self.num_lights}")
        if len(self.light_chromas) != self.num_lights:
            raise ValueError(
                f"expected {self.num_lights} light chromas, got {len(self.light_chromas)}"
            )
        if len(self.mixing_centers) != self.num_lights:
            raise ValueError(
                f"expected {self.num_lights} mixing centers, got {len(self.mixing_centers)}"
            )
        for cy, cx in self.mixing_centers:
            if not (0.0 <= cy <= 1.0 and 0.0 <= cx <= 1.0):
                raise ValueError(f"mixing center ({cy}, {cx}) outside [0, 1]^2")
        if not (self.mixing_bandwidth > 0 and math.isfinite(self.mixing_bandwidth)):
            raise ValueError(f"mixing_bandwidth must be positive, got {self.mixing_bandwidth}")
        for i in range(self.num_lights):
            for j in range(i + 1, self.num_lights):
                sep = _angle_deg(self.light_chromas[i].rgb, self.light_chromas[j].rgb)
                if sep < MIN_LIGHT_SEPARATION_DEG:
                    raise ValueError(
                        f"lights {i} and {j} are only {sep:.3f} degrees apart "
                        f"(minimum {MIN_LIGHT_SEPARATION_DEG})"
                    )


def sample_light_chroma(rng: np.random.Generator) -> ChromaVector:
    """Draw a unit chromaticity within MAX_LIGHT_TILT_DEG of neutral."""
    for _ in range(1000):
        c = chromaticity(rng.uniform(0.05, 1.0, size=3))
        if _angle_deg(c.rgb, NEUTRAL_CHROMA) <= MAX_LIGHT_TILT_DEG:
            return c
    raise RuntimeError("light chroma rejection sampling failed to converge")


def sample_scene_spec(rng: np.random.Generator, num_lights: int | None = None) -> SceneSpec:
    """Draw a valid SceneSpec; num_lights uniform over {1,2,3} unless given."""
    k = int(rng.integers(1, 4)) if num_lights is None else num_lights
    for _ in range(1000):
        chromas = tuple(sample_light_chroma(rng) for _ in range(k))
        separations = [
            _angle_deg(chromas[i].rgb, chromas[j].rgb) for i in range(k) for j in range(i + 1, k)
        ]
        if all(s >= MIN_LIGHT_SEPARATION_DEG for s in separations):
            return SceneSpec(
                num_lights=k,
                light_chromas=chromas,
                mixing_centers=tuple((float(cy), float(cx)) for cy, cx in rng.uniform(0, 1, (k, 2))),
                mixing_bandwidth=float(rng.uniform(0.2, 0.6)),
                surface_seed=int(rng.integers(0, 2**31 - 1)),
            )
    raise RuntimeError("scene spec rejection sampling failed to converge")


# ---------------------------------------------------------------------------
# surface generation


@dataclass(frozen=True)
class SurfaceParts:
    """Decomposition of a generated surface, for inspection and tests."""

    labels: np.ndarray  # H x W region index
    reflectance: np.ndarray  # regions x 3
    shading: np.ndarray  # H x W in [0.3, 1]
    achromatic_regions: np.ndarray  # indices of equal-RGB regions


def _pixel_grid(height: int, width: int) -> np.ndarray:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gy, gx], axis=-1)


def _shading_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    grid = _pixel_grid(height, width)
    raw = np.zeros((height, width))
    for _ in range(3):
        freq = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(0.5, 1.0)
        raw += amp * np.cos(2.0 * math.pi * (grid @ freq) + phase)
    span = float(raw.max() - raw.min())
    unit = (raw - raw.min()) / span if span > 1e-9 else np.full_like(raw, 0.5)
    return 0.3 + 0.7 * unit


def generate_surface(rng: np.random.Generator, height: int, width: int, return_parts: bool = False):
    """Piecewise-smooth reflectance image: 8-40 Voronoi regions with colors in
    [0.05, 0.95]^3 (a 10-30% fraction forced achromatic), times a smooth
    shading field in [0.3, 1]. Deterministic in rng."""
    if height < 32 or width < 32:
        raise ValueError(f"surface size must be at least 32x32, got {height}x{width}")
    n = int(rng.integers(8, 41))
    seeds = rng.uniform(0.0, 1.0, size=(n, 2))
    reflectance = rng.uniform(0.05, 0.95, size=(n, 3))
    achromatic_count = max(1, int(round(rng.uniform(0.1, 0.3) * n)))
    achromatic = rng.choice(n, size=achromatic_count, replace=False)
    reflectance[achromatic] = reflectance[achromatic].mean(axis=1, keepdims=True)

    grid = _pixel_grid(height, width)
    d2 = ((grid[:, :, None, :] - seeds[None, None, :, :]) ** 2).sum(axis=-1)
    labels = d2.argmin(axis=-1)
    shading = _shading_field(rng, height, width)
    image = LinearImage(reflectance[labels] * shading[:, :, None])
    if return_parts:
        return image, SurfaceParts(labels, reflectance, shading, np.sort(achromatic))
    return image


# ---------------------------------------------------------------------------
# illuminant fields


def mixing_weights(spec: SceneSpec, height: int, width: int) -> np.ndarray:
    """H x W x num_lights Gaussian radial weights, softmax-normalized so they
    sum to exactly 1 at every pixel (stable for any positive bandwidth)."""
    grid = _pixel_grid(height, width)
    centers = np.asarray(spec.mixing_centers)
    d2 = ((grid[:, :, None, :] - centers[None, None, :, :]) ** 2).sum(axis=-1)
    logits = -d2 / (2.0 * spec.mixing_bandwidth**2)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def generate_illuminant_field(
    rng: np.random.Generator, height: int, width: int, spec: SceneSpec
) -> IlluminantMap:
    """Per-pixel illuminant: the mixing-weighted sum of each light's chroma
    scaled by an intensity drawn from [0.5, 1.5]."""
    intensities = rng.uniform(0.5, 1.5, size=spec.num_lights)
    colors = np.stack([c.rgb for c in spec.light_chromas]) * intensities[:, None]
    alpha = mixing_weights(spec, height, width)
    return IlluminantMap(alpha @ colors)


# ---------------------------------------------------------------------------
# edge pseudo-labels


def pseudo_edge_labels(image) -> np.ndarray:
    """Max-normalized 3x3 Sobel gradient magnitude of the luminance channel
    (channel mean), replicate-padded at the borders. Constant image -> zeros."""
    px = image.pixels if isinstance(image, LinearImage) else np.asarray(image)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {px.shape}")
    lum = px.mean(axis=2)
    p = np.pad(lum, 1, mode="edge")
    top, mid, bot = p[:-2, :], p[1:-1, :], p[2:, :]
    gx = (top[:, 2:] + 2.0 * mid[:, 2:] + bot[:, 2:]) - (top[:, :-2] + 2.0 * mid[:, :-2] + bot[:, :-2])
    left, cen, right = p[:, :-2], p[:, 1:-1], p[:, 2:]
    gy = (left[2:, :] + 2.0 * cen[2:, :] + right[2:, :]) - (left[:-2, :] + 2.0 * cen[:-2, :] + right[:-2, :])
    mag = np.hypot(gx, gy)
    peak = float(mag.max())
    if peak == 0.0:
        return np.zeros_like(mag)
    return mag / peak


# ---------------------------------------------------------------------------
# sample assembly


@dataclass
class SampleRecord:
    """One training/evaluation sample with exact ground truth.

    input = gt * illum at mask-included pixels; masked pixels are exactly zero
    in input and gt (the synthetic analogue of blacked-out calibration charts).
    """

    input: LinearImage
    gt: LinearImage
    illum: IlluminantMap
    mask: PixelMask
    edge_pseudo: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h, w = self.input.height, self.input.width
        for name, other in (("gt", self.gt.pixels), ("illum", self.illum.gains)):
            if other.shape != self.input.pixels.shape:
                raise ValueError(f"{name} shape {other.shape} does not match input")
        if self.mask.included.shape != (h, w) or self.edge_pseudo.shape != (h, w):
            raise ValueError("mask/edge shape does not match image")
        if np.any(self.edge_pseudo < 0) or np.any(self.edge_pseudo > 1):
            raise ValueError("edge_pseudo values must lie in [0, 1]")
        included = self.mask.included
        formed = self.gt.pixels * self.illum.gains
        err = np.abs(self.input.pixels - formed)[included]
        if err.size and float(err.max()) > 1e-6:
            raise ValueError(f"input deviates from gt*illum by {float(err.max()):.3e} at unmasked pixels")
        excluded = ~included
        if np.any(self.input.pixels[excluded] != 0) or np.any(self.gt.pixels[excluded] != 0):
            raise ValueError("masked pixels must be exactly zero in input and gt")


def _sample_mask_rectangle(rng: np.random.Generator, height: int, width: int):
    rh = int(rng.integers(max(2, height // 16), max(3, height // 5)))
    rw = int(rng.integers(max(2, width // 16), max(3, width // 5)))
    r0 = int(rng.integers(0, height - rh))
    c0 = int(rng.integers(0, width - rw))
    return r0, r0 + rh, c0, c0 + rw


def make_sample(
    rng: np.random.Generator,
    height: int,
    width: int,
    spec: SceneSpec,
    mask_policy: bool = False,
) -> SampleRecord:
    """Render one sample. The surface comes from spec.surface_seed; the
    illuminant intensities and the optional mask rectangle come from rng.
    Tensors are stored in float32, the on-disk precision."""
    surface = generate_surface(np.random.default_rng(spec.surface_seed), height, width)
    illum64 = generate_illuminant_field(rng, height, width, spec)
    gt = surface.pixels.astype(np.float32)
    illum = illum64.gains.astype(np.float32)
    inp = gt * illum
    mask = np.ones((height, width), dtype=bool)
    if mask_policy:
        r0, r1, c0, c1 = _sample_mask_rectangle(rng, height, width)
        inp[r0:r1, c0:c1] = 0.0
        gt[r0:r1, c0:c1] = 0.0
        mask[r0:r1, c0:c1] = False
    edge = pseudo_edge_labels(gt).astype(np.float32)
    return SampleRecord(
        input=LinearImage(inp),
        gt=LinearImage(gt),
        illum=IlluminantMap(illum),
        mask=PixelMask(mask),
        edge_pseudo=edge,
        meta={"num_lights": spec.num_lights, "seed": spec.surface_seed},
    )


# ---------------------------------------------------------------------------
# splits and manifest


def split_dataset(ids, ratios, rng: np.random.Generator) -> dict[str, list[str]]:
    """Seeded shuffle then contiguous train/val/test partition; sizes are floor
    allocations of the ratios with the remainder going to train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError(f"expected 3 ratios (train, val, test), got {len(ratios)}")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got sum {sum(ratios)}")
    ids = list(ids)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    counts = [int(len(ids) * r) for r in ratios]
    counts[0] += len(ids) - sum(counts)
    out = {}
    start = 0
    for name, c in zip(_SPLIT_NAMES, counts):
        out[name] = shuffled[start : start + c]
        start += c
    return out


@dataclass
class DatasetManifest:
    sample_count: int
    height: int
    width: int
    generation_seed: int
    splits: dict[str, list[str]]
    version: int = DATASET_VERSION

    def __post_init__(self):
        if set(self.splits) != set(_SPLIT_NAMES):
            raise ValueError(f"splits must name exactly {_SPLIT_NAMES}, got {sorted(self.splits)}")
        all_ids = [i for name in _SPLIT_NAMES for i in self.splits[name]]
        if len(all_ids) != len(set(all_ids)):
            raise ValueError("split id lists overlap")
        if len(all_ids) != self.sample_count:
            raise ValueError(
                f"splits cover {len(all_ids)} ids but sample_count is {self.sample_count}"
            )

    def ordered_ids(self) -> list[str]:
        return [i for name in _SPLIT_NAMES for i in self.splits[name]]

    def split_of(self, sample_id: str) -> str:
        for name in _SPLIT_NAMES:
            if sample_id in self.splits[name]:
                return name
        raise KeyError(sample_id)


# ---------------------------------------------------------------------------
# tensor files


def write_tensor(path, arr: np.ndarray) -> None:
    """Write a TCC1 tensor file: magic, dtype code (0 = float32), rank byte,
    little-endian uint32 dims, then row-major little-endian float32 data."""
    path = Path(path)
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.float32)
    data = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<BB", 0, data.ndim)
    dims = np.asarray(data.shape, dtype="<u4").tobytes()
    path.write_bytes(header + dims + data.tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 6 or blob[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a TCC1 tensor file")
    code, rank = blob[4], blob[5]
    if code != 0:
        raise ValueError(f"{path}: unknown dtype code {code}")
    header_len = 6 + 4 * rank
    if len(blob) < header_len:
        raise ValueError(f"{path}: truncated tensor header")
    dims = np.frombuffer(blob, dtype="<u4", count=rank, offset=6)
    expected = header_len + 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise ValueError(
            f"{path}: truncated or oversized tensor file (expected {expected} bytes, found {len(blob)})"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=header_len)
    return data.reshape(tuple(int(d) for d in dims)).copy()


# ---------------------------------------------------------------------------
# dataset I/O


def write_dataset(records: list[SampleRecord], manifest: DatasetManifest, root) -> None:
    root = Path(root)
    ids = [r.meta.get("id") for r in records]
    if sorted(ids) != sorted(manifest.ordered_ids()):
        raise ValueError("record ids do not match the manifest's split lists")
    root.mkdir(parents=True, exist_ok=True)
    for record in records:
        sample_dir = root / record.meta["id"]
        sample_dir.mkdir(exist_ok=True)
        write_tensor(sample_dir / "input.t", record.input.pixels)
        write_tensor(sample_dir / "gt.t", record.gt.pixels)
        write_tensor(sample_dir / "illum.t", record.illum.gains)
        write_tensor(sample_dir / "mask.t", record.mask.included)
        write_tensor(sample_dir / "edge.t", record.edge_pseudo)
        (sample_dir / "meta").write_text(json.dumps(record.meta, sort_keys=True, indent=1) + "\n")
    doc = {
        "version": manifest.version,
        "sample_count": manifest.sample_count,
        "height": manifest.height,
        "width": manifest.width,
        "generation_seed": manifest.generation_seed,
        "splits": {name: list(manifest.splits[name]) for name in _SPLIT_NAMES},
    }
    (root / "manifest").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest"
    doc = json.loads(path.read_text())
    if doc.get("version") != DATASET_VERSION:
        raise ValueError(
            f"{path}: dataset format version {doc.get('version')} is not the supported {DATASET_VERSION}"
        )
    return DatasetManifest(
        sample_count=doc["sample_count"],
        height=doc["height"],
        width=doc["width"],
        generation_seed=doc["generation_seed"],
        splits={name: list(doc["splits"][name]) for name in _SPLIT_NAMES},
        version=doc["version"],
    )


def read_sample(root, sample_id: str) -> SampleRecord:
    sample_dir = Path(root) / sample_id
    tensors = {name: read_tensor(sample_dir / name) for name in _TENSOR_FILES}
    meta = json.loads((sample_dir / "meta").read_text())
    return SampleRecord(
        input=LinearImage(tensors["input.t"]),
        gt=LinearImage(tensors["gt.t"]),
        illum=IlluminantMap(tensors["illum.t"]),
        mask=PixelMask(tensors["mask.t"] != 0),
        edge_pseudo=tensors["edge.t"],
        meta=meta,
    )


def read_dataset(root) -> tuple[list[SampleRecord], DatasetManifest]:
    """Load every sample in manifest order (train, then val, then test)."""
    manifest = read_manifest(root)
    records = [read_sample(root, sample_id) for sample_id in manifest.ordered_ids()]
    return records, manifest


def read_split(root, split: str) -> list[SampleRecord]:
    manifest = read_manifest(root)
    if split not in manifest.splits:
        raise ValueError(f"unknown split {split!r}; expected one of {_SPLIT_NAMES}")
    return [read_sample(root, sample_id) for sample_id in manifest.splits[split]]


# ---------------------------------------------------------------------------
# end-to-end generation


def generate_dataset(
    seed: int,
    count: int,
    height: int,
    width: int,
    ratios=(0.7, 0.2, 0.1),
    mask_fraction: float = 0.25,
) -> tuple[list[SampleRecord], DatasetManifest]:
    """Generate `count` samples deterministically from `seed`.

    Each sample uses its own child generator seeded by (seed, index), so the
    dataset is reproducible sample-by-sample and generation order is free.
    Split membership comes from a separate (seed, count) stream.
    """
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    if not 0.0 <= mask_fraction <= 1.0:
        raise ValueError(f"mask_fraction must lie in [0, 1], got {mask_fraction}")
    ids = [f"s{idx:05d}" for idx in range(count)]
    splits = split_dataset(ids, ratios, np.random.default_rng([seed, count]))
    manifest = DatasetManifest(
        sample_count=count, height=height, width=width, generation_seed=seed, splits=splits
    )
    split_lookup = {i: name for name in _SPLIT_NAMES for i in splits[name]}
    records = []
    for idx, sample_id in enumerate(ids):
        rng = np.random.default_rng([seed, idx])
        spec = sample_scene_spec(rng)
        masked = bool(rng.random() < mask_fraction)
        record = make_sample(rng, height, width, spec, mask_policy=masked)
        record.meta.update({"id": sample_id, "split": split_lookup[sample_id]})
        records.append(record)
    return records, manifest
