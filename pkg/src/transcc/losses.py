"""The six training-loss terms, their sampling procedures, and the weighted total.

All loss functions operate on torch tensors (images channel-last, H x W x 3;
masks H x W bool) so gradients flow to whichever inputs require them. Angles
inside losses are computed as atan2(|a x b|, a.b), which is mathematically
identical to arccos of the clamped cosine but keeps gradients finite near
parallel vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

# Stabilizer of the achromatic ratio; same magnitude as the division floor.
ACHROMATIC_SIGMA = 1e-4
DIVISION_EPSILON = 1e-4
RAD2DEG = 180.0 / math.pi

# Floor on the squared cross-product norm; keeps sqrt/atan2 gradients finite
# at exactly-parallel pixels without visibly biasing any angle.
_CROSS_SQ_FLOOR = 1e-40


@dataclass(frozen=True)
class LossWeights:
    """Weights (lambda 1..6) of the achromatic, edge, L1, MAE, surface-similarity,
    and contrastive terms. Defaults: everything 1 except achromatic = 0.1."""

    achromatic: float = 0.1
    edge: float = 1.0
    l1: float = 1.0
    mae: float = 1.0
    surf_sim: float = 1.0
    contrastive: float = 1.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"loss weight {name} must be a finite nonnegative real, got {value}")

    def as_dict(self) -> dict[str, float]:
        return {
            "achromatic": self.achromatic,
            "edge": self.edge,
            "l1": self.l1,
            "mae": self.mae,
            "surf_sim": self.surf_sim,
            "contrastive": self.contrastive,
        }


@dataclass(frozen=True)
class LossReport:
    """The six loss terms and their weighted total for one step."""

    achromatic: float
    edge: float
    l1: float
    mae: float
    surf_sim: float
    contrastive: float
    total: float

    TERM_NAMES = ("achromatic", "edge", "l1", "mae", "surf_sim", "contrastive")

    def terms(self) -> tuple[float, ...]:
        return (self.achromatic, self.edge, self.l1, self.mae, self.surf_sim, self.contrastive)


@dataclass(frozen=True)
class PatchSpec:
    """Odd-sided square window centered at (center_row, center_col)."""

    center_row: int
    center_col: int
    side: int

    def __post_init__(self):
        if self.side < 1 or self.side % 2 == 0:
            raise ValueError(f"patch side must be a positive odd count, got {self.side}")


@dataclass
class ContrastiveBatch:
    """Anchor/positive/negative feature vectors plus the temperature.

    anchors: M x C (drawn from the output-image feature map)
    positives: M x 2 x C (input and ground-truth maps at the anchor location)
    negatives: M x N x C (distinct locations on the input and ground-truth maps)

    The location arrays are sampler metadata used by contract tests; they do not
    enter the loss.
    """

    anchors: torch.Tensor
    positives: torch.Tensor
    negatives: torch.Tensor
    temperature: float
    anchor_locations: np.ndarray | None = None
    negative_locations: np.ndarray | None = None
    negative_sources: np.ndarray | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.anchors.ndim != 2:
            raise ValueError("anchors must be an M x C tensor")
        m, c = self.anchors.shape
        if self.positives.shape != (m, 2, c):
            raise ValueError(f"positives must have shape ({m}, 2, {c}), got {tuple(self.positives.shape)}")
        if self.negatives.ndim != 3 or self.negatives.shape[0] != m or self.negatives.shape[2] != c:
            raise ValueError(f"negatives must have shape ({m}, N, {c}), got {tuple(self.negatives.shape)}")
        if self.negatives.shape[1] == 0:
            raise ValueError("at least one negative per anchor is required")


def _as_tensor(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not torch.is_floating_point(t):
        raise ValueError(f"{name} must be a floating tensor")
    return t


def _as_mask(mask, shape, name: str = "mask") -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask.included) if hasattr(mask, "included") else mask)
    m = m.bool()
    if tuple(m.shape) != tuple(shape):
        raise ValueError(f"{name} shape {tuple(m.shape)} does not match {tuple(shape)}")
    if not bool(m.any()):
        raise ValueError(f"{name} excludes every pixel")
    return m


def pixel_angles(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Angles (radians) between corresponding ...x3 vectors, gradient-safe.

    Zero-norm vectors are treated as colorless: their angle is 0 and no
    gradient flows through them.
    """
    a, b = torch.broadcast_tensors(a, b)
    dot = (a * b).sum(dim=-1)
    # plain elementwise cross product: unlike torch.linalg.cross it does not
    # use fused multiply-adds, so a x a cancels to exactly zero
    c0 = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    c1 = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    c2 = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    cross_sq = c0 * c0 + c1 * c1 + c2 * c2
    degenerate = ((a.detach() * a.detach()).sum(dim=-1) == 0) | (
        (b.detach() * b.detach()).sum(dim=-1) == 0
    )
    # Exactly (anti)parallel pixels get their angle (0 or pi) emitted as a
    # constant so a vector's angle to itself is exactly zero; the floor only
    # protects the not-quite-parallel neighborhood.
    parallel = (cross_sq.detach() == 0) & ~degenerate
    safe_dot = torch.where(degenerate | parallel, torch.ones_like(dot), dot)
    safe_cross_sq = torch.where(
        parallel, torch.ones_like(cross_sq), cross_sq.clamp_min(_CROSS_SQ_FLOOR)
    )
    angles = torch.atan2(torch.sqrt(safe_cross_sq), safe_dot)
    exact = torch.where(dot.detach() < 0, torch.full_like(angles, math.pi), torch.zeros_like(angles))
    angles = torch.where(parallel, exact, angles)
    return torch.where(degenerate, torch.zeros_like(angles), angles)


def achromatic_loss(gt, weights, mask) -> torch.Tensor:
    """Achromaticity of the weight-map-weighted ground-truth color.

    u = sum over included pixels of gt_ij * w_ij; c = u / |u|;
    loss = 1 - (c_r + c_g + c_b) / (sigma + sqrt(3 * (c_r^2 + c_g^2 + c_b^2))).
    Returns the sentinel value 1 when |u| collapses below 1e-12.
    """
    gt = _as_tensor(gt, "gt")
    weights = _as_tensor(weights, "weights")
    if gt.ndim != 3 or gt.shape[2] != 3:
        raise ValueError(f"gt must be HxWx3, got {tuple(gt.shape)}")
    if tuple(weights.shape) != tuple(gt.shape[:2]):
        raise ValueError(f"weights shape {tuple(weights.shape)} does not match image {tuple(gt.shape[:2])}")
    w_detached = weights.detach()
    if bool((w_detached < 0).any()) or bool((w_detached > 1).any()):
        raise ValueError("weights must lie in [0, 1]")
    m = _as_mask(mask, gt.shape[:2])
    w = torch.where(m, weights, torch.zeros_like(weights))
    u = (gt * w.unsqueeze(-1)).sum(dim=(0, 1))
    norm = torch.sqrt((u * u).sum())
    if float(norm.detach()) < 1e-12:
        return torch.ones((), dtype=gt.dtype)
    c = u / norm
    # The sqrt(3 * sum(c^2)) factor equals sqrt(3) for unit c but is evaluated
    # as written so the gradient w.r.t. the weights flows through it.
    return 1.0 - c.sum() / (ACHROMATIC_SIGMA + torch.sqrt(3.0 * (c * c).sum()))


def edge_loss(pred_edges, pseudo_edges) -> torch.Tensor:
    """Mean squared error between predicted and pseudo-label edge maps."""
    pred = _as_tensor(pred_edges, "pred_edges")
    pseudo = _as_tensor(pseudo_edges, "pseudo_edges")
    if pred.shape != pseudo.shape:
        raise ValueError(f"edge map shape mismatch {tuple(pred.shape)} vs {tuple(pseudo.shape)}")
    return ((pred - pseudo) ** 2).mean()


def l1_loss(pred, gt, mask) -> torch.Tensor:
    """Mean absolute error over mask-included pixels and channels."""
    pred = _as_tensor(pred, "pred")
    gt = _as_tensor(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"image shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    m = _as_mask(mask, pred.shape[:2])
    return (pred - gt).abs()[m].mean()


def mae_loss(input_img, pred, gt, mask, epsilon: float = DIVISION_EPSILON) -> torch.Tensor:
    """Mean angular error, in degrees, between the illuminant maps implied by
    the prediction and by the ground truth.

    Both maps come from dividing the input by the (floored) image; the mean runs
    over mask-included pixels. Zero-gain pixels contribute a zero angle.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    inp = _as_tensor(input_img, "input")
    pred = _as_tensor(pred, "pred")
    gt = _as_tensor(gt, "gt")
    if not (inp.shape == pred.shape == gt.shape):
        raise ValueError(
            f"shape mismatch: input {tuple(inp.shape)}, pred {tuple(pred.shape)}, gt {tuple(gt.shape)}"
        )
    m = _as_mask(mask, inp.shape[:2])
    est = inp / pred.clamp_min(epsilon)
    gtm = inp / gt.clamp_min(epsilon)
    angles = pixel_angles(est, gtm) * RAD2DEG
    return angles[m].mean()


def similarity_map(image, patch: PatchSpec) -> torch.Tensor:
    """k x k map of color angles (radians) between each window pixel and the
    window's center (anchor) pixel. Zero-norm pixels map to angle 0."""
    img = _as_tensor(image, "image")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got {tuple(img.shape)}")
    half = patch.side // 2
    r, c = patch.center_row, patch.center_col
    if r - half < 0 or c - half < 0 or r + half >= img.shape[0] or c + half >= img.shape[1]:
        raise ValueError(f"patch {patch} does not lie fully inside a {img.shape[0]}x{img.shape[1]} image")
    anchor = img[r, c, :]
    if float((anchor.detach() ** 2).sum()) == 0:
        raise ValueError(f"zero-norm anchor pixel at ({r}, {c})")
    window = img[r - half : r + half + 1, c - half : c + half + 1, :]
    return pixel_angles(window, anchor)


def patch_similarity_loss(pred, gt, patches, mask) -> torch.Tensor:
    """Mean absolute difference between prediction and ground-truth similarity
    maps, averaged over patches.

    A patch is skipped when none of its pixels are mask-included or when its
    anchor pixel is mask-excluded (a masked anchor holds a zeroed, meaningless
    color). Raises if the patch list is empty or every patch was skipped.
    """
    if not patches:
        raise ValueError("patch list is empty")
    pred_t = _as_tensor(pred, "pred")
    gt_t = _as_tensor(gt, "gt")
    if pred_t.shape != gt_t.shape:
        raise ValueError(f"image shape mismatch {tuple(pred_t.shape)} vs {tuple(gt_t.shape)}")
    m = _as_mask(mask, pred_t.shape[:2])
    per_patch = []
    for patch in patches:
        half = patch.side // 2
        r, c = patch.center_row, patch.center_col
        if not bool(m[r, c]):
            continue
        window_mask = m[r - half : r + half + 1, c - half : c + half + 1]
        if not bool(window_mask.any()):
            continue
        diff = (similarity_map(pred_t, patch) - similarity_map(gt_t, patch)).abs()
        per_patch.append(diff[window_mask].mean())
    if not per_patch:
        raise ValueError("every patch was skipped by the mask")
    return torch.stack(per_patch).mean()


def default_patch_side(height: int, width: int) -> int:
    """Patch side covering ~1/16 of the image area: min(H, W)/4 snapped down
    to the nearest odd count (63 for 256x256)."""
    s = min(height, width) // 4
    if s % 2 == 0:
        s -= 1
    return max(s, 1)


def sample_patches(height: int, width: int, n: int, side: int, rng: np.random.Generator) -> list[PatchSpec]:
    """Draw n patch centers uniformly over positions whose window stays inside
    the image. Deterministic for a given generator state."""
    if n < 1:
        raise ValueError(f"need at least one patch, got n={n}")
    if side < 1 or side % 2 == 0:
        raise ValueError(f"patch side must be a positive odd count, got {side}")
    if side > min(height, width):
        raise ValueError(f"patch side {side} exceeds image extent {height}x{width}")
    half = side // 2
    rows = rng.integers(half, height - half, size=n)
    cols = rng.integers(half, width - half, size=n)
    return [PatchSpec(int(r), int(c), side) for r, c in zip(rows, cols)]


def contrastive_dce_loss(batch: ContrastiveBatch) -> torch.Tensor:
    """Decoupled-InfoNCE loss, mean over anchors.

    Per anchor: -log( sum_i exp(v.v+_i / tau) / sum_j exp(v.v-_j / tau) ), with
    negatives only in the denominator, so the value may be negative. Similarity
    lists are sorted before the log-sum-exp so the result is bitwise invariant
    to their ordering.
    """
    tau = batch.temperature
    pos_sim = (batch.anchors.unsqueeze(1) * batch.positives).sum(dim=-1) / tau
    neg_sim = (batch.anchors.unsqueeze(1) * batch.negatives).sum(dim=-1) / tau
    pos_lse = torch.logsumexp(torch.sort(pos_sim, dim=1).values, dim=1)
    neg_lse = torch.logsumexp(torch.sort(neg_sim, dim=1).values, dim=1)
    return -(pos_lse - neg_lse).mean()


def sample_contrastive(
    z_i: torch.Tensor,
    z_o: torch.Tensor,
    z_g: torch.Tensor,
    anchors_per_image: int,
    negatives_per_anchor: int,
    tau: float,
    rng: np.random.Generator,
) -> ContrastiveBatch:
    """Build a contrastive batch from three C x h x w feature maps.

    Anchors are drawn without replacement from z_o. Positives are z_i and z_g at
    the anchor location. Negatives are split as evenly as possible between z_i
    and z_g, at locations sampled uniformly (without replacement within each
    map) excluding the anchor's location.
    """
    if z_i.shape != z_o.shape or z_i.shape != z_g.shape:
        raise ValueError(
            f"feature map shapes differ: {tuple(z_i.shape)}, {tuple(z_o.shape)}, {tuple(z_g.shape)}"
        )
    if z_i.ndim != 3:
        raise ValueError(f"feature maps must be C x h x w, got {tuple(z_i.shape)}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    channels, h, w = z_i.shape
    hw = h * w
    m, n = anchors_per_image, negatives_per_anchor
    if not 1 <= m <= hw:
        raise ValueError(f"anchors_per_image must lie in [1, {hw}], got {m}")
    if not 1 <= n <= 2 * (hw - 1):
        raise ValueError(f"negatives_per_anchor must lie in [1, {2 * (hw - 1)}], got {n}")

    flat_i = z_i.reshape(channels, hw).T
    flat_o = z_o.reshape(channels, hw).T
    flat_g = z_g.reshape(channels, hw).T

    anchor_locs = rng.choice(hw, size=m, replace=False)
    n_from_i = n // 2
    n_from_g = n - n_from_i
    neg_locs = np.empty((m, n), dtype=np.int64)
    neg_sources = np.empty((m, n), dtype=np.int64)
    for k, loc in enumerate(anchor_locs):
        # draw from [0, hw-1) and shift past the anchor location
        raw_i = rng.choice(hw - 1, size=n_from_i, replace=False)
        raw_g = rng.choice(hw - 1, size=n_from_g, replace=False)
        neg_locs[k, :n_from_i] = raw_i + (raw_i >= loc)
        neg_locs[k, n_from_i:] = raw_g + (raw_g >= loc)
        neg_sources[k, :n_from_i] = 0
        neg_sources[k, n_from_i:] = 1

    anchors = flat_o[torch.as_tensor(anchor_locs)]
    positives = torch.stack(
        [flat_i[torch.as_tensor(anchor_locs)], flat_g[torch.as_tensor(anchor_locs)]], dim=1
    )
    locs_t = torch.as_tensor(neg_locs)
    neg_i = flat_i[locs_t.reshape(-1)].reshape(m, n, channels)
    neg_g = flat_g[locs_t.reshape(-1)].reshape(m, n, channels)
    negatives = torch.where(torch.as_tensor(neg_sources == 0).unsqueeze(-1), neg_i, neg_g)

    return ContrastiveBatch(
        anchors=anchors,
        positives=positives,
        negatives=negatives,
        temperature=tau,
        anchor_locations=anchor_locs,
        negative_locations=neg_locs,
        negative_sources=neg_sources,
    )


def total_loss(achromatic, edge, l1, mae, surf_sim, contrastive, weights: LossWeights) -> LossReport:
    """Combine the six terms into the weighted total and a per-term report."""
    values = {}
    for name, term in (
        ("achromatic", achromatic),
        ("edge", edge),
        ("l1", l1),
        ("mae", mae),
        ("surf_sim", surf_sim),
        ("contrastive", contrastive),
    ):
        v = float(term)
        if not math.isfinite(v):
            raise ValueError(f"loss term '{name}' is not finite: {v}")
        values[name] = v
    w = weights.as_dict()
    total = sum(w[name] * values[name] for name in LossReport.TERM_NAMES)
    return LossReport(**values, total=total)
