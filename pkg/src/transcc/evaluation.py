"""Evaluation protocols: per-image angular error, aggregate statistics, the
per-light-count breakdown, and the single-illuminant reduction.

image_mae re-derives the angular error in numpy, independently of the torch
loss implementation; the two are cross-checked in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from transcc.imaging import ChromaVector, DIVISION_EPSILON, LinearImage, PixelMask, chromaticity


@dataclass(frozen=True)
class ErrorStats:
    """Location statistics of a set of per-image angular errors (degrees)."""

    mean: float
    median: float
    trimean: float
    q1: float
    q3: float
    best25: float
    worst25: float
    count: int

    def __post_init__(self):
        values = (self.mean, self.median, self.trimean, self.q1, self.q3, self.best25, self.worst25)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("ErrorStats fields must be finite")
        if self.count < 1:
            raise ValueError(f"count must be positive, got {self.count}")
        tol = 1e-9
        if not (self.q1 <= self.median + tol and self.median <= self.q3 + tol):
            raise ValueError(f"quartiles out of order: {self.q1}, {self.median}, {self.q3}")
        if not (self.best25 <= self.mean + tol and self.mean <= self.worst25 + tol):
            raise ValueError(
                f"tail means out of order: best25 {self.best25}, mean {self.mean}, worst25 {self.worst25}"
            )


def aggregate(errors) -> ErrorStats:
    """Mean, interpolated quartiles, trimean (Q1+2*median+Q3)/4, and the means
    of the lowest/highest ceil(n/4) errors."""
    arr = np.asarray(list(errors), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty error list")
    if not np.all(np.isfinite(arr)):
        raise ValueError("error list contains non-finite values")
    # every statistic is computed from the sorted array so the result is
    # bitwise invariant to the input order
    ordered = np.sort(arr)
    q1, median, q3 = np.quantile(ordered, [0.25, 0.5, 0.75])
    k = math.ceil(arr.size / 4)
    return ErrorStats(
        mean=float(ordered.mean()),
        median=float(median),
        trimean=float((q1 + 2.0 * median + q3) / 4.0),
        q1=float(q1),
        q3=float(q3),
        best25=float(ordered[:k].mean()),
        worst25=float(ordered[-k:].mean()),
        count=int(arr.size),
    )


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, LinearImage) else np.asarray(image)


def _included(mask, shape) -> np.ndarray:
    m = mask.included if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match image {shape}")
    if not m.any():
        raise ValueError("mask excludes every pixel")
    return m


def image_mae(input_img, pred, gt, mask, epsilon: float = DIVISION_EPSILON) -> float:
    """Mean angular error (degrees) between the illuminant maps implied by the
    prediction and the ground truth, over mask-included pixels.

    Same definition as the training loss, evaluated without gradients.
    """
    inp = _pixels(input_img).astype(np.float64)
    pr = _pixels(pred).astype(np.float64)
    gtp = _pixels(gt).astype(np.float64)
    if not (inp.shape == pr.shape == gtp.shape) or inp.ndim != 3 or inp.shape[2] != 3:
        raise ValueError(f"shape mismatch: {inp.shape}, {pr.shape}, {gtp.shape}")
    m = _included(mask, inp.shape[:2])
    est = inp / np.maximum(pr, epsilon)
    gtm = inp / np.maximum(gtp, epsilon)
    dot = (est * gtm).sum(axis=2)
    cross = np.cross(est, gtm)
    angles = np.degrees(np.arctan2(np.linalg.norm(cross, axis=2), dot))
    # zero-gain pixels (black input) carry no chroma information: angle 0
    zero = (np.linalg.norm(est, axis=2) == 0) | (np.linalg.norm(gtm, axis=2) == 0)
    angles = np.where(zero, 0.0, angles)
    return float(angles[m].mean())


def single_illuminant_estimate(
    input_img,
    pred,
    mask,
    brightness_fraction: float = 0.8,
    epsilon: float = DIVISION_EPSILON,
) -> ChromaVector:
    """Scene-level illuminant chromaticity: average the unit-normalized
    per-pixel illuminant estimates over the brightest fraction of unmasked
    pixels (brightness = mean of the input's RGB channels)."""
    if not 0.0 < brightness_fraction <= 1.0:
        raise ValueError(f"brightness_fraction must lie in (0, 1], got {brightness_fraction}")
    inp = _pixels(input_img).astype(np.float64)
    pr = _pixels(pred).astype(np.float64)
    if inp.shape != pr.shape or inp.ndim != 3 or inp.shape[2] != 3:
        raise ValueError(f"shape mismatch: {inp.shape} vs {pr.shape}")
    m = _included(mask, inp.shape[:2])
    flat_inp = inp[m]
    flat_pr = pr[m]
    brightness = flat_inp.mean(axis=1)
    k = math.ceil(brightness_fraction * brightness.size)
    order = np.argsort(-brightness, kind="stable")
    selected = order[:k]
    gains = flat_inp[selected] / np.maximum(flat_pr[selected], epsilon)
    norms = np.linalg.norm(gains, axis=1)
    usable = norms > 0
    if int(usable.sum()) < 10:
        raise ValueError(
            f"only {int(usable.sum())} selectable pixels; at least 10 are required"
        )
    units = gains[usable] / norms[usable, None]
    return chromaticity(units.mean(axis=0))


@dataclass(frozen=True)
class PerLightBreakdown:
    """ErrorStats per light count K in {1, 2, 3} (absent counts omitted)."""

    per_light: dict[int, ErrorStats]

    def total_count(self) -> int:
        return sum(stats.count for stats in self.per_light.values())


@dataclass
class EvaluationResult:
    overall: ErrorStats
    breakdown: PerLightBreakdown
    table: list[dict] = field(default_factory=list)  # rows: id, num_lights, mae
    failures: int = 0


def evaluate_dataset(predictor, records) -> EvaluationResult:
    """Run `predictor` (record -> predicted HxWx3 white-balanced image) over
    the records and aggregate masked angular errors overall and per light
    count. Per-image failures are counted and skipped, not fatal."""
    records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    table: list[dict] = []
    failures = 0
    for record in records:
        try:
            pred = predictor(record)
            mae = image_mae(record.input, pred, record.gt, record.mask)
        except Exception as exc:  # evaluation continues; failure is reported
            failures += 1
            table.append(
                {
                    "id": record.meta.get("id", "?"),
                    "num_lights": record.meta.get("num_lights", 0),
                    "mae": None,
                    "error": str(exc),
                }
            )
            continue
        table.append(
            {
                "id": record.meta.get("id", "?"),
                "num_lights": int(record.meta.get("num_lights", 0)),
                "mae": mae,
            }
        )
    scored = [row for row in table if row["mae"] is not None]
    if not scored:
        raise ValueError(f"every record failed to evaluate ({failures} failures)")
    overall = aggregate([row["mae"] for row in scored])
    by_k: dict[int, list[float]] = {}
    for row in scored:
        by_k.setdefault(row["num_lights"], []).append(row["mae"])
    breakdown = PerLightBreakdown({k: aggregate(v) for k, v in sorted(by_k.items())})
    return EvaluationResult(overall=overall, breakdown=breakdown, table=table, failures=failures)


def identity_predictor(record) -> np.ndarray:
    """Baseline that predicts output = input (no correction). Its error is the
    dataset's mean illuminant-vs-neutral angle."""
    return record.input.pixels
