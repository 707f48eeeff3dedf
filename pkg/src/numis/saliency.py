"""Hierarchical-perturbation saliency for black-box scorers.

Rectangular regions are replaced by their mean grey value; the drop in the
model's score is attributed to the region's pixels. Regions whose drop is
among the strongest at one level are split 2x2 and re-probed at the next,
until ``max_depth`` levels have run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from matplotlib import colormaps
from PIL import Image


@dataclass(frozen=True)
class HipeConfig:
    max_depth: int = 4
    initial_grid: int = 4
    overlap: float = 0.5
    refinement_threshold: float = 0.5

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.initial_grid < 2:
            raise ValueError("initial_grid must be >= 2")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")
        if not 0 <= self.refinement_threshold <= 1:
            raise ValueError("refinement_threshold is a quantile in [0, 1]")

    def call_bound(self) -> int:
        return self.initial_grid**2 * sum(4**k for k in range(self.max_depth)) + 1


@dataclass(frozen=True)
class Rect:
    """Half-open rectangle [y0, y1) x [x0, x1) in float pixel units."""

    y0: float
    x0: float
    y1: float
    x1: float

    def children(self) -> list["Rect"]:
        ym = (self.y0 + self.y1) / 2
        xm = (self.x0 + self.x1) / 2
        return [
            Rect(self.y0, self.x0, ym, xm),
            Rect(self.y0, xm, ym, self.x1),
            Rect(ym, self.x0, self.y1, xm),
            Rect(ym, xm, self.y1, self.x1),
        ]

    def mask_slices(self, shape, overlap: float) -> tuple[slice, slice]:
        """Pixel slices of the cell grown by ``overlap`` of its size (half on each side), clipped."""
        h, w = shape
        gy = (self.y1 - self.y0) * overlap / 2
        gx = (self.x1 - self.x0) * overlap / 2
        top = max(0, int(math.floor(self.y0 - gy + 1e-9)))
        bottom = min(h, int(math.ceil(self.y1 + gy - 1e-9)))
        left = max(0, int(math.floor(self.x0 - gx + 1e-9)))
        right = min(w, int(math.ceil(self.x1 + gx - 1e-9)))
        return slice(top, bottom), slice(left, right)


@dataclass
class SaliencyMap:
    grid: np.ndarray
    raw: np.ndarray
    calls: int = 0
    levels: list[int] = field(default_factory=list)
    peak_retained: int = 0

    @property
    def shape(self):
        return self.grid.shape


class NonFiniteScore(ValueError):
    pass


def perturb(image: np.ndarray, mask) -> np.ndarray:
    """Copy of ``image`` with the masked pixels set to their mean.

    ``mask`` is a boolean array shaped like the image or a (row-slice, col-slice) pair.
    """
    img = np.asarray(image)
    out = img.astype(np.float64, copy=True)
    if isinstance(mask, tuple):
        region = out[mask]
        if region.size == 0:
            raise ValueError("empty mask")
        out[mask] = region.mean()
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != img.shape:
            raise ValueError(f"mask shape {m.shape} != image shape {img.shape}")
        if not m.any():
            raise ValueError("empty mask")
        out[m] = out[m].mean()
    return out.astype(img.dtype) if np.issubdtype(img.dtype, np.floating) else out


def _score(fn, image) -> float:
    s = float(fn(image))
    if not math.isfinite(s):
        raise NonFiniteScore(f"model score {s} is not finite")
    return s


def attribute(
    model_score: Callable[..., float],
    image: np.ndarray,
    config: HipeConfig = HipeConfig(),
    concept=None,
) -> SaliencyMap:
    """Saliency of ``image`` for a scalar class score (higher = more positive).

    ``model_score(image)`` is called, or ``model_score(image, concept)`` when a
    concept is given. The score must be deterministic.
    """
    if concept is not None:
        scorer = model_score
        model_score = lambda im: scorer(im, concept)  # noqa: E731
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a greyscale (H, W) image, got {img.shape}")
    h, w = img.shape
    clean = _score(model_score, img)
    calls = 1
    acc = np.zeros((h, w), dtype=np.float64)
    g = config.initial_grid
    level = [Rect(i * h / g, j * w / g, (i + 1) * h / g, (j + 1) * w / g) for i in range(g) for j in range(g)]
    levels_run = []
    peak = 0
    for depth in range(config.max_depth):
        if not level:
            break
        levels_run.append(len(level))
        peak = max(peak, len(level))
        # each perturbed image is scored and dropped immediately; only (rect, drop) pairs are retained
        results: list[tuple[Rect, float]] = []
        for rect in level:
            sl = rect.mask_slices((h, w), config.overlap)
            if sl[0].start >= sl[0].stop or sl[1].start >= sl[1].stop:
                continue
            drop = max(0.0, clean - _score(model_score, perturb(img, sl)))
            calls += 1
            if drop > 0:
                np.maximum(acc[sl], drop, out=acc[sl])
            results.append((rect, drop))
        if depth + 1 == config.max_depth:
            break
        positive = np.array([d for _, d in results if d > 0])
        if positive.size == 0:
            break
        cut = np.quantile(positive, config.refinement_threshold)
        level = [
            child
            for rect, d in results
            if d > 0 and d >= cut and min(rect.y1 - rect.y0, rect.x1 - rect.x0) >= 2
            for child in rect.children()
        ]
    raw = acc.copy()
    top = acc.max()
    lo = acc.min()
    grid = np.zeros_like(acc) if top <= 0 or top == lo else (acc - lo) / (top - lo)
    return SaliencyMap(grid=grid, raw=raw, calls=calls, levels=levels_run, peak_retained=peak)


def render(saliency: np.ndarray, image: np.ndarray, max_alpha: float = 0.6, cmap: str = "jet") -> np.ndarray:
    """RGB uint8 overlay: the colormap of the map blended over the greyscale image with alpha ∝ saliency."""
    sal = np.asarray(saliency, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    if sal.shape != img.shape:
        raise ValueError(f"saliency {sal.shape} and image {img.shape} shapes differ")
    if img.max() > 1.0:
        img = img / 255.0
    grey = np.repeat(img[:, :, None], 3, axis=2)
    heat = colormaps[cmap](np.clip(sal, 0, 1))[:, :, :3]
    alpha = (max_alpha * np.clip(sal, 0, 1))[:, :, None]
    out = (1 - alpha) * grey + alpha * heat
    return np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)


def save_overlay(path, saliency: np.ndarray, image: np.ndarray, scale: int = 1) -> None:
    rgb = render(saliency, image)
    im = Image.fromarray(rgb, mode="RGB")
    if scale > 1:
        im = im.resize((rgb.shape[1] * scale, rgb.shape[0] * scale), Image.NEAREST)
    im.save(path)


def save_raw(path, saliency: np.ndarray) -> None:
    """Portable float grid: a header line with the shape, then one row of values per line."""
    sal = np.asarray(saliency, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"# rows={sal.shape[0]} cols={sal.shape[1]}\n")
        np.savetxt(fh, sal, fmt="%.6f")


def vit_scorer(model, concept_index: int):
    """Probability of one concept from a multi-label model, as a scalar scorer."""

    def score(img: np.ndarray) -> float:
        z = float(model.forward(img[None]).data[0, concept_index])
        return 1.0 / (1.0 + math.exp(-z))

    return score


def cnn_scorer(model):
    def score(img: np.ndarray) -> float:
        z = model.forward(img[None]).data[0].astype(np.float64)
        e = np.exp(z - z.max())
        return float(e[1] / e.sum())

    return score
