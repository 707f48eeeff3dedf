"""Reverse-side extraction from side-by-side two-coin photographs.

The rightmost (then bottom-most) foreground object is taken as the reverse,
the next object to its left as the obverse. Images whose layout does not fit
that pattern are rejected with an enumerated cause.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
LUMA = np.array([0.299, 0.587, 0.114])


class RejectCause(str, enum.Enum):
    TOO_SMALL = "TooSmall"
    INCONSISTENT_BACKGROUND = "InconsistentBackground"
    NO_OBJECT = "NoObject"
    TOUCHES_EDGE = "TouchesEdge"
    OBJECT_ABOVE = "ObjectAbove"
    NO_OBVERSE = "NoObverse"
    EXTRA_OBJECTS = "ExtraObjects"


class SegmentationError(Exception):
    def __init__(self, cause: RejectCause, detail: str = ""):
        super().__init__(f"{cause.value}: {detail}" if detail else cause.value)
        self.cause = cause


class ImageTooSmall(SegmentationError, ValueError):
    def __init__(self, detail: str):
        super().__init__(RejectCause.TOO_SMALL, detail)


@dataclass(frozen=True)
class SegmentationParams:
    # Defaults are tuned on synthetic fixtures; the source method leaves them open.
    corner_patch: int = 8
    corner_agreement_threshold: float = 12.0
    background_tolerance: float = 20.0
    min_object_extent: int = 32
    squareness_tolerance: float = 0.35
    background_fill_ratio: float = 0.45
    min_foreground_pixels: int = 2

    def __post_init__(self):
        if min(self.corner_patch, self.min_object_extent, self.min_foreground_pixels) < 1:
            raise ValueError("corner_patch, min_object_extent and min_foreground_pixels must be >= 1")
        if min(self.corner_agreement_threshold, self.background_tolerance, self.background_fill_ratio) < 0:
            raise ValueError("tolerances must be nonnegative")
        if not 0 < self.squareness_tolerance < 1:
            raise ValueError("squareness_tolerance must lie in (0, 1)")


@dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle [top, bottom) x [left, right)."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.bottom - self.top

    def squareness(self) -> float:
        return abs(self.width - self.height) / max(self.width, self.height)

    def shifted(self, dx: int = 0, dy: int = 0) -> "Box":
        return Box(self.top + dy, self.left + dx, self.bottom + dy, self.right + dx)

    def as_list(self) -> list[int]:
        return [self.top, self.left, self.bottom, self.right]


@dataclass(frozen=True)
class Accepted:
    reverse_box: Box
    obverse_box: Box
    crop: np.ndarray

    accepted = True


@dataclass(frozen=True)
class Rejected:
    reason: RejectCause
    detail: str = ""

    accepted = False


def _as_float(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W) or (H, W, C) image, got shape {np.shape(image)}")
    return img


def to_grey(image) -> np.ndarray:
    img = _as_float(image)
    grey = img[:, :, 0] if img.shape[2] == 1 else img[:, :, :3] @ LUMA
    return np.clip(np.round(grey), 0, 255).astype(np.uint8)


def estimate_background(image, params: SegmentationParams = SegmentationParams()):
    """Mean colour of the four corner patches, or ``Rejected`` when corners disagree."""
    img = _as_float(image)
    h, w, _ = img.shape
    cp = params.corner_patch
    if h < 2 * cp or w < 2 * cp:
        raise ImageTooSmall(f"{h}x{w} image is smaller than two {cp}px corner patches")
    corners = np.stack(
        [
            img[:cp, :cp].reshape(-1, img.shape[2]).mean(axis=0),
            img[:cp, -cp:].reshape(-1, img.shape[2]).mean(axis=0),
            img[-cp:, :cp].reshape(-1, img.shape[2]).mean(axis=0),
            img[-cp:, -cp:].reshape(-1, img.shape[2]).mean(axis=0),
        ]
    )
    spread = np.abs(corners[:, None, :] - corners[None, :, :]).max()
    if spread > params.corner_agreement_threshold:
        return Rejected(RejectCause.INCONSISTENT_BACKGROUND, f"corner colours differ by {spread:.1f}")
    return corners.mean(axis=0)


def foreground_mask(image, background, params: SegmentationParams) -> np.ndarray:
    img = _as_float(image)
    bg = np.asarray(background, dtype=np.float64).reshape(1, 1, -1)
    return np.abs(img - bg).max(axis=2) > params.background_tolerance


def _last_true(flags: np.ndarray, upto: int) -> int | None:
    """Largest index <= upto where flags is True."""
    if upto < 0:
        return None
    hits = np.flatnonzero(flags[: upto + 1])
    return int(hits[-1]) if hits.size else None


def _extent(occupied: np.ndarray, start: int, min_extent: int) -> tuple[int, int]:
    """Scan from ``start`` toward index 0 for an object at least ``min_extent`` long.

    Returns (first, last) inclusive indices. Objects reaching the far edge or
    the near edge of the image are treated as cropped.
    """
    n = len(occupied)
    limit = start
    while True:
        last = _last_true(occupied, limit)
        if last is None:
            raise SegmentationError(RejectCause.NO_OBJECT)
        if last == n - 1:
            raise SegmentationError(RejectCause.TOUCHES_EDGE, "object reaches the far image edge")
        gap = _last_true(~occupied, last)
        if gap is None:
            raise SegmentationError(RejectCause.TOUCHES_EDGE, "object runs to the image edge")
        if last - gap >= min_extent:
            return gap + 1, last
        limit = gap


def _find_box(fg: np.ndarray, params: SegmentationParams, right_limit: int, bottom_limit: int | None = None) -> Box:
    k = params.min_foreground_pixels
    cols = fg.sum(axis=0) >= k
    left, right = _extent(cols, right_limit, params.min_object_extent)
    rows = fg[:, left : right + 1].sum(axis=1) >= k
    start = fg.shape[0] - 1 if bottom_limit is None else bottom_limit
    top, bottom = _extent(rows, start, params.min_object_extent)
    return Box(top, left, bottom + 1, right + 1)


def find_object_box(image, background, params: SegmentationParams = SegmentationParams(), right_limit: int | None = None) -> Box:
    """Bounding box of the bottom-rightmost object whose right edge is at or left of ``right_limit``.

    Raises ``SegmentationError`` with cause NoObject or TouchesEdge.
    """
    fg = foreground_mask(image, background, params)
    if right_limit is None:
        right_limit = fg.shape[1] - 1
    if not 0 <= right_limit < fg.shape[1]:
        raise ValueError(f"right_limit {right_limit} outside image of width {fg.shape[1]}")
    return _find_box(fg, params, right_limit)


def _background_fraction(fg: np.ndarray, box: Box) -> float:
    return 1.0 - float(fg[box.top : box.bottom, box.left : box.right].mean())


def _coin_box(fg: np.ndarray, params: SegmentationParams, right_limit: int) -> Box:
    """Object search with the squareness and interior-background re-search rules."""
    while True:
        if right_limit < 0:
            raise SegmentationError(RejectCause.NO_OBJECT)
        box = _find_box(fg, params, right_limit)
        if box.squareness() > params.squareness_tolerance:
            log.debug("box %s not square enough, searching further left", box)
        elif _background_fraction(fg, box) > params.background_fill_ratio:
            log.debug("box %s mostly background, searching further left", box)
        else:
            return box
        right_limit = box.left - 1


def _has_object_above(fg: np.ndarray, box: Box, params: SegmentationParams) -> bool:
    band = fg[: box.top, box.left : box.right]
    return bool((band.sum(axis=1) >= params.min_foreground_pixels).any() or (band.sum(axis=0) >= params.min_foreground_pixels).any())


def segment(image, params: SegmentationParams = SegmentationParams()):
    """Locate reverse and obverse; return ``Accepted`` with a greyscale reverse crop or ``Rejected``."""
    try:
        background = estimate_background(image, params)
    except ImageTooSmall as exc:
        return Rejected(exc.cause, str(exc))
    if isinstance(background, Rejected):
        return background
    fg = foreground_mask(image, background, params)
    w = fg.shape[1]
    try:
        reverse = _coin_box(fg, params, w - 1)
    except SegmentationError as exc:
        return Rejected(exc.cause, "reverse search")
    if _has_object_above(fg, reverse, params):
        return Rejected(RejectCause.OBJECT_ABOVE, "above reverse")
    try:
        obverse = _coin_box(fg, params, reverse.left - 1)
    except SegmentationError as exc:
        cause = RejectCause.NO_OBVERSE if exc.cause is RejectCause.NO_OBJECT else exc.cause
        return Rejected(cause, "obverse search")
    if _has_object_above(fg, obverse, params):
        return Rejected(RejectCause.OBJECT_ABOVE, "above obverse")
    remaining = fg[:, : obverse.left].sum(axis=0) >= params.min_foreground_pixels
    if remaining.any():
        return Rejected(RejectCause.EXTRA_OBJECTS, f"foreground at column {int(np.flatnonzero(remaining)[-1])}")
    grey = to_grey(image)
    crop = grey[reverse.top : reverse.bottom, reverse.left : reverse.right].copy()
    return Accepted(reverse, obverse, crop)


@dataclass
class CorpusReport:
    total: int = 0
    accepted: list[str] = field(default_factory=list)
    rejected: dict[str, str] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    boxes: dict[str, list[int]] = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(self.rejected.values())
        return {cause.value: c.get(cause.value, 0) for cause in RejectCause}

    @property
    def rejection_rate(self) -> float:
        return 0.0 if self.total == 0 else (len(self.rejected) + len(self.errors)) / self.total

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "accepted": len(self.accepted),
            "rejected": len(self.rejected),
            "unreadable": len(self.errors),
            "rejection_rate": round(self.rejection_rate, 6),
            "rejection_counts": self.counts,
            "accepted_ids": self.accepted,
            "rejected_ids": self.rejected,
            "unreadable_ids": self.errors,
            "reverse_boxes": self.boxes,
        }


def list_images(input_dir) -> list[Path]:
    root = Path(input_dir)
    return sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def process_corpus(input_dir, output_dir, params: SegmentationParams = SegmentationParams()) -> CorpusReport:
    """Segment every image in ``input_dir``; write ``<stem>-rev.png`` crops and ``prepare_report.json``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = CorpusReport()
    for path in list_images(input_dir):
        report.total += 1
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
        except Exception as exc:  # any decoder failure counts, never aborts
            log.warning("unreadable image %s: %s", path, exc)
            report.errors[path.stem] = f"{type(exc).__name__}: {exc}"
            continue
        outcome = segment(arr, params)
        if isinstance(outcome, Accepted):
            Image.fromarray(outcome.crop, mode="L").save(out / f"{path.stem}-rev.png")
            report.accepted.append(path.stem)
            report.boxes[path.stem] = outcome.reverse_box.as_list()
        else:
            report.rejected[path.stem] = outcome.reason.value
    (out / "prepare_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("segmented %d images, rejection rate %.3f", report.total, report.rejection_rate)
    return report
