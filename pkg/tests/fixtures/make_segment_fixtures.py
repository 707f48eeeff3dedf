"""Writes the 10-image segmentation fixture corpus and its golden report.

Expected outcomes and boxes come from the construction geometry: each disc's
box is the bounding box of its own mask, and each violating image breaks one
rule by design. Run from the repository root to regenerate.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

HEIGHT, WIDTH = 120, 260
BG = (236, 233, 226)


def disc_mask(shape, cy: int, cx: int, diameter: int) -> np.ndarray:
    """Disc centred on a pixel corner, so every extreme row and column holds at least 2 pixels."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    r = diameter / 2
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def bbox(mask: np.ndarray) -> list[int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return [int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1]


def canvas(rng, bg=BG, jitter=2.0):
    return np.tile(np.array(bg, float), (HEIGHT, WIDTH, 1)) + rng.uniform(-jitter, jitter, (HEIGHT, WIDTH, 3))


def paint(img, mask, colour, rng, texture=6.0):
    img[mask] = np.array(colour, float) + rng.normal(0, texture, (int(mask.sum()), 3))


def build():
    """Returns {name: (uint8 image, expected outcome dict)}."""
    rng = np.random.default_rng(2024)
    out = {}

    def two_disc(name, obv, rev, colours=((150, 120, 90), (140, 110, 80)), extra=None, bg=BG):
        img = canvas(rng, bg)
        for (cy, cx, d), col in zip((obv, rev), colours):
            paint(img, disc_mask(img.shape, cy, cx, d), col, rng)
        if extra is not None:
            extra(img)
        rev_box = bbox(disc_mask(img.shape, *rev))
        out[name] = (img, {"accepted": True, "reverse_box": rev_box, "obverse_box": bbox(disc_mask(img.shape, *obv))})

    two_disc("ok-01-plain", (60, 60, 70), (60, 190, 70))
    two_disc("ok-02-small", (64, 80, 40), (58, 170, 44))
    two_disc("ok-03-reverse-low", (40, 50, 60), (75, 200, 64))
    two_disc("ok-04-dark-metal", (60, 70, 80), (62, 180, 76), colours=((60, 60, 55), (70, 65, 50)))
    two_disc("ok-05-grey-background", (58, 66, 66), (60, 186, 72), bg=(200, 200, 200))

    def speck(img):
        # isolated single pixels: below the two-pixel column/row rule
        img[10, 240] = (20, 20, 20)
        img[100, 130] = (20, 20, 20)

    two_disc("ok-06-noise-specks", (60, 62, 64), (60, 180, 64), extra=speck)

    # tall 1:3 bar right of the reverse: too far from square, skipped by the re-search
    img = canvas(rng)
    obv, rev = (60, 50, 60), (60, 150, 64)
    for cy, cx, d in (obv, rev):
        paint(img, disc_mask(img.shape, cy, cx, d), (150, 120, 90), rng)
    img[30:96, 222:244] = (90, 80, 70)
    out["ok-07-tall-blob"] = (img, {"accepted": True, "reverse_box": bbox(disc_mask(img.shape, *rev)), "obverse_box": bbox(disc_mask(img.shape, *obv))})

    img = canvas(rng)
    for cy, cx, d in ((60, 40, 56), (60, 120, 56), (60, 200, 56)):
        paint(img, disc_mask(img.shape, cy, cx, d), (150, 120, 90), rng)
    out["bad-08-three-discs"] = (img, {"accepted": False, "reason": "ExtraObjects"})

    img = canvas(rng)
    paint(img, disc_mask(img.shape, 60, 180, 70), (150, 120, 90), rng)
    out["bad-09-single-disc"] = (img, {"accepted": False, "reason": "NoObverse"})

    img = canvas(rng)
    paint(img, disc_mask(img.shape, 60, 70, 64), (150, 120, 90), rng)
    paint(img, disc_mask(img.shape, 60, WIDTH - 20, 64), (150, 120, 90), rng)
    out["bad-10-cropped-reverse"] = (img, {"accepted": False, "reason": "TouchesEdge"})

    return {k: (np.clip(np.round(v[0]), 0, 255).astype(np.uint8), v[1]) for k, v in out.items()}


def write(root: Path) -> None:
    corpus = root / "segment_corpus"
    corpus.mkdir(parents=True, exist_ok=True)
    golden = {}
    for name, (img, expected) in build().items():
        Image.fromarray(img).save(corpus / f"{name}.png")
        (corpus / f"{name}.txt").write_text(f"fixture {name}\n")
        golden[name] = expected
    (root / "segment_golden.json").write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    write(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent)
