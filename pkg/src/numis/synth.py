"""Synthetic coin corpora: side-by-side obverse/reverse photographs with auction-style descriptions.

Each concept has a glyph that is drawn on the reverse when the concept is
present. Descriptions mention a concept through one of its lexicon words;
with probability ``noise`` the mention is flipped, emulating the mismatch
between free-text descriptions and what is visible on the reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

BACKGROUND = np.array([236.0, 233.0, 226.0])
COIN_TINT = np.array([1.0, 0.9, 0.74])

SLOTS = [(-0.38, -0.38), (-0.38, 0.38), (0.38, -0.38), (0.38, 0.38)]


def _glyph_mask(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean glyph footprint in local coordinates (glyph radius 1). ``u`` is x, ``v`` is y (down)."""
    r = np.hypot(u, v)
    box = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if name == "patera":
        return r <= 0.6
    if name == "shield":
        return (r <= 1.0) & (r >= 0.6)
    if name == "standing":
        return (np.abs(u) <= 0.22) & (np.abs(v) <= 1.0)
    if name == "horse":
        body = (np.abs(v + 0.2) <= 0.22) & (np.abs(u) <= 1.0)
        legs = (v >= -0.2) & (v <= 0.95) & ((np.abs(np.abs(u) - 0.75) <= 0.14) | (np.abs(np.abs(u) - 0.25) <= 0.14))
        return body | legs
    if name == "eagle":
        return box & (np.abs(v - (0.9 * np.abs(u) - 0.45)) <= 0.22)
    if name == "seated":
        back = (np.abs(u + 0.65) <= 0.2) & (v >= -1.0) & (v <= 0.3)
        seat = (np.abs(v - 0.3) <= 0.2) & (u >= -0.65) & (u <= 0.85)
        leg = (np.abs(u - 0.7) <= 0.18) & (v >= 0.3) & (v <= 1.0)
        return back | seat | leg
    if name == "cornucopia":
        return (r <= 1.0) & (np.hypot(u - 0.45, v + 0.25) >= 0.8)
    if name == "hercules":
        return box & ((np.abs(u - v) <= 0.25) | (np.abs(u + v) <= 0.25))
    raise KeyError(f"no glyph for concept {name!r}")


GLYPHS = ("cornucopia", "eagle", "horse", "patera", "shield", "standing", "seated", "hercules")


def render_reverse(size: int, present, rng: np.random.Generator, glyph_scale: float = 0.34) -> np.ndarray:
    """Greyscale reverse face in [0, 1]: textured disc on light background plus one glyph per present concept."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - c) / (size / 2.0)
    v = (yy - c) / (size / 2.0)
    disc = np.hypot(u, v) <= 1.0
    img = np.full((size, size), BACKGROUND.mean() / 255.0)
    base = rng.uniform(0.42, 0.55)
    img[disc] = base + rng.normal(0.0, 0.03, size=int(disc.sum()))
    # faint raised rim and a few random pits
    img[disc & (np.hypot(u, v) >= 0.88)] -= 0.08
    for _ in range(rng.integers(1, 4)):
        py, px = rng.uniform(-0.7, 0.7, size=2)
        img[np.hypot(u - px, v - py) <= rng.uniform(0.05, 0.1)] -= 0.12
    slots = rng.permutation(len(SLOTS))
    for k, name in enumerate(list(present)[: len(SLOTS)]):
        sy, sx = SLOTS[slots[k]]
        sy += rng.uniform(-0.08, 0.08)
        sx += rng.uniform(-0.08, 0.08)
        g = glyph_scale * rng.uniform(0.9, 1.1)
        mask = _glyph_mask(name, (u - sx) / g, (v - sy) / g) & disc
        img[mask] = rng.uniform(0.08, 0.18)
    return np.clip(img, 0.0, 1.0)


def render_obverse(size: int, rng: np.random.Generator) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - c) / (size / 2.0)
    v = (yy - c) / (size / 2.0)
    disc = np.hypot(u, v) <= 1.0
    img = np.full((size, size), BACKGROUND.mean() / 255.0)
    img[disc] = rng.uniform(0.42, 0.55) + rng.normal(0.0, 0.03, size=int(disc.sum()))
    bust = np.hypot((u - 0.05) / 0.45, (v + 0.1) / 0.6) <= 1.0
    img[bust & disc] -= 0.15
    return np.clip(img, 0.0, 1.0)


def paste_disc(canvas: np.ndarray, face: np.ndarray, top: int, left: int) -> None:
    """Write the disc pixels of ``face`` (greyscale, square) into an RGB canvas, tinted as metal."""
    size = face.shape[0]
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    disc = np.hypot(xx - c, yy - c) <= size / 2.0
    region = canvas[top : top + size, left : left + size]
    region[disc] = (face[disc, None] * 255.0) * COIN_TINT


def blank_canvas(height: int, width: int, rng: np.random.Generator | None = None, jitter: float = 2.0) -> np.ndarray:
    canvas = np.tile(BACKGROUND, (height, width, 1))
    if rng is not None and jitter:
        canvas = canvas + rng.uniform(-jitter, jitter, size=canvas.shape)
    return canvas


def to_uint8(canvas: np.ndarray) -> np.ndarray:
    return np.clip(np.round(canvas), 0, 255).astype(np.uint8)


# -- descriptions ------------------------------------------------------------------
EMPERORS = ["Constantine I", "Probus", "Gordian III", "Philip I", "Trajan Decius", "Aurelian", "Tacitus", "Maximinus II"]
DENOMINATIONS = ["AE Follis", "AR Antoninianus", "AE3", "AR Denarius", "AE Sestertius"]
MINTS = ["Rome", "Siscia", "Antioch", "Lugdunum", "Ticinum", "Cyzicus"]
DEITIES = ["Victory", "Roma", "Fortuna", "Sol", "Mars", "Virtus", "Concordia"]
OBV_LEGENDS = ["IMP C M AVR PROBVS P F AVG", "IMP GORDIANVS PIVS FEL AVG", "IMP TACITVS AVG", "IMP C CONSTANTINVS P F AVG"]
REV_LEGENDS = ["VIRTVS AVG", "CONCORDIA MILITVM", "SOLI INVICTO", "ROMAE AETERNAE", "FIDES MILITVM"]
GRADES = ["VF", "Good VF", "Near EF", "EF", "aVF"]

# Description vocabulary per concept; every entry also appears in the default lexicon.
MENTIONS = {
    "cornucopia": ["cornucopia", "cornucopiae", "corne d'abondance"],
    "eagle": ["eagle", "aigle", "águila", "Adler"],
    "horse": ["horse", "horses", "cheval", "caballo", "Pferd"],
    "patera": ["patera", "patère", "pátera"],
    "shield": ["shield", "bouclier", "escudo", "Schild"],
    "standing": ["standing", "debout", "stehend"],
    "seated": ["seated", "assis", "sentado", "sitzend"],
    "hercules": ["Hercules", "Hercule", "Herkules", "Hércules"],
}


def describe(rng: np.random.Generator, mentioned) -> str:
    year = int(rng.integers(238, 330))
    parts = []
    for c in mentioned:
        word = MENTIONS[c][rng.integers(len(MENTIONS[c]))]
        parts.append(f"with {word}")
    rev = f"{DEITIES[rng.integers(len(DEITIES))]} left"
    if parts:
        rev += ", " + ", ".join(parts)
    return (
        f"{EMPERORS[rng.integers(len(EMPERORS))]} {DENOMINATIONS[rng.integers(len(DENOMINATIONS))]}. "
        f"{MINTS[rng.integers(len(MINTS))]}, AD {year}-{year + int(rng.integers(1, 8))}. "
        f"{OBV_LEGENDS[rng.integers(len(OBV_LEGENDS))]}, radiate, draped and cuirassed bust right / "
        f"{REV_LEGENDS[rng.integers(len(REV_LEGENDS))]}, {rev}. RIC {int(rng.integers(1, 400))}. "
        f"{rng.uniform(2.0, 5.0):.2f}g, {int(rng.integers(18, 26))}mm. {GRADES[rng.integers(len(GRADES))]}."
    )


@dataclass
class SyntheticSample:
    image_id: str
    present: list[str]
    mentioned: list[str]
    description: str


def sample_concepts(rng: np.random.Generator, concepts, prevalence: float, noise: float):
    drawn = [c for c in concepts if rng.random() < prevalence]
    # keep a random subset when more glyphs are drawn than there are slots, so no concept is favoured
    keep = sorted(rng.permutation(len(drawn))[: len(SLOTS)])
    present = [drawn[k] for k in keep]
    mentioned = [c for c in concepts if (c in present) != (rng.random() < noise)]
    return present, mentioned


def make_two_coin_image(rng: np.random.Generator, present, height: int = 88, width: int = 176) -> np.ndarray:
    """Obverse left, reverse right, both fully inside a light canvas."""
    canvas = blank_canvas(height, width, rng)
    rs = int(rng.integers(58, 70))
    os_ = int(rng.integers(58, 70))
    rev_left = width - rs - int(rng.integers(6, 12))
    rev_top = height - rs - int(rng.integers(6, max(7, height - rs - 6)))
    obv_left = int(rng.integers(6, max(7, rev_left - os_ - 6)))
    obv_top = int(rng.integers(6, max(7, height - os_ - 6)))
    paste_disc(canvas, render_obverse(os_, rng), obv_top, obv_left)
    paste_disc(canvas, render_reverse(rs, present, rng), rev_top, rev_left)
    return to_uint8(canvas)


def make_corpus(
    out_dir, n: int, concepts, seed: int = 0, prevalence: float = 0.4, noise: float = 0.1, distractors: bool = False
) -> list[SyntheticSample]:
    """Write ``coin-XXXX.png`` / ``coin-XXXX.txt`` pairs and return the ground truth.

    With ``distractors`` every glyph may appear on a reverse (and be described),
    not only the labelled ``concepts``; real reverses carry more motifs than
    the ones being learned.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pool = list(GLYPHS) if distractors else list(concepts)
    samples = []
    for i in range(n):
        present, mentioned = sample_concepts(rng, pool, prevalence, noise)
        image_id = f"coin-{i:04d}"
        Image.fromarray(make_two_coin_image(rng, present)).save(out / f"{image_id}.png")
        text = describe(rng, mentioned)
        (out / f"{image_id}.txt").write_text(text + "\n", encoding="utf-8")
        samples.append(SyntheticSample(image_id, present, mentioned, text))
    return samples


def reverse_dataset(n: int, concepts, size: int = 32, seed: int = 0, prevalence: float = 0.4, noise: float = 0.0):
    """Reverse faces rendered directly at model resolution, with (possibly noisy) labels.

    Returns (images (n, size, size) float32, labels (n, C) int64, clean labels).
    """
    rng = np.random.default_rng(seed)
    images = np.zeros((n, size, size), dtype=np.float32)
    clean = np.zeros((n, len(concepts)), dtype=np.int64)
    noisy = np.zeros_like(clean)
    for i in range(n):
        present, mentioned = sample_concepts(rng, concepts, prevalence, noise)
        images[i] = render_reverse(size, present, rng)
        clean[i] = [c in present for c in concepts]
        noisy[i] = [c in mentioned for c in concepts]
    return images, noisy, clean


def overfit_set(n: int = 20, seed: int = 0, size: int = 32):
    """The small 2-concept set used for overfitting checks: balanced, noise-free."""
    concepts = ["shield", "horse"]
    rng = np.random.default_rng(seed)
    images = np.zeros((n, size, size), dtype=np.float32)
    labels = np.zeros((n, 2), dtype=np.int64)
    for i in range(n):
        labels[i] = [(i >> 0) & 1, (i >> 1) & 1]
        present = [c for c, y in zip(concepts, labels[i]) if y]
        images[i] = render_reverse(size, present, rng)
    return images, labels, concepts
