"""Train/validation/test splitting and class balancing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import LabelTable


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.64
    val: float = 0.16
    test: float = 0.20
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split ratios must be nonnegative")
        if not math.isclose(self.train + self.val + self.test, 1.0, abs_tol=1e-9):
            raise ValueError(f"split ratios sum to {self.train + self.val + self.test}, not 1")


@dataclass
class DatasetView:
    ids: list[str]
    concepts: list[str]
    labels: np.ndarray
    weights: dict[str, float] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(len(self.ids), len(self.concepts))

    def __len__(self) -> int:
        return len(self.ids)

    def column(self, concept: str) -> np.ndarray:
        return self.labels[:, self.concepts.index(concept)]

    def subset(self, index) -> "DatasetView":
        index = np.asarray(index, dtype=np.int64)
        return DatasetView([self.ids[i] for i in index], list(self.concepts), self.labels[index])

    @classmethod
    def from_table(cls, table: LabelTable) -> "DatasetView":
        return cls(list(table.image_ids), list(table.concepts), np.asarray(table.rows, dtype=np.int64).reshape(-1, len(table.concepts)))


def iterative_stratification(labels: np.ndarray, ratios, rng: np.random.Generator) -> np.ndarray:
    """Assign each row of a binary (n, C) matrix to one of ``len(ratios)`` subsets.

    Labels are processed scarcest-first; each positive sample goes to the subset
    with the largest remaining demand for that label, ties broken by remaining
    capacity and then uniformly at random. All-negative rows fill remaining
    capacity. Returns the subset index per row.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = labels.shape
    ratios = np.asarray(ratios, dtype=np.float64)
    capacity = ratios * n
    demand = ratios[:, None] * labels.sum(axis=0)[None, :]
    assign = np.full(n, -1, dtype=np.int64)
    unassigned = np.ones(n, dtype=bool)

    def pick(scores: list[np.ndarray]) -> int:
        cand = np.arange(len(ratios))
        for s in scores:
            best = s[cand].max()
            cand = cand[np.isclose(s[cand], best, rtol=0, atol=1e-9)]
            if len(cand) == 1:
                return int(cand[0])
        return int(rng.choice(cand))

    while True:
        remaining = labels[unassigned].sum(axis=0)
        live = np.flatnonzero(remaining > 0)
        if live.size == 0:
            break
        lab = int(live[np.argmin(remaining[live])])
        rows = np.flatnonzero(unassigned & (labels[:, lab] == 1))
        for i in rows[rng.permutation(len(rows))]:
            j = pick([demand[:, lab], capacity])
            assign[i] = j
            unassigned[i] = False
            demand[j] -= labels[i]
            capacity[j] -= 1
    rest = np.flatnonzero(unassigned)
    for i in rest[rng.permutation(len(rest))]:
        j = pick([capacity])
        assign[i] = j
        capacity[j] -= 1
    return assign


def stratified_split(view: DatasetView, spec: SplitSpec = SplitSpec()) -> tuple[DatasetView, DatasetView, DatasetView]:
    """Carve off the test share first, then split the remainder into train and validation."""
    if len(view) == 0 or not view.concepts:
        raise ValueError("need at least one sample and one concept to split")
    rng = np.random.default_rng(spec.seed)
    outer = iterative_stratification(view.labels, [1 - spec.test, spec.test], rng)
    rest = np.flatnonzero(outer == 0)
    test = np.flatnonzero(outer == 1)
    denom = spec.train + spec.val
    inner_ratio = [spec.train / denom, spec.val / denom] if denom > 0 else [1.0, 0.0]
    inner = iterative_stratification(view.labels[rest], inner_ratio, rng)
    train = rest[inner == 0]
    val = rest[inner == 1]
    return view.subset(train), view.subset(val), view.subset(test)


def positive_weights(view: DatasetView) -> dict[str, float]:
    """negatives / positives per concept, used to up-weight the positive loss term."""
    out = {}
    for j, c in enumerate(view.concepts):
        pos = int(view.labels[:, j].sum())
        neg = len(view) - pos
        if pos == 0 or neg == 0:
            raise ValueError(f"concept {c!r} has {pos} positives and {neg} negatives in the training view")
        out[c] = neg / pos
    return out


OVERSAMPLE_CAP = 10


def balance_binary(view: DatasetView, concept: str, mode: str = "undersample", seed: int = 0, factor: int | None = None) -> DatasetView:
    """Exactly balanced single-concept view.

    ``undersample`` keeps every positive and draws as many negatives.
    ``oversample`` repeats each positive ``factor`` times and draws as many
    negatives; by default the factor uses all negatives, capped at 10x.
    """
    y = view.column(concept)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0:
        raise ValueError(f"concept {concept!r} has no positive samples")
    rng = np.random.default_rng(seed)
    if mode == "undersample":
        k = min(len(pos), len(neg))
        keep_pos = np.sort(rng.choice(pos, size=k, replace=False)) if k < len(pos) else pos
        keep_neg = np.sort(rng.choice(neg, size=k, replace=False))
        idx = np.concatenate([keep_pos, keep_neg])
    elif mode == "oversample":
        if factor is None:
            factor = max(1, min(len(neg) // len(pos), OVERSAMPLE_CAP))
        if factor < 1:
            raise ValueError("oversampling factor must be >= 1")
        k = len(pos) * factor
        if k > len(neg):
            raise ValueError(f"only {len(neg)} negatives for {k} oversampled positives")
        keep_neg = np.sort(rng.choice(neg, size=k, replace=False))
        idx = np.concatenate([np.tile(pos, factor), keep_neg])
    else:
        raise ValueError(f"unknown balancing mode {mode!r}")
    sub = view.subset(idx)
    j = view.concepts.index(concept)
    return DatasetView(sub.ids, [concept], sub.labels[:, j : j + 1])


def split_report(full: DatasetView, parts: dict[str, DatasetView]) -> dict:
    report = {"sizes": {k: len(v) for k, v in parts.items()}, "proportions": {}}
    for j, c in enumerate(full.concepts):
        report["proportions"][c] = {
            "full": float(full.labels[:, j].mean()) if len(full) else 0.0,
            **{k: (float(v.labels[:, j].mean()) if len(v) else 0.0) for k, v in parts.items()},
        }
    return report


def write_manifests(out_dir, parts: dict[str, DatasetView], full: DatasetView) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, v in parts.items():
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in v.ids))
    (out / "split_report.json").write_text(json.dumps(split_report(full, parts), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def select(view: DatasetView, ids) -> DatasetView:
    pos = {i: k for k, i in enumerate(view.ids)}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise KeyError(f"{len(missing)} manifest ids not in label table, e.g. {missing[:3]}")
    return view.subset([pos[i] for i in ids])


def load_crops(ids, crop_dir, size: int) -> np.ndarray:
    """Greyscale ``<id>-rev.png`` crops resized to size x size, scaled to [0, 1]."""
    out = np.zeros((len(ids), size, size), dtype=np.float32)
    for k, image_id in enumerate(ids):
        with Image.open(Path(crop_dir) / f"{image_id}-rev.png") as im:
            out[k] = np.asarray(im.convert("L").resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
    return out
