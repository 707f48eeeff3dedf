"""Pipeline stages over a single config file.

Each stage writes its artifacts under ``output_root`` plus a JSON summary in
``output_root/stages/``. The summary records a fingerprint of the stage's
config section and of its upstream stages, so re-running an unchanged stage
is a no-op unless forced.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import synth
from .checkpoint import ModelCheckpoint, build_model, load_checkpoint, save_checkpoint
from .cnn import CnnConfig, CnnModel
from .dataset import (
    DatasetView,
    SplitSpec,
    balance_binary,
    load_crops,
    positive_weights,
    read_manifest,
    select,
    stratified_split,
    write_manifests,
)
from .labels import LabelTable, build_label_table, load_lexicons, load_stop_words, mine_concepts
from .metrics import ConceptMetrics
from .saliency import HipeConfig, attribute, cnn_scorer, save_overlay, save_raw, vit_scorer
from .segment import SegmentationParams, list_images, process_corpus
from .train import LabeledImages, Schedule, evaluate, train
from .vit import ViTConfig, ViTModel, replace_head

log = logging.getLogger(__name__)

STAGES = ("prepare", "mine", "label", "split", "pretrain", "train-vit", "train-cnn", "eval", "saliency", "report")
PREREQUISITES = {
    "prepare": (),
    "mine": (),
    "label": ("prepare",),
    "split": ("label",),
    "pretrain": (),
    "train-vit": ("split", "pretrain"),
    "train-cnn": ("split",),
    "eval": ("train-vit", "train-cnn"),
    "saliency": ("train-vit", "train-cnn"),
    "report": ("eval",),
}

DEFAULTS = {
    "seed": 0,
    "output_root": "out",
    "corpus": {"input_dir": "corpus"},
    "segmentation": {},
    "lexicon": None,
    "stop_words": None,
    "concepts": None,
    "mining": {"top": 100},
    "split": {"train": 0.64, "val": 0.16, "test": 0.20},
    "vit": {"image_size": 32, "patch_size": 8, "depth": 2, "heads": 2, "d_model": 32, "d_ff": 64},
    "cnn": {
        "image_size": 32,
        "conv_blocks": [[8, 3, 1, 2], [16, 3, 1, 2], [32, 3, 1, 2]],
        "fc_widths": [64, 32],
    },
    "pretrain": {
        "images": 3000,
        "prevalence": 0.35,
        "lr": 0.01,
        "momentum": 0.9,
        "batch_size": 32,
        "epochs": 40,
    },
    "train": {
        "vit": {"lr": 0.01, "momentum": 0.9, "batch_size": 32, "epochs": 40, "patience": None},
        "cnn": {
            "lr": 0.001,
            "momentum": 0.9,
            "batch_size": 16,
            "epochs": 150,
            "patience": 30,
            "balance": "undersample",
        },
    },
    "eval": {"threshold": 0.5},
    "saliency": {"max_depth": 3, "initial_grid": 4, "overlap": 0.5, "refinement_threshold": 0.5, "images": 3},
}


class PipelineError(Exception):
    """Bad data or a missing prerequisite; the CLI maps this to exit code 2."""


class UsageError(Exception):
    """Invalid configuration or arguments; exit code 1."""


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def load(cls, path, seed: int | None = None) -> "PipelineConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, path.parent, seed)

    @classmethod
    def from_dict(cls, data: dict, base_dir, seed: int | None = None) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise UsageError("config must be a mapping")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in data and seed is None:
            raise UsageError("config must set a seed")
        raw = _merge(DEFAULTS, data)
        if seed is not None:
            raw["seed"] = int(seed)
        cfg = cls(raw, Path(base_dir).resolve())
        cfg.validate()
        return cfg

    def path(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out(self) -> Path:
        return self.path(self.raw["output_root"])

    @property
    def corpus_dir(self) -> Path:
        return self.path(self.raw["corpus"]["input_dir"])

    def validate(self) -> None:
        try:
            self.segmentation()
            self.split_spec()
            self.vit_config(1)
            self.cnn_config()
            self.hipe_config()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc
        for key in ("lexicon", "stop_words"):
            p = self.path(self.raw[key])
            if p is not None and not p.is_file():
                raise UsageError(f"{key} file {p} does not exist")

    def segmentation(self) -> SegmentationParams:
        return SegmentationParams(**self.raw["segmentation"])

    def split_spec(self) -> SplitSpec:
        return SplitSpec(**self.raw["split"], seed=self.seed)

    def vit_config(self, num_labels: int) -> ViTConfig:
        return ViTConfig(**self.raw["vit"], num_labels=num_labels)

    def cnn_config(self) -> CnnConfig:
        c = dict(self.raw["cnn"])
        c["conv_blocks"] = tuple(tuple(b) for b in c["conv_blocks"])
        c["fc_widths"] = tuple(c["fc_widths"])
        return CnnConfig(**c)

    def hipe_config(self) -> HipeConfig:
        s = {k: v for k, v in self.raw["saliency"].items() if k != "images"}
        return HipeConfig(**s)

    def schedule(self, section: dict, seed_offset: int) -> Schedule:
        return Schedule(
            lr=float(section["lr"]),
            momentum=float(section["momentum"]),
            batch_size=int(section["batch_size"]),
            epochs=int(section["epochs"]),
            patience=section.get("patience"),
            seed=self.seed + seed_offset,
        )

    def lexicons(self):
        return load_lexicons(self.path(self.raw["lexicon"]), self.raw["concepts"])


# -- stage bookkeeping -----------------------------------------------------------
def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _corpus_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def summary_path(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.out / "stages" / f"{stage}.json"


def read_summary(cfg: PipelineConfig, stage: str) -> dict | None:
    p = summary_path(cfg, stage)
    if not p.is_file():
        return None
    return json.loads(p.read_text())


def require(cfg: PipelineConfig, stage: str) -> None:
    for pre in PREREQUISITES[stage]:
        if read_summary(cfg, pre) is None:
            raise PipelineError(f"stage '{stage}' needs the output of '{pre}'; run `numis {pre}` first")


def _stage_sections(stage: str) -> list[str]:
    return {
        "prepare": ["corpus", "segmentation"],
        "mine": ["corpus", "stop_words", "mining"],
        "label": ["lexicon", "concepts"],
        "split": ["split"],
        "pretrain": ["vit", "pretrain"],
        "train-vit": ["vit", "train"],
        "train-cnn": ["cnn", "train"],
        "eval": ["eval"],
        "saliency": ["saliency"],
        "report": [],
    }[stage]


def fingerprint(cfg: PipelineConfig, stage: str) -> str:
    parts = {
        "stage": stage,
        "seed": cfg.seed,
        "config": {k: cfg.raw[k] for k in _stage_sections(stage)},
        "upstream": {p: (read_summary(cfg, p) or {}).get("fingerprint") for p in PREREQUISITES[stage]},
    }
    if stage in ("prepare", "mine"):
        parts["corpus"] = _corpus_digest(cfg.corpus_dir) if cfg.corpus_dir.is_dir() else None
    for key in ("lexicon", "stop_words"):
        p = cfg.path(cfg.raw.get(key))
        if key in _stage_sections(stage) and p is not None:
            parts[key + "_digest"] = hashlib.sha256(p.read_bytes()).hexdigest()
    return _digest(parts)


def _write_summary(cfg: PipelineConfig, stage: str, fp: str, summary: dict, elapsed: float) -> dict:
    doc = {"stage": stage, "fingerprint": fp, "seconds": round(elapsed, 3), **summary}
    p = summary_path(cfg, stage)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def run_stage(cfg: PipelineConfig, stage: str, force: bool = False) -> dict:
    if stage not in STAGES:
        raise UsageError(f"unknown stage {stage!r}")
    require(cfg, stage)
    fp = fingerprint(cfg, stage)
    previous = read_summary(cfg, stage)
    if not force and previous is not None and previous.get("fingerprint") == fp:
        log.info("stage %s is up to date; skipping", stage)
        return {**previous, "skipped": True}
    t0 = time.perf_counter()
    summary = STAGE_FUNCS[stage](cfg)
    return _write_summary(cfg, stage, fp, summary, time.perf_counter() - t0)


# -- stages ----------------------------------------------------------------------
def stage_prepare(cfg: PipelineConfig) -> dict:
    if not cfg.corpus_dir.is_dir():
        raise PipelineError(f"corpus directory {cfg.corpus_dir} does not exist")
    report = process_corpus(cfg.corpus_dir, cfg.out / "crops", cfg.segmentation())
    d = report.to_dict()
    return {k: d[k] for k in ("total", "accepted", "rejected", "unreadable", "rejection_rate", "rejection_counts")}


def _descriptions(cfg: PipelineConfig, ids=None):
    root = cfg.corpus_dir
    if ids is None:
        ids = [p.stem for p in list_images(root)]
    for image_id in ids:
        p = root / f"{image_id}.txt"
        yield image_id, (p.read_text(encoding="utf-8") if p.is_file() else None)


def stage_mine(cfg: PipelineConfig) -> dict:
    if not cfg.corpus_dir.is_dir():
        raise PipelineError(f"corpus directory {cfg.corpus_dir} does not exist")
    texts = [t for _, t in _descriptions(cfg) if t is not None]
    if not texts:
        raise PipelineError("no descriptions found to mine")
    ranked = mine_concepts(texts, load_stop_words(cfg.path(cfg.raw["stop_words"])))
    top = ranked[: int(cfg.raw["mining"]["top"])]
    out = cfg.out / "concepts.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("word,frequency\n" + "".join(f"{w},{n}\n" for w, n in top), encoding="utf-8")
    return {"descriptions": len(texts), "distinct_words": len(ranked), "top": top[:20]}


def stage_label(cfg: PipelineConfig) -> dict:
    report = json.loads((cfg.out / "crops" / "prepare_report.json").read_text())
    table = build_label_table(_descriptions(cfg, report["accepted_ids"]), cfg.lexicons())
    table.write_csv(cfg.out / "labels.csv")
    return {"rows": len(table.image_ids), "dropped": table.dropped, "positives": table.positive_counts}


def _label_view(cfg: PipelineConfig) -> DatasetView:
    return DatasetView.from_table(LabelTable.read_csv(cfg.out / "labels.csv"))


def stage_split(cfg: PipelineConfig) -> dict:
    full = _label_view(cfg)
    if len(full) == 0:
        raise PipelineError("label table is empty")
    try:
        train_v, val_v, test_v = stratified_split(full, cfg.split_spec())
    except ValueError as exc:
        raise PipelineError(str(exc)) from exc
    parts = {"train": train_v, "val": val_v, "test": test_v}
    write_manifests(cfg.out / "splits", parts, full)
    return {"sizes": {k: len(v) for k, v in parts.items()}}


def _views(cfg: PipelineConfig) -> dict[str, DatasetView]:
    full = _label_view(cfg)
    return {s: select(full, read_manifest(cfg.out / "splits" / f"{s}.txt")) for s in ("train", "val", "test")}


def _images(cfg: PipelineConfig, view: DatasetView, size: int) -> LabeledImages:
    return LabeledImages(load_crops(view.ids, cfg.out / "crops", size), view.labels, list(view.concepts), list(view.ids))


def pretrain_images(n: int, size: int, seed: int, prevalence: float):
    """Reverse faces rendered at corpus scale and downsampled like the crops, with clean glyph labels."""
    rng = np.random.default_rng(seed)
    images = np.zeros((n, size, size), dtype=np.float32)
    labels = np.zeros((n, len(synth.GLYPHS)), dtype=np.int64)
    for i in range(n):
        present, _ = synth.sample_concepts(rng, synth.GLYPHS, prevalence, 0.0)
        face = synth.render_reverse(int(rng.integers(58, 70)), present, rng)
        im = Image.fromarray(np.clip(np.round(face * 255), 0, 255).astype(np.uint8), mode="L")
        images[i] = np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
        labels[i] = [g in present for g in synth.GLYPHS]
    return images, labels


def pretrain_vit(cfg: PipelineConfig) -> tuple[ViTModel, dict]:
    p = cfg.raw["pretrain"]
    vcfg = cfg.vit_config(len(synth.GLYPHS))
    n = int(p["images"])
    images, labels = pretrain_images(n, vcfg.image_size, cfg.seed + 101, float(p["prevalence"]))
    n_val = max(1, n // 10)
    data = LabeledImages(images[n_val:], labels[n_val:], list(synth.GLYPHS))
    val = LabeledImages(images[:n_val], labels[:n_val], list(synth.GLYPHS))
    model = ViTModel(vcfg, seed=cfg.seed + 7)
    result = train(model, data, val, cfg.schedule(p, 11))
    model.load_state_dict(result.best.params)
    return model, result.best.stats


def stage_pretrain(cfg: PipelineConfig) -> dict:
    model, stats = pretrain_vit(cfg)
    ckpt = ModelCheckpoint(0, model.state_dict(), {"val": stats.get("val", {})}, {"kind": "vit", "config": model.config_dict(), "concepts": list(synth.GLYPHS)})
    save_checkpoint(ckpt, cfg.out / "models" / "pretrained-vit.ckpt")
    return {"glyphs": list(synth.GLYPHS), "val_accuracy": stats.get("val", {}).get("accuracy")}


def finetune_vit(cfg: PipelineConfig, pretrained: ViTModel, train_set: LabeledImages, val_set: LabeledImages, checkpoint_dir=None, log_path=None):
    model = replace_head(pretrained, len(train_set.concepts), seed=cfg.seed + 13)
    model.freeze_backbone()
    view = DatasetView(list(range(len(train_set))), list(train_set.concepts), train_set.labels)
    try:
        w = positive_weights(view)
    except ValueError as exc:
        raise PipelineError(str(exc)) from exc
    weights = np.array([w[c] for c in train_set.concepts])
    result = train(model, train_set, val_set, cfg.schedule(cfg.raw["train"]["vit"], 17), weights, checkpoint_dir, log_path)
    return model, result


def stage_train_vit(cfg: PipelineConfig) -> dict:
    views = _views(cfg)
    vcfg = cfg.vit_config(1)
    train_set = _images(cfg, views["train"], vcfg.image_size)
    val_set = _images(cfg, views["val"], vcfg.image_size)
    pretrained = build_model(load_checkpoint(cfg.out / "models" / "pretrained-vit.ckpt"))
    ck_dir = cfg.out / "models" / "vit"
    model, result = finetune_vit(cfg, pretrained, train_set, val_set, ck_dir, cfg.out / "logs" / "vit.csv")
    save_checkpoint(result.best, ck_dir / "best.ckpt")
    return {"epochs": len(result.checkpoints), "best_epoch": result.best.epoch, "concepts": train_set.concepts}


def train_cnn_concept(cfg: PipelineConfig, concept: str, train_view: DatasetView, val_set: LabeledImages, k: int, checkpoint_dir=None, log_path=None):
    sec = cfg.raw["train"]["cnn"]
    try:
        balanced = balance_binary(train_view, concept, sec.get("balance", "undersample"), seed=cfg.seed + 31 + k)
    except ValueError as exc:
        raise PipelineError(str(exc)) from exc
    ccfg = cfg.cnn_config()
    train_set = _images(cfg, balanced, ccfg.image_size)
    model = CnnModel(ccfg, seed=cfg.seed + 37 + k)
    j = val_set.concepts.index(concept)
    val_c = LabeledImages(val_set.images, val_set.labels[:, j : j + 1], [concept], val_set.ids)
    result = train(model, train_set, val_c, cfg.schedule(sec, 41 + k), None, checkpoint_dir, log_path)
    return model, result


def stage_train_cnn(cfg: PipelineConfig) -> dict:
    views = _views(cfg)
    ccfg = cfg.cnn_config()
    val_set = _images(cfg, views["val"], ccfg.image_size)
    out = {}
    for k, concept in enumerate(views["train"].concepts):
        ck_dir = cfg.out / "models" / "cnn" / concept
        _, result = train_cnn_concept(cfg, concept, views["train"], val_set, k, ck_dir, cfg.out / "logs" / f"cnn-{concept}.csv")
        save_checkpoint(result.best, ck_dir / "best.ckpt")
        out[concept] = {"epochs": len(result.checkpoints), "best_epoch": result.best.epoch}
    return {"concepts": out}


def _metrics_dict(m: dict[str, ConceptMetrics]) -> dict:
    return {c: v.as_dict() for c, v in m.items()}


def evaluate_models(cfg: PipelineConfig) -> dict:
    views = _views(cfg)
    threshold = float(cfg.raw["eval"]["threshold"])
    vit = build_model(load_checkpoint(cfg.out / "models" / "vit" / "best.ckpt"))
    vit_summary = read_summary(cfg, "train-vit")
    cnn_summary = read_summary(cfg, "train-cnn")
    result = {"vit": {}, "cnn": {}}
    sets = {s: _images(cfg, v, vit.config.image_size) for s, v in views.items()}
    for split, data in sets.items():
        result["vit"][split] = _metrics_dict(evaluate(vit, data, threshold))
    result["vit"]["epochs"] = {c: vit_summary["epochs"] for c in views["train"].concepts}
    ccfg = cfg.cnn_config()
    csets = sets if ccfg.image_size == vit.config.image_size else {s: _images(cfg, v, ccfg.image_size) for s, v in views.items()}
    result["cnn"]["epochs"] = {}
    for split in ("train", "val", "test"):
        result["cnn"][split] = {}
    for concept in views["train"].concepts:
        model = build_model(load_checkpoint(cfg.out / "models" / "cnn" / concept / "best.ckpt"))
        j = views["train"].concepts.index(concept)
        for split, data in csets.items():
            single = LabeledImages(data.images, data.labels[:, j : j + 1], [concept])
            result["cnn"][split].update(_metrics_dict(evaluate(model, single)))
        result["cnn"]["epochs"][concept] = cnn_summary["concepts"][concept]["epochs"]
    return result


def stage_eval(cfg: PipelineConfig) -> dict:
    result = evaluate_models(cfg)
    out = cfg.out / "metrics"
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return {"test_accuracy": {m: {c: v["accuracy"] for c, v in result[m]["test"].items()} for m in ("vit", "cnn")}}


def stage_saliency(cfg: PipelineConfig) -> dict:
    views = _views(cfg)
    hipe = cfg.hipe_config()
    n = int(cfg.raw["saliency"]["images"])
    out = cfg.out / "saliency"
    out.mkdir(parents=True, exist_ok=True)
    vit = build_model(load_checkpoint(cfg.out / "models" / "vit" / "best.ckpt"))
    test = views["test"]
    written = []
    for j, concept in enumerate(test.concepts):
        positives = [test.ids[i] for i in np.flatnonzero(test.labels[:, j] == 1)][:n]
        cnn = build_model(load_checkpoint(cfg.out / "models" / "cnn" / concept / "best.ckpt"))
        for image_id in positives:
            for tag, model, scorer in (("vit", vit, vit_scorer(vit, j)), ("cnn", cnn, cnn_scorer(cnn))):
                img = load_crops([image_id], cfg.out / "crops", model.config.image_size)[0]
                sal = attribute(scorer, img, hipe)
                stem = out / tag / f"{image_id}-{concept}-saliency"
                stem.parent.mkdir(exist_ok=True)
                save_overlay(stem.with_suffix(".png"), sal.grid, img, scale=4)
                save_raw(stem.with_suffix(".txt"), sal.grid)
                written.append({"image": image_id, "concept": concept, "model": tag, "calls": sal.calls})
    return {"maps": written}


def stage_report(cfg: PipelineConfig) -> dict:
    from .report import write_report

    result = json.loads((cfg.out / "metrics" / "eval.json").read_text())
    paths = write_report(result, cfg.out / "report", logs_dir=cfg.out / "logs")
    return {"files": [str(p.relative_to(cfg.out)) for p in paths]}


STAGE_FUNCS = {
    "prepare": stage_prepare,
    "mine": stage_mine,
    "label": stage_label,
    "split": stage_split,
    "pretrain": stage_pretrain,
    "train-vit": stage_train_vit,
    "train-cnn": stage_train_cnn,
    "eval": stage_eval,
    "saliency": stage_saliency,
    "report": stage_report,
}
