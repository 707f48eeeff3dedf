"""The thirteen acceptance criteria, one test each, at their stated tolerances.

Each test prints a ``PASS criterion N: ...`` or ``FAIL criterion N: ...`` line;
the lines are gathered again at the end of the pytest run.
"""

import hashlib
import json
import time

import numpy as np
import yaml

import grad_suite
from gradcheck import check
from pipeline_helpers import small_project
from test_dataset import FIXTURE, OPTIMA, _view
from test_saliency import HALF, bright_quadrant_image, level0_oracle, quadrant_brightness, quadrant_contrast, quadrant_mass
from test_segment import GOLDEN, P, _load, _outcome_dict

from numis import cli
from numis import tensor as T
from numis.checkpoint import ModelCheckpoint, build_model, load_checkpoint, save_checkpoint
from numis.cnn import CnnModel, detect_dying_relu, tiny_config
from numis.dataset import SplitSpec, stratified_split
from numis.metrics import concept_metrics
from numis.saliency import HipeConfig, attribute
from numis.segment import Accepted, segment
from numis.synth import overfit_set
from numis.tensor import Tensor
from numis.train import EarlyStopping, LabeledImages, Schedule, SgdMomentum, bce_loss, cross_entropy, train
from numis.vit import ViTConfig, ViTModel, freeze_backbone, patchify

TINY_VIT = ViTConfig(image_size=32, patch_size=8, depth=2, heads=2, d_model=32, d_ff=64, num_labels=2)


def test_criterion_01_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, (fn, arrays) in grad_suite.cases().items():
        try:
            worst[name] = check(fn, arrays)
        except AssertionError:
            worst[name] = float("inf")
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-3 and elapsed < 60
    verdict(1, ok, f"{len(worst)} ops/blocks, max rel error {err:.2e} ({name}), {elapsed:.1f}s")


def test_criterion_02_attention_invariants(verdict):
    rng = np.random.default_rng(2)
    worst_sum = worst_n1 = worst_uniform = 0.0
    for _ in range(1000):
        n, dk, dv = (int(x) for x in rng.integers(1, 7, 3))
        batch = int(rng.integers(1, 4))
        q, k, v = (rng.normal(scale=3, size=(batch, n, d)).astype(np.float32) for d in (dk, dk, dv))
        _, w = T.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), return_weights=True)
        worst_sum = max(worst_sum, float(np.abs(w.data.astype(np.float64).sum(axis=-1) - 1).max()))
        one = T.scaled_dot_attention(Tensor(q[:, :1]), Tensor(k[:, :1]), Tensor(v[:, :1]))
        worst_n1 = max(worst_n1, float(np.abs(one.data - v[:, :1]).max()))
        flat, wz = T.scaled_dot_attention(Tensor(np.zeros_like(q)), Tensor(k), Tensor(v), return_weights=True)
        worst_uniform = max(
            worst_uniform,
            float(np.abs(wz.data - 1.0 / n).max()),
            float(np.abs(flat.data - v.mean(axis=1, keepdims=True)).max()),
        )
    ok = worst_sum <= 1e-6 and worst_n1 <= 1e-6 and worst_uniform <= 1e-6
    verdict(2, ok, f"1000 trials, |row sum - 1| <= {worst_sum:.1e}, n=1 dev {worst_n1:.1e}, zero-logit dev {worst_uniform:.1e}")


def _backbone_digest(model):
    h = hashlib.sha256()
    for n in model.params:
        if n not in model.head_names:
            h.update(model.params[n].data.tobytes())
    return h.hexdigest()


def test_criterion_03_vit_mechanism(verdict):
    law = all(
        patchify(np.zeros((s, s)), p).shape[0] == (s // p) * (s // p) == ViTConfig(image_size=s, patch_size=p, d_model=4, heads=1).num_patches
        for s, p in [(224, 16), (32, 8), (32, 4), (12, 3), (7, 7)]
    )
    model = ViTModel(TINY_VIT, seed=3)
    for name, p in model.params.items():
        if name.startswith("blocks.0.") and ("attn." in name or "ffn." in name):
            p.data[...] = 0
    x = Tensor(np.random.default_rng(3).normal(size=(2, TINY_VIT.num_patches + 1, TINY_VIT.d_model)).astype(np.float32))
    identity = np.array_equal(model.encoder_block(x, 0).data, x.data)

    model = ViTModel(TINY_VIT, seed=4)
    freeze_backbone(model)
    before = _backbone_digest(model)
    head_before = model.params["head.weight"].data.copy()
    images, labels, _ = overfit_set()
    opt = SgdMomentum(0.05)
    rng = np.random.default_rng(4)
    for _ in range(50):
        idx = rng.choice(20, 4, replace=False)
        model.zero_grad()
        bce_loss(T.sigmoid(model.forward(images[idx])), labels[idx]).backward()
        opt.step(model.named_parameters())
    frozen = _backbone_digest(model) == before and not np.array_equal(head_before, model.params["head.weight"].data)
    verdict(3, law and identity and frozen, f"patch law {law}, zero block identity {identity}, backbone bytes unchanged over 50 steps {frozen}")


def _first_reaching(result, target=0.95):
    accs = [c.stats["train"]["accuracy"] for c in result.checkpoints]
    return next((i + 1 for i, a in enumerate(accs) if a >= target), None)


def test_criterion_04_desk_scale_overfit(verdict):
    t0 = time.perf_counter()
    images, labels, concepts = overfit_set()
    vit = train(ViTModel(TINY_VIT, seed=0), LabeledImages(images, labels, concepts), None, Schedule(lr=1e-2, epochs=200, batch_size=4))
    vit_epoch = _first_reaching(vit)
    cnn_epochs = []
    for k, concept in enumerate(concepts):
        data = LabeledImages(images, labels[:, k : k + 1], [concept])
        cnn_epochs.append(_first_reaching(train(CnnModel(tiny_config(), seed=0), data, None, Schedule(lr=1e-3, epochs=300, batch_size=4))))
    elapsed = time.perf_counter() - t0
    ok = vit_epoch is not None and all(e is not None for e in cnn_epochs) and elapsed < 300
    verdict(4, ok, f"ViT >=0.95 at epoch {vit_epoch}/200, CNN {dict(zip(concepts, cnn_epochs))}/300, {elapsed:.0f}s")


def test_criterion_05_generalization_analogue(verdict, tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--images", "600", "--seed", "0"]) == 0
    cfg = str(tmp_path / "numis.yaml")
    t0 = time.perf_counter()
    for stage in ("prepare", "label", "split", "pretrain", "train-vit", "train-cnn", "eval"):
        assert cli.main([stage, "--config", cfg]) == 0, stage
    elapsed = time.perf_counter() - t0
    result = json.loads((tmp_path / "out" / "metrics" / "eval.json").read_text())
    acc = {m: {c: v["accuracy"] for c, v in result[m]["test"].items()} for m in ("vit", "cnn")}
    mean = {m: float(np.mean(list(a.values()))) for m, a in acc.items()}
    ok = mean["vit"] >= mean["cnn"] and min(mean.values()) > 0.75 and elapsed < 900
    detail = ", ".join(f"{m} {mean[m]:.3f} {{" + ", ".join(f"{c} {a:.3f}" for c, a in acc[m].items()) + "}" for m in acc)
    verdict(5, ok, f"mean test accuracy {detail}, {elapsed:.0f}s")


def test_criterion_06_segmenter(verdict):
    mismatches = [name for name, expected in GOLDEN.items() if _outcome_dict(segment(_load(name), P)) != expected]
    shifted_ok = 0
    accepted = [n for n, e in GOLDEN.items() if e["accepted"]]
    for name in accepted:
        img = _load(name)
        base = segment(img, P)
        for dx in (-5, 5):
            moved_img = np.roll(img, dx, axis=1)
            if dx > 0:
                moved_img[:, :dx] = img[:, :1].mean(axis=0, keepdims=True).astype(np.uint8)
            else:
                moved_img[:, dx:] = img[:, -1:].mean(axis=0, keepdims=True).astype(np.uint8)
            moved = segment(moved_img, P)
            shifted_ok += (
                isinstance(moved, Accepted)
                and moved.reverse_box == base.reverse_box.shifted(dx=dx)
                and moved.obverse_box == base.obverse_box.shifted(dx=dx)
            )
    ok = not mismatches and shifted_ok == 2 * len(accepted)
    verdict(6, ok, f"{len(GOLDEN) - len(mismatches)}/{len(GOLDEN)} golden decisions and boxes, {shifted_ok}/{2 * len(accepted)} 5px shifts consistent")


def test_criterion_07_stratification(verdict):
    close = 0
    for seed in range(100):
        parts = dict(zip(("train", "val", "test"), stratified_split(_view(FIXTURE), SplitSpec(seed=seed))))
        ours = {k: v.labels.sum(axis=0).tolist() for k, v in parts.items()}
        close += any(all(abs(ours[k][j] - opt[k][j]) <= 1 for k in ours for j in range(2)) for opt in OPTIMA)
    props = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        labels = (rng.random((int(rng.integers(20, 200)), 3)) < rng.uniform(0.1, 0.6, 3)).astype(int)
        view = _view(labels)
        a, b = stratified_split(view, SplitSpec(seed=seed)), stratified_split(view, SplitSpec(seed=seed))
        ids = [i for part in a for i in part.ids]
        props += sorted(ids) == sorted(view.ids) and len(set(ids)) == len(ids) and [p.ids for p in a] == [p.ids for p in b]
    verdict(7, close == 100 and props == 100, f"fixture within +-1 of optimum for {close}/100 seeds, partition+determinism {props}/100 seeds")


def test_criterion_08_loss_and_metric_oracles(verdict):
    rng = np.random.default_rng(8)
    bce_err = ce_err = 0.0
    for _ in range(500):
        n, c = int(rng.integers(1, 8)), int(rng.integers(1, 5))
        p = rng.uniform(0, 1, (n, c))
        y = rng.integers(0, 2, (n, c))
        w = rng.uniform(0.2, 5, c)
        pc = np.clip(p, 1e-7, 1 - 1e-7)
        direct = -np.mean(w * y * np.log(pc) + (1 - y) * np.log(1 - pc))
        bce_err = max(bce_err, abs(float(bce_loss(Tensor(p), y, w).data) - direct))
        z = rng.normal(scale=4, size=(n, 2))
        cls = rng.integers(0, 2, n)
        direct = np.mean([np.log(np.exp(r).sum()) - r[k] for r, k in zip(z, cls)])
        ce_err = max(ce_err, abs(float(cross_entropy(Tensor(z), cls).data) - direct))
    exact = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        pred, actual = r.integers(0, 2, 50), r.integers(0, 2, 50)
        cm = concept_metrics(pred[:, None], actual[:, None], ["c"])["c"].confusion
        counts = (
            int(sum(p and a for p, a in zip(pred, actual))),
            int(sum(p and not a for p, a in zip(pred, actual))),
            int(sum(not p and not a for p, a in zip(pred, actual))),
            int(sum(not p and a for p, a in zip(pred, actual))),
        )
        exact += (cm.tp, cm.fp, cm.tn, cm.fn) == counts
    ok = bce_err <= 1e-6 and ce_err <= 1e-6 and exact == 100
    verdict(8, ok, f"BCE max dev {bce_err:.1e}, CE max dev {ce_err:.1e}, {exact}/100 metric recounts exact")


def test_criterion_09_early_stopping(verdict, tmp_path):
    losses = [1.0 / (e + 1) for e in range(10)] + [0.1] * 100
    stopper = EarlyStopping(30)
    stopped = next(e for e, loss in enumerate(losses) if stopper.update(loss))
    images, labels, concepts = overfit_set()
    tr = LabeledImages(images[:12], labels[:12, :1], concepts[:1], [f"t{i}" for i in range(12)])
    va = LabeledImages(images[12:], labels[12:, :1], concepts[:1], [f"v{i}" for i in range(8)])
    res = train(CnnModel(tiny_config(), seed=1), tr, va, Schedule(lr=0.0, epochs=100, patience=30, batch_size=4))
    ok = stopped == 39 and len(res.checkpoints) == 31
    verdict(9, ok, f"scripted plateau from epoch 9 stops at epoch {stopped}; flat training loop stops after {len(res.checkpoints)} epochs")


def test_criterion_10_saliency(verdict):
    zero = not attribute(lambda im: 0.25, bright_quadrant_image()).grid.any()
    literal = quadrant_mass(attribute(quadrant_brightness, bright_quadrant_image()))
    contrast = quadrant_mass(attribute(quadrant_contrast, bright_quadrant_image()))
    rng = np.random.default_rng(10)
    within = True
    for depth in (1, 2, 3, 4):
        for grid in (2, 3, 4):
            cfg = HipeConfig(max_depth=depth, initial_grid=grid, refinement_threshold=float(rng.choice([0.0, 0.5])))
            calls = [0]
            weights = rng.normal(size=(32, 32))

            def scorer(im, weights=weights):
                calls[0] += 1
                return float(np.tanh((im * weights).sum() / 32))

            attribute(scorer, rng.random((32, 32)).astype(np.float32), cfg)
            within &= calls[0] <= cfg.call_bound()
    cfg = HipeConfig(max_depth=1)
    img = bright_quadrant_image(5)
    degenerate = np.array_equal(attribute(quadrant_brightness, img, cfg).raw, level0_oracle(quadrant_brightness, img, cfg))
    ok = zero and literal >= 0.8 and within and degenerate
    verdict(
        10,
        ok,
        f"constant model zero map {zero}; mean-brightness quadrant model mass {literal:.3f} (need >= 0.8; "
        f"contrast quadrant model {contrast:.3f}); call bound held {within}; depth-1 exact {degenerate}",
    )


def test_criterion_11_dying_relu(verdict):
    dead = CnnModel(tiny_config(), seed=4)
    for name, p in dead.params.items():
        if name.endswith(".bias") and not name.startswith("out."):
            p.data[...] = -1e4
    probe = np.random.default_rng(11).random((16, 32, 32))
    report = detect_dying_relu(dead, probe)
    all_dead = all(l.flagged and l.dead_fraction >= 0.99 for l in report.layers)
    healthy = detect_dying_relu(CnnModel(tiny_config(), seed=5), probe)
    fractions = ", ".join(f"{l.layer} {l.dead_fraction:.2f}" for l in healthy.layers)
    verdict(11, all_dead and not healthy.any_flagged, f"forced-dead flagged on all {len(report.layers)} layers {all_dead}; healthy init dead fractions {fractions}")


def test_criterion_12_checkpoint_round_trip(verdict, tmp_path):
    ok_bytes = ok_logits = True
    batch = np.random.default_rng(12).random((4, 32, 32)).astype(np.float32)
    for model in (ViTModel(TINY_VIT, seed=12), CnnModel(tiny_config(), seed=12)):
        ck = ModelCheckpoint(3, model.state_dict(), {"val": {"loss": 0.5}}, {"kind": model.kind, "config": model.config_dict()})
        a = save_checkpoint(ck, tmp_path / f"{model.kind}-a.ckpt")
        b = save_checkpoint(load_checkpoint(a), tmp_path / f"{model.kind}-b.ckpt")
        ok_bytes &= a.read_bytes() == b.read_bytes()
        ok_logits &= np.array_equal(build_model(load_checkpoint(b)).forward(batch).data, model.forward(batch).data)
    verdict(12, ok_bytes and ok_logits, f"save-load-save byte identical {ok_bytes}; logits identical after reload {ok_logits}")


def test_criterion_13_end_to_end_determinism(verdict, tmp_path):
    digests = []
    for run in ("a", "b"):
        cfg = small_project(tmp_path / run, images=60, seed=5)
        assert cli.main(["all", "--config", str(cfg)]) == 0
        report = tmp_path / run / "out" / "report"
        digests.append(
            (
                (report / "metrics.csv").read_bytes(),
                (tmp_path / run / "out" / "metrics" / "eval.json").read_bytes(),
                yaml.safe_load(cfg.read_text())["seed"],
            )
        )
    same = digests[0] == digests[1]
    verdict(13, same, f"two seeded full runs give identical metrics.csv and eval.json: {same}")
