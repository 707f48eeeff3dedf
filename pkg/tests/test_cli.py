import csv
import json

import pytest
import yaml

from numis import cli, pipeline
from pipeline_helpers import small_project


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    """One small project run through every stage."""
    cfg = small_project(tmp_path_factory.mktemp("full"))
    assert run("all", "--config", cfg) == 0
    return cfg


def test_missing_prerequisite_exits_2(tmp_path, capsys):
    cfg = small_project(tmp_path, images=12)
    assert run("split", "--config", cfg) == 2
    err = capsys.readouterr().err
    assert "stage 'split' needs the output of 'label'" in err and "numis label" in err


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run("train-vit") == 1
    assert run("bogus", "--config", "x.yaml") == 1
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"corpus": {"input_dir": "corpus"}}))
    assert run("prepare", "--config", cfg) == 1
    assert "seed" in capsys.readouterr().err
    cfg.write_text(yaml.safe_dump({"seed": 1, "unknown_section": {}}))
    assert run("prepare", "--config", cfg) == 1


def test_seed_flag_substitutes_for_config_seed(tmp_path):
    cfg = tmp_path / "c.yaml"
    (tmp_path / "corpus").mkdir()
    cfg.write_text(yaml.safe_dump({"corpus": {"input_dir": "corpus"}}))
    assert run("prepare", "--config", cfg, "--seed", 3) == 0


def test_missing_corpus_exits_2(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"seed": 0, "corpus": {"input_dir": "nowhere"}}))
    assert run("prepare", "--config", cfg) == 2


def test_synth_rejects_bad_arguments(tmp_path):
    assert run("synth", "--out", tmp_path, "--noise", 2) == 1


def test_rerun_is_a_no_op_and_force_reruns(tmp_path, capsys):
    cfg = small_project(tmp_path, images=12)
    assert run("prepare", "--config", cfg) == 0
    capsys.readouterr()
    assert run("prepare", "--config", cfg) == 0
    assert json.loads(capsys.readouterr().out)["skipped"] is True
    assert run("prepare", "--config", cfg, "--force") == 0
    assert "skipped" not in json.loads(capsys.readouterr().out)


def test_changed_config_invalidates_stage(tmp_path, capsys):
    cfg = small_project(tmp_path, images=12)
    assert run("prepare", "--config", cfg) == 0
    data = yaml.safe_load(cfg.read_text())
    data["segmentation"] = {"background_tolerance": 30}
    cfg.write_text(yaml.safe_dump(data))
    capsys.readouterr()
    assert run("prepare", "--config", cfg) == 0
    assert "skipped" not in json.loads(capsys.readouterr().out)


def test_full_run_outputs(finished):
    out = finished.parent / "out"
    for stage in pipeline.STAGES:
        assert (out / "stages" / f"{stage}.json").is_file()
    rows = list(csv.reader((out / "report" / "metrics.csv").open()))
    assert rows[0] == ["model", "statistic", "eagle", "horse", "shield"]
    stats = [r[1] for r in rows[1:] if r[0] == "ViT"]
    assert stats == [
        "Number of epochs",
        "Training accuracy",
        "Validation accuracy",
        "Validation precision",
        "Validation recall",
        "Validation F1",
        "Test accuracy",
        "Test precision",
        "Test recall",
        "Test F1",
    ]
    assert {r[0] for r in rows[1:]} == {"ViT", "CNN"}
    for name in ("metrics.txt", "test_accuracy.png", "loss_curves.png"):
        assert (out / "report" / name).stat().st_size > 0
    assert (out / "models" / "vit" / "best.ckpt").is_file()
    assert len(list((out / "models" / "cnn").glob("*/best.ckpt"))) == 3
    pngs = sorted((out / "saliency" / "vit").glob("*-saliency.png"))
    assert pngs and all((p.with_suffix(".txt")).is_file() for p in pngs)
    assert (out / "concepts.csv").read_text().startswith("word,frequency\n")


def test_eval_json_shape(finished):
    result = json.loads((finished.parent / "out" / "metrics" / "eval.json").read_text())
    for model in ("vit", "cnn"):
        for split in ("train", "val", "test"):
            for concept, m in result[model][split].items():
                assert m["tp"] + m["fp"] + m["tn"] + m["fn"] > 0
                assert 0 <= m["accuracy"] <= 1


def test_second_all_run_skips_everything(finished, capsys):
    capsys.readouterr()
    assert run("all", "--config", finished) == 0
    summary = json.loads(capsys.readouterr().out)
    assert all(s.get("skipped") for s in summary.values())
