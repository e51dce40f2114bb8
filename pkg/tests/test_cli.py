"""End-to-end CLI flows on a miniature dataset."""

import json

import pytest
import yaml

from apdnet.cli import main
from apdnet.phantom import load_dataset


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "phantom"
    rc = main(["phantom", "gen", "--out", str(out), "--volumes", "4",
               "--slices", "2", "--seed", "7"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump({
        "training": {
            "epochs": 1,
            "batch_size": 8,
            "network": {"base_width": 4, "depth": 2},
        },
        "test_fraction": 0.25,
    }))
    return path


def test_phantom_gen_writes_loadable_dataset(dataset_dir):
    samples = load_dataset(dataset_dir)
    assert len(samples) == 8
    assert (dataset_dir / "manifest.json").exists()
    assert (dataset_dir / "phantom_config.json").exists()


@pytest.fixture(scope="module")
def trained_run(dataset_dir, tiny_config_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "apdnet"
    rc = main(["train", "--data", str(dataset_dir), "--out", str(out),
               "--method", "apdnet", "--config", str(tiny_config_path),
               "--annotation-fraction", "1.0", "--seed", "0"])
    assert rc == 0
    return out


def test_train_outputs(trained_run):
    assert (trained_run / "checkpoint.pt").exists()
    assert (trained_run / "metrics.jsonl").exists()
    assert (trained_run / "split.json").exists()
    report = json.loads((trained_run / "eval.json").read_text())
    assert 0.0 <= report["dice_pathology_mean"] <= 1.0


def test_train_baseline(dataset_dir, tiny_config_path, tmp_path):
    out = tmp_path / "baseline"
    rc = main(["train", "--data", str(dataset_dir), "--out", str(out),
               "--method", "unet_unmasked", "--config", str(tiny_config_path),
               "--seed", "0"])
    assert rc == 0
    assert (out / "checkpoint.pt").exists()


def test_eval_command(trained_run, dataset_dir, tmp_path):
    report_path = tmp_path / "eval.json"
    rc = main(["eval", "--checkpoint", str(trained_run / "checkpoint.pt"),
               "--data", str(dataset_dir), "--split", str(trained_run / "split.json"),
               "--out", str(report_path)])
    assert rc == 0
    report = json.loads(report_path.read_text())
    split = json.loads((trained_run / "split.json").read_text())
    assert len(report["volumes"]) == len(split["test_volumes"])


def test_visualize_command(trained_run, dataset_dir, tmp_path):
    out = tmp_path / "vis"
    rc = main(["visualize", "--checkpoint", str(trained_run / "checkpoint.pt"),
               "--data", str(dataset_dir), "--out", str(out), "--count", "1"])
    assert rc == 0
    assert list(out.glob("panel_*.png")) and list(out.glob("heatmap_*.png"))


def test_sweep_command(dataset_dir, tiny_config_path, tmp_path):
    suite_path = tmp_path / "suite.yaml"
    suite_path.write_text(yaml.safe_dump({
        "methods": ["unet_unmasked"],
        "annotation_fractions": [1.0],
        "seeds": [0],
        "test_fraction": 0.25,
    }))
    out = tmp_path / "sweep"
    rc = main(["sweep", "--suite", str(suite_path), "--data", str(dataset_dir),
               "--config", str(tiny_config_path), "--out", str(out)])
    assert rc == 0
    assert (out / "results.csv").exists()
    rows = json.loads((out / "summary.json").read_text())
    assert rows and rows[0]["method"] == "unet_unmasked"
