import hashlib
import json

import numpy as np
import pytest

from leukonet.checkpoint import load_checkpoint
from leukonet.cli import main
from leukonet.config import echo_config, effective_sections, make_stage_config, make_train_config, read_config
from leukonet.data import fold_violations, read_folds, read_image, read_manifest
from leukonet.exceptions import ConfigError
from leukonet.metrics import MetricsReport
from leukonet.models import StageConfig
from leukonet.training import TrainConfig


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# config files

def test_config_round_trip(tmp_path):
    stage = StageConfig("S2C", activation="prelu", input_size=64)
    train = make_train_config({}, seed=3, augment_mode="full", learning_rate=0.05, class_weight=(1.0, 2.0))
    path = echo_config(tmp_path / "c.ini", effective_sections(stage, train, run={"seed": 3}))
    cfg = read_config(path)
    assert make_stage_config(cfg) == stage
    assert make_train_config(cfg, seed=3, augment_mode="full") == train


def test_flags_override_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlearning_rate = 0.5\nbatch_size = 4\n[augment]\nshear_degrees = -10, 10\n")
    cfg = read_config(p)
    t = make_train_config(cfg, seed=0, learning_rate=0.1, batch_size=None)
    assert (t.learning_rate, t.batch_size, t.augment.shear_degrees) == (0.1, 4, (-10.0, 10.0))


@pytest.mark.parametrize(
    "text, match",
    [
        ("[model]\nx = 1\n", "unknown config section"),
        ("[train]\nlr = 1\n", "unknown key"),
        ("[train]\nbatch_size = many\n", "cannot parse"),
        ("[stage]\nbilinear_l2 = maybe\n", "cannot parse"),
        ("no section header\n", "does not parse"),
    ],
)
def test_bad_config_files(tmp_path, text, match):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        read_config(p)


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        make_stage_config({"dct": {"energy_fraction": 1.5}})
    with pytest.raises(ConfigError):
        make_train_config({"train": {"momentum": 1.0}}, seed=0)


# command line

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> split -> train s1 / s2c -> train-hybrid s3c, all tiny."""
    root = tmp_path_factory.mktemp("cli")
    small = ["--epochs", 2, "--batch-size", 8, "--precision", "float64", "--input-size", 32]
    assert main(["--seed", "5", "--out", str(root / "data"), "synth", "--subjects", "4", "--cells", "6", "--size", "32"]) == 0
    assert main(["split", "--manifest", str(root / "data/manifest.csv"), "--seed", "1", "--out", str(root / "split")]) == 0
    common = ["--manifest", root / "data/manifest.csv", "--folds", root / "split/folds.csv"]
    for stage in ("s1", "s2c"):
        argv = ["train", "--stage", stage, *common, *small, "--out", root / stage]
        assert main([str(a) for a in argv]) == 0
    argv = ["train-hybrid", "--stage", "s3c", *common, "--epochs", 2, "--batch-size", 8, "--precision", "float64",
            "--ckpt", root / "s1/best.ckpt", root / "s2c/best.ckpt", "--out", root / "s3c"]
    assert main([str(a) for a in argv]) == 0
    return root


def test_synth_twice_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "synth", "--subjects", 2, "--cells", 3, "--size", 32, "--seed", 7, "--out", tmp_path / name)
        assert code == 0 and json.loads(out)["images"] == 2 * 3 * 2 + 2 * 3
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_split_passes_invariants(workspace):
    manifest = read_manifest(workspace / "data/manifest.csv")
    folds = read_folds(workspace / "split/folds.csv", 4)
    assert fold_violations(manifest, folds) == []
    assert (workspace / "split/folds.csv").read_text().startswith("subject_id,fold\n")


def test_train_writes_artifacts(workspace):
    run_dir = workspace / "s1"
    assert {p.name for p in run_dir.iterdir()} >= {"best.ckpt", "metrics.log", "config.ini"}
    lines = (run_dir / "metrics.log").read_text().splitlines()
    assert lines[0] == "epoch,split,acc,f1_n,f1_c,loss" and len(lines) == 1 + 2 * 2
    ckpt = load_checkpoint(run_dir / "best.ckpt")
    assert ckpt.stage == "S1" and ckpt.meta["precision"] == "float64"


def test_echoed_config_reproduces_run(workspace, tmp_path, capsys):
    cfg = read_config(workspace / "s1/config.ini")
    assert make_stage_config(cfg) == load_checkpoint(workspace / "s1/best.ckpt").config
    code, _, _ = run(
        capsys, "train", "--stage", "s1", "--config", workspace / "s1/config.ini",
        "--manifest", workspace / "data/manifest.csv", "--folds", workspace / "split/folds.csv", "--out", tmp_path,
    )
    assert code == 0
    assert (tmp_path / "metrics.log").read_bytes() == (workspace / "s1/metrics.log").read_bytes()


def test_train_hybrid_audit(workspace):
    audit = json.loads((workspace / "s3c/freeze_audit.json").read_text())
    assert audit["first_before"] == audit["first_after"]
    assert audit["second_before"] == audit["second_after"]
    assert audit["fusion_before"] != audit["fusion_after"]


@pytest.mark.parametrize("split", ["test", "val"])
def test_eval_report_is_self_consistent(workspace, tmp_path, capsys, split):
    code, out, _ = run(
        capsys, "eval", "--stage", "s3c", "--ckpt", workspace / "s3c/best.ckpt", "--split", split,
        "--manifest", workspace / "data/manifest.csv", "--folds", workspace / "split/folds.csv", "--out", tmp_path,
    )
    assert code == 0
    text = (tmp_path / f"metrics_{split}.txt").read_text()
    fields = MetricsReport.parse_text(text)
    tp, fp, tn, fn = (int(fields[f"confusion.{k}"]) for k in ("tp", "fp", "tn", "fn"))
    assert float(fields["accuracy"]) == round(100 * (tp + tn) / (tp + fp + tn + fn), 2)
    assert int(fields["n"]) == tp + fp + tn + fn == json.loads(out)["n"]


def test_eval_val_matches_training_record(workspace, tmp_path, capsys):
    run(capsys, "eval", "--stage", "s1", "--ckpt", workspace / "s1/best.ckpt", "--split", "val",
        "--manifest", workspace / "data/manifest.csv", "--folds", workspace / "split/folds.csv", "--out", tmp_path)
    report = MetricsReport.from_text((tmp_path / "metrics_val.txt").read_text())
    assert report.accuracy == load_checkpoint(workspace / "s1/best.ckpt").meta["val_accuracy"]


def test_preprocess_centres_on_canvas(workspace, tmp_path, capsys):
    before = tree_digest(workspace / "data")
    code, _, _ = run(capsys, "preprocess", "--manifest", workspace / "data/manifest.csv", "--canvas", 64, "--out", tmp_path)
    assert code == 0
    assert tree_digest(workspace / "data") == before
    m = read_manifest(tmp_path / "manifest.csv")
    img = read_image(m.resolve(m.records[0]))
    assert img.shape == (3, 64, 64) and (img[:, :8] == 255).all()


def test_inspect_dct_writes_planes(workspace, tmp_path, capsys):
    image = next((workspace / "data/images").rglob("*.png"))
    code, _, _ = run(capsys, "inspect-dct", "--image", image, "--ckpt", workspace / "s1/best.ckpt", "--out", tmp_path)
    assert code == 0
    planes = np.load(tmp_path / "planes.npz")
    assert planes["dct"].shape == (3, 32, 32)
    assert {f"{n}_{c}.png" for n in ("od", "sd", "dct") for c in range(3)} <= {p.name for p in tmp_path.iterdir()}


def test_exit_code_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--bogus", "--out", tmp_path)
    assert code == 2 and err.startswith("error: code=2 kind=ConfigError")
    assert len(err.strip().splitlines()) == 1


def test_exit_code_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "split", "--manifest", tmp_path / "nope.csv", "--out", tmp_path)
    assert code == 3 and "kind=DataError" in err


def test_exit_code_divergence(workspace, tmp_path, capsys):
    code, _, err = run(
        capsys, "train", "--stage", "s1", "--manifest", workspace / "data/manifest.csv",
        "--folds", workspace / "split/folds.csv", "--input-size", 32, "--lr", 1e30, "--epochs", 1,
        "--batch-size", 8, "--out", tmp_path,
    )
    assert code == 4 and "kind=DivergenceError" in err and "learning rate" in err


def test_eval_stage_mismatch(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--stage", "s2", "--ckpt", workspace / "s1/best.ckpt",
                       "--manifest", workspace / "data/manifest.csv", "--out", tmp_path)
    assert code == 2 and "does not match" in err


def test_hybrid_with_swapped_checkpoints(workspace, tmp_path, capsys):
    code, _, err = run(
        capsys, "train-hybrid", "--stage", "s3c", "--manifest", workspace / "data/manifest.csv",
        "--folds", workspace / "split/folds.csv", "--ckpt", workspace / "s2c/best.ckpt", workspace / "s1/best.ckpt",
        "--out", tmp_path,
    )
    assert code == 2 and "S1 and S2C" in err
