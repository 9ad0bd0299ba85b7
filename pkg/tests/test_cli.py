import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from twostream.cli import RunManifest, config_hash, data_hash, main
from twostream.io import read_annotations
from twostream.training import TrainConfig


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Two tiny videos, a one-epoch single-stream model and its evaluation."""
    root = tmp_path_factory.mktemp("cli")
    train_spec = write(root / "train.toml", "[synth]\nn_frames = 200\nseed = 3\n")
    test_spec = write(root / "test.toml", "[synth]\nn_frames = 200\nseed = 4\n"
                      "anomaly = {kind = \"conspicuous\", fraction = 0.25, length = 50}\n")
    assert run("synth", "--spec", train_spec, "--out", root / "train").exit_code == 0
    assert run("synth", "--spec", test_spec, "--out", root / "test").exit_code == 0
    cfg = write(root / "cfg.toml", f"[train]\nkind = \"SingleStreamCAE\"\nepochs = 1\n"
                f"train_data = \"{root / 'train'}\"\nout_dir = \"{root / 'model'}\"\n")
    res = run("train", "--config", cfg)
    assert res.exit_code == 0, res.output
    res = run("evaluate", "--checkpoint", root / "model" / "model.ckpt", "--data", root / "test",
              "--target", "hang", "--out", root / "eval")
    assert res.exit_code == 0, res.output
    return root


def test_synth_missing_spec_names_the_path(tmp_path):
    res = run("synth", "--spec", tmp_path / "nope.toml", "--out", tmp_path / "o")
    assert res.exit_code != 0 and "nope.toml" in res.output


def test_synth_writes_frames_and_annotations(workdir):
    out = workdir / "test"
    assert (out / "frame_000000.pgm").exists() and (out / "frame_000199.pgm").exists()
    labels = read_annotations(out / "annotations.txt", 200)
    assert len(labels) == 200 and labels.count("hang") == 50


def test_synth_rerun_is_byte_identical(workdir, tmp_path):
    assert run("synth", "--spec", workdir / "test.toml", "--out", tmp_path / "again").exit_code == 0
    assert data_hash(tmp_path / "again") == data_hash(workdir / "test")


def test_synth_seed_flag_overrides_spec(workdir, tmp_path):
    assert run("synth", "--spec", workdir / "test.toml", "--out", tmp_path / "s", "--seed", 9).exit_code == 0
    assert data_hash(tmp_path / "s") != data_hash(workdir / "test")


def test_bad_synth_key_is_config_error(tmp_path):
    spec = write(tmp_path / "s.toml", "[synth]\nwobble = 3\n")
    res = run("synth", "--spec", spec, "--out", tmp_path / "o")
    assert res.exit_code == 2 and "wobble" in res.output


def test_manifest_hashes_are_recomputable(workdir):
    for sub in ("test", "model", "eval"):
        m = RunManifest.read(workdir / sub / "run.json")
        assert m.config_hash == config_hash(m.config)
    m = RunManifest.read(workdir / "test" / "run.json")
    assert m.data_hash == data_hash(workdir / "test")
    assert json.loads((workdir / "test" / "run.json").read_text())["run_id"] == m.run_id


def test_train_writes_checkpoint_and_log(workdir):
    rows = list(csv.DictReader(open(workdir / "model" / "train_log.csv")))
    assert len(rows) == 1 and np.isfinite(float(rows[0]["train_loss"]))
    assert (workdir / "model" / "model.ckpt").stat().st_size > 0


@pytest.mark.parametrize("line,field", [("epochs = 0", "epochs"), ("lr = -1.0", "lr"),
                                        ("batch_size = 0", "batch_size")])
def test_train_out_of_range_exits_2_with_field(tmp_path, line, field):
    cfg = write(tmp_path / "c.toml", f"[train]\nkind = \"TwoStreamCAE2D\"\n{line}\n")
    res = run("train", "--config", cfg)
    assert res.exit_code == 2 and field in res.output


def test_rae_defaults_from_a_minimal_config(tmp_path):
    import tomli
    cfg = write(tmp_path / "c.toml", "[train]\nkind = \"TwoStreamRAE3D\"\n")
    c = TrainConfig.from_dict(tomli.loads(cfg.read_text())["train"])
    assert (c.epochs, c.batch_size) == (120, 64)


def test_evaluate_outputs(workdir):
    summary = json.loads((workdir / "eval" / "summary.json").read_text())
    assert 0 <= summary["auc"] <= 1 and summary["target"] == "hang"
    rows = (workdir / "eval" / "trace.csv").read_text().splitlines()
    assert len(rows) == 1 + 25
    assert (workdir / "eval" / "regularity.svg").read_text().startswith("<svg")


def test_evaluate_single_class_exit_code(workdir, tmp_path):
    res = run("evaluate", "--checkpoint", workdir / "model" / "model.ckpt", "--data", workdir / "train",
              "--target", "hang", "--out", tmp_path)
    assert res.exit_code == 4 and "positive" in res.output


def test_evaluate_kind_mismatch_exit_3(workdir, tmp_path):
    res = run("evaluate", "--checkpoint", workdir / "model" / "model.ckpt", "--data", workdir / "test",
              "--target", "hang", "--out", tmp_path, "--kind", "TwoStreamCAE2D")
    assert res.exit_code == 3


def test_two_stream_checkpoint_on_gray_only_data_exit_3(workdir, tmp_path):
    from twostream.models import ModelKind, build, save_checkpoint
    _, store = build(ModelKind.TWO_STREAM_CAE2D)
    ckpt = save_checkpoint(tmp_path / "m.ckpt", ModelKind.TWO_STREAM_CAE2D, store)
    assert run("preprocess", "--data", workdir / "test", "--out", tmp_path / "s.npz", "--no-flow").exit_code == 0
    res = run("evaluate", "--checkpoint", ckpt, "--data", tmp_path / "s.npz", "--target", "hang",
              "--out", tmp_path / "e")
    assert res.exit_code == 3 and "flow" in res.output


def test_preprocessed_streams_evaluate_like_frames(workdir, tmp_path):
    assert run("preprocess", "--data", workdir / "test", "--out", tmp_path / "s.npz").exit_code == 0
    res = run("evaluate", "--checkpoint", workdir / "model" / "model.ckpt", "--data", tmp_path / "s.npz",
              "--target", "hang", "--out", tmp_path / "e")
    assert res.exit_code == 0
    a = json.loads((tmp_path / "e" / "summary.json").read_text())["auc"]
    assert a == json.loads((workdir / "eval" / "summary.json").read_text())["auc"]


def test_report_two_runs(workdir, tmp_path):
    res = run("report", "--run", workdir / "eval", "--run", workdir / "eval", "--out", tmp_path / "r.csv")
    assert res.exit_code == 0
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 2 and rows[0]["kind"] == "SingleStreamCAE"


def test_report_without_summary_fails(tmp_path):
    res = run("report", "--run", tmp_path, "--out", tmp_path / "r.csv")
    assert res.exit_code == 1 and "summary.json" in res.output
