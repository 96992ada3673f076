import json
import shutil

import numpy as np
import pytest

from multibreath.cli import main
from multibreath.metrics import parse_metrics

FAST = ["--widths", "16,32,64", "--learning_rate", "0.003", "--batch_size", "16",
        "--mask_time_frames", "0", "--mask_freq_bins", "0"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--quiet", "synth", "--out", str(root / "w"), "--per-class", "4",
                 "--test-per-class", "2"]) == 0
    return root / "w"


@pytest.fixture(scope="module")
def fitted(work, tmp_path_factory):
    run = tmp_path_factory.mktemp("fit")
    assert main(["--quiet", "train", "--work", str(work), "--out", str(run), "--epochs", "30", *FAST]) == 0
    return run


class TestExitCodes:
    def test_no_command(self, capsys):
        assert main([]) == 1
        assert "missing command" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["fly"]) == 1

    def test_unknown_key_names_it(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--bogus-knob", "3"]) == 1
        assert "--bogus-knob" in capsys.readouterr().err

    def test_bad_value(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--lam", "lots"]) == 1
        assert "'lam'" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")]) == 1

    def test_missing_dataset(self, tmp_path, capsys):
        assert main(["--quiet", "prepare", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 2
        assert "absent" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"definitely not a checkpoint")
        assert main(["evaluate", "--checkpoint", str(bad), "--work", str(work), "--out", str(tmp_path)]) == 2
        assert "bad.ckpt" in capsys.readouterr().err

    def test_nonfinite_training_is_numerical(self, work, tmp_path, capsys):
        broken = tmp_path / "w"
        shutil.copytree(work, broken)
        specs = np.load(broken / "spectrograms.npy")
        specs[0, 0, 0] = np.nan
        np.save(broken / "spectrograms.npy", specs)
        assert main(["--quiet", "train", "--work", str(broken), "--out", str(tmp_path / "r"),
                     "--epochs", "1", "--widths", "4,8", "--batch_size", "64"]) == 3
        assert "numerical" in capsys.readouterr().err

    def test_gradcheck_single_seed(self, capsys):
        assert main(["gradcheck", "--seeds", "1"]) == 0
        assert "cases passed" in capsys.readouterr().out


def test_synth_layout(work):
    summary = json.loads((work / "summary.json").read_text())
    assert summary["train"]["cycles"] == {"Normal": 4, "Crackle": 4, "Wheeze": 4, "Crackle&Wheeze": 4}
    assert summary["test"]["total"] == 8
    lines = (work / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 24
    assert np.load(work / "spectrograms.npy", mmap_mode="r").shape == (24, 64, 256)


def test_train_outputs(fitted):
    rows = (fitted / "train_log.csv").read_text().splitlines()
    assert rows[0] == "epoch,mean_train_loss,lr_start,lr_end" and len(rows) == 31
    assert (fitted / "train_timing.csv").exists()
    assert float(rows[-1].split(",")[1]) < float(rows[1].split(",")[1])


def test_evaluate_self_consistency(work, fitted, tmp_path):
    # the fitted model has reached low loss on these very cycles
    assert main(["--quiet", "evaluate", "--checkpoint", str(fitted / "model.ckpt"), "--work", str(work),
                 "--split", "train", "--out", str(tmp_path)]) == 0
    metrics = parse_metrics((tmp_path / "metrics.txt").read_text())
    assert metrics["score"] > 0.95
    assert metrics["total"] == 16


def test_evaluate_test_split_with_plot(work, fitted, tmp_path):
    assert main(["--quiet", "evaluate", "--checkpoint", str(fitted / "model.ckpt"), "--work", str(work),
                 "--out", str(tmp_path), "--plots", "true"]) == 0
    metrics = parse_metrics((tmp_path / "metrics.txt").read_text())
    assert "score" in metrics and metrics["total"] == 8
    assert (tmp_path / "confusion.pgm").read_bytes().startswith(b"P5")


def test_config_echo_reproduces_run(work, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["--quiet", "train", "--work", str(work), "--out", str(first), "--epochs", "2",
                 "--widths", "4,8", "--seed", "5", "--lam", "0.3"]) == 0
    assert main(["--quiet", "train", "--work", str(work), "--out", str(second),
                 "--config", str(first / "config.json")]) == 0
    assert (first / "model.ckpt").read_bytes() == (second / "model.ckpt").read_bytes()
    assert (first / "train_log.csv").read_bytes() == (second / "train_log.csv").read_bytes()


def test_predict_per_cycle(work, fitted, tmp_path, capsys):
    wav = sorted((work / "audio").glob("*.wav"))[0]
    out = tmp_path / "pred.jsonl"
    assert main(["--quiet", "predict", "--checkpoint", str(fitted / "model.ckpt"), "--audio", str(wav),
                 "--annotations", str(wav.with_suffix(".txt")), "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == len(wav.with_suffix(".txt").read_text().splitlines())
    for r in rows:
        assert r["class"] in ("Normal", "Crackle", "Wheeze", "Crackle&Wheeze")
        assert 0 <= r["p_crackle"] <= 1 and 0 <= r["p_wheeze"] <= 1

    assert main(["--quiet", "predict", "--checkpoint", str(fitted / "model.ckpt"), "--audio", str(wav)]) == 0
    whole = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(whole) == 1 and whole[0]["start_s"] == 0.0
