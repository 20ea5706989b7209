import hashlib
import json

import numpy as np
import pytest

from painattn import cli
from painattn.autograd import GradCheckReport
from painattn.errors import NumericError
from painattn.synth import read_dataset


def run(*argv):
    return cli.main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.bin"
    assert run("synth", "--subjects", 5, "--seed", 7, "-o", path) == 0
    return path


FAST = ("--model", "mini", "--epochs", 1, "--batch-size", 32)


def test_synth_counts_and_is_reproducible(dataset, tmp_path, capsys):
    windows = read_dataset(dataset)
    assert len(windows) == 500
    assert sorted({w.subject_id for w in windows}) == [0, 1, 2, 3, 4]
    again = tmp_path / "again.bin"
    assert run("synth", "--subjects", 5, "--seed", 7, "-o", again) == 0
    assert again.read_bytes() == dataset.read_bytes()
    assert "500 windows" in capsys.readouterr().out


def test_synth_csv_matches_binary(dataset, tmp_path):
    out = tmp_path / "d.csv"
    assert run("synth", "--subjects", 5, "--seed", 7, "-o", out) == 0
    assert all(a.same_as(b) for a, b in zip(read_dataset(out), read_dataset(dataset)))


def test_usage_errors(tmp_path, capsys):
    assert run("synth", "--subjects", 0, "-o", tmp_path / "x.bin") == 1
    assert "--subjects" in capsys.readouterr().err
    assert run("synth") == 1  # no --out
    assert run("bogus") == 1
    assert run("loocv", "--task", "t0t9", "--data", tmp_path / "x.bin") == 1
    assert "--task" in capsys.readouterr().err


def test_io_errors(dataset, tmp_path, capsys):
    assert run("synth", "--subjects", 1, "-o", tmp_path / "missing" / "dir" / "x.bin") == 2
    assert run("loocv", "--data", tmp_path / "nope.bin") == 2
    assert "nope.bin" in capsys.readouterr().err
    broken = tmp_path / "broken.bin"
    blob = bytearray(dataset.read_bytes())
    blob[100] ^= 0xFF
    broken.write_bytes(bytes(blob))
    assert run("loocv", "--data", broken, *FAST) == 2
    assert "broken.bin" in capsys.readouterr().err


def test_loocv_manifest(dataset, tmp_path):
    before = sha(dataset)
    out = tmp_path / "run.json"
    assert run("loocv", "--task", "t0t4", "--data", dataset, "--seed", 7, "-o", out, *FAST) == 0
    manifest = json.loads(out.read_text())
    assert [f["subject"] for f in manifest["folds"]] == [0, 1, 2, 3, 4]
    assert manifest["data_sha256"] == before
    assert manifest["seed"] == 7 and manifest["config"]["task"] == "t0t4"
    assert sum(map(sum, manifest["report"]["confusion"])) == 200
    assert "acc" in manifest["baseline"]
    curve = (tmp_path / "run.loss.csv").read_text().splitlines()
    assert curve[0] == "run,epoch,loss" and len(curve) == 1 + 5
    assert sha(dataset) == before


def test_loocv_jobs_do_not_change_result(dataset, tmp_path):
    reports = []
    for jobs in (1, 2):
        out = tmp_path / f"j{jobs}.json"
        assert run("loocv", "--data", dataset, "--jobs", jobs, "-o", out, *FAST) == 0
        reports.append(json.loads(out.read_text())["report"])
    assert reports[0] == reports[1]


def test_config_file_and_flag_precedence(dataset, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# fast run\ntask = t0t2\nepochs = 3\nmodel = mini\nbatch-size = 32\n")
    out = tmp_path / "m.json"
    assert run("loocv", "--config", conf, "--data", dataset, "--epochs", 1, "-o", out) == 0
    cfg = json.loads(out.read_text())["config"]
    assert cfg["task"] == "t0t2" and cfg["epochs"] == 1 and cfg["batch_size"] == 32
    conf.write_text("colour = blue\n")
    assert run("loocv", "--config", conf, "--data", dataset) == 1
    assert run("loocv", "--config", tmp_path / "absent.conf", "--data", dataset) == 2


def test_train_then_eval(dataset, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    before = sha(dataset)
    assert run("train", "--task", "5way", "--data", dataset, "-o", ckpt, *FAST) == 0
    assert (tmp_path / "m.ckpt.manifest.json").exists()
    assert (tmp_path / "m.ckpt.loss.csv").read_text().count("\n") == 2
    capsys.readouterr()
    assert run("eval", "--task", "5way", "--data", dataset, "--checkpoint", ckpt) == 0
    text = capsys.readouterr().out
    assert "classes 5" in text and sum(line.startswith("confusion ") for line in text.splitlines()) == 5
    report = json.loads((tmp_path / "m.ckpt.eval-5way.json").read_text())["report"]
    assert np.array(report["confusion"]).shape == (5, 5)
    assert run("eval", "--task", "t0t4", "--data", dataset, "--checkpoint", ckpt) == 1
    assert "--task" in capsys.readouterr().err
    assert sha(dataset) == before


def test_eval_rejects_corrupt_checkpoint(dataset, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"PANCKPT1garbage")
    assert run("eval", "--task", "5way", "--data", dataset, "--checkpoint", bad) == 2


def test_numeric_failure_exit_code(dataset, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericError("non-finite loss at epoch 0, batch 0")

    monkeypatch.setattr(cli, "train_epochs", boom)
    assert run("train", "--data", dataset, "-o", tmp_path / "m.ckpt", *FAST) == 3


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert run("gradcheck", "--seed", 0) == 0
    assert "mini_model[seed=0]" in capsys.readouterr().out
    failing = GradCheckReport("fake", 1.0, 1e-4, 1, {})
    monkeypatch.setattr(cli, "run_gradient_suite", lambda seeds, on_report=None: [failing])
    assert run("gradcheck") == 4


def test_bad_log_level(monkeypatch, capsys):
    monkeypatch.setenv("PAN_LOG", "loud")
    assert run("gradcheck") == 1
    assert "PAN_LOG" in capsys.readouterr().err
