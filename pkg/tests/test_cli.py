import json
import subprocess
import sys

import pytest

from vapdiff.cli import dispatch


def run(*argv):
    return dispatch([str(a) for a in argv])


def test_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "vapdiff.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("toygen", "describe", "bank", "train", "sample", "eval", "downstream", "ablate"):
        assert cmd in out.stdout


def test_usage_errors_exit_one(tmp_path):
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("toygen", "--out", tmp_path, "--bogus") == 1
    assert run("train", "--out", tmp_path) == 1
    assert run("train", "--out", tmp_path, "--config", tmp_path / "missing.toml") == 1


def test_toygen_deterministic(tmp_path):
    assert run("toygen", "--out", tmp_path / "a", "--n", 9, "--seed", 3) == 0
    assert run("toygen", "--out", tmp_path / "b", "--n", 9, "--seed", 3) == 0
    for name in ("manifest.jsonl", "attributes.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(a) == 9
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_dry_run_writes_nothing(tmp_path):
    assert run("toygen", "--out", tmp_path / "d", "--dry-run") == 0
    assert not (tmp_path / "d").exists()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """toygen -> describe -> bank -> train, through the CLI."""
    w = tmp_path_factory.mktemp("cli")
    assert run("toygen", "--out", w / "data", "--n", 12, "--n-test", 6, "--seed", 1) == 0
    assert run("describe", "--out", w / "tr", "--dataset", w / "data", "--workers", 2) == 0
    assert run("bank", "--out", w, "--dataset", w / "data", "--transcripts",
               w / "tr" / "transcripts_dermatologic.jsonl", "--holdout", 0.25) == 0
    (w / "run.toml").write_text(
        'dataset = "data"\nbank = "bank.jsonl"\ntimesteps = 5\npatch_size = 8\nembed_dim = 16\n'
        "encoder_depth = 1\nmiddle_depth = 1\ndecoder_depth = 1\nheads = 2\ntext_dim = 8\n"
        "batch_size = 4\nsteps = 3\n"
    )
    assert run("train", "--out", w / "run", "--config", w / "run.toml", "--steps", 4) == 0
    return w


def test_describe_and_bank_outputs(pipeline):
    lines = (pipeline / "tr" / "transcripts_dermatologic.jsonl").read_text().splitlines()
    assert len(lines) == 18
    header = json.loads((pipeline / "bank.jsonl").read_text().splitlines()[0])
    assert header["count"] == 12
    assert (pipeline / "bank_seen.jsonl").exists() and (pipeline / "bank_unseen.jsonl").exists()


def test_train_flag_overrides_config(pipeline):
    assert (pipeline / "run" / "loss.csv").read_text().count("\n") == 5


def test_sample_end_to_end(pipeline):
    ckpt = pipeline / "run" / "checkpoint.pt"
    assert run("sample", "--out", pipeline / "s", "--checkpoint", ckpt, "--class", 2, "--count", 2) == 0
    assert sorted(p.name for p in (pipeline / "s").glob("*.png")) == ["class2_seed0_0000.png", "class2_seed0_0001.png"]
    prov = [json.loads(x) for x in (pipeline / "s" / "provenance.jsonl").read_text().splitlines()]
    assert all(p["prompt_source"] == "bank" and p["class_id"] == 2 for p in prov)
    assert run("sample", "--out", pipeline / "s", "--checkpoint", ckpt, "--class", 9) == 1
    assert run("sample", "--out", pipeline / "s", "--checkpoint", pipeline / "nope.pt", "--class", 0) == 1


def test_eval_with_pixel_extractor(pipeline, capsys):
    ckpt = pipeline / "run" / "checkpoint.pt"
    assert run("sample", "--out", pipeline / "e", "--checkpoint", ckpt, "--class", 0, "--count", 6,
               "--prompt-source", "none") == 0
    capsys.readouterr()
    assert run("eval", "--out", pipeline / "m", "--dataset", pipeline / "data", "--fake", pipeline / "e",
               "--extractor", "pixel-8", "--k", 2) == 0
    row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert row["n_fake"] == 6 and row["extractor_id"] == "pixel-8"
    assert (pipeline / "m" / "metrics.csv").exists()


def test_ablate_rejects_composite_arm(pipeline):
    assert run("ablate", "--out", pipeline / "ab", "--config", pipeline / "run.toml",
               "--arms", "no_pcm+no_vaps", "--dry-run") == 1
