from pathlib import Path

import numpy as np
import pytest

from cunet.cli import main
from cunet.harness import read_manifest

CONFIG_DIR = Path(__file__).resolve().parents[1] / "src" / "cunet" / "configs"
TINY = str(CONFIG_DIR / "tiny.ini")
DEFAULT = str(CONFIG_DIR / "default.ini")
FAST = ["--set", "data.size=8", "--set", "data.n=40", "--set", "train.batch=4", "--set", "diffusion.T=20"]


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", TINY, "--out", str(out), "--quiet", "--set", "train.steps=3", *FAST]) == 0
    return out / "checkpoint.cun"


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["sample", "--n", "1"]) == 1
    err = capsys.readouterr().err
    assert "error:" in err


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "train" in capsys.readouterr().out


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidth = 3\n")
    assert main(["profile", "--config", str(bad), "--resolution", "16", "16"]) == 1
    assert capsys.readouterr().err.startswith("error: unknown config key")
    assert main(["profile", "--config", str(tmp_path / "none.ini"), "--resolution", "16", "16"]) == 1
    assert main(["profile", "--config", TINY, "--resolution", "15", "15"]) == 1


def test_format_errors_exit_2(tmp_path, capsys):
    junk = tmp_path / "junk.cun"
    junk.write_bytes(b"NOPE" + bytes(20))
    assert main(["info", "--ckpt", str(junk)]) == 2
    assert capsys.readouterr().err.startswith("error:")
    assert main(["info", "--ckpt", str(tmp_path / "missing.cun")]) == 2


def test_profile_default_rows(capsys):
    assert main(["profile", "--config", DEFAULT, "--resolution", "16", "16"]) == 0
    out = capsys.readouterr().out
    table = out.split("\n\n")[0].splitlines()
    assert [line.split("  ")[0].strip() for line in table[1:]] == [
        "cU-Net", "cU-Net wo/A", "cU-Net wo/R", "cU-Net wo/A/R", "U-Net",
    ]
    assert out.count("host_platform: ") == 5 and "nfe: 56" in out


def test_profile_with_timing(capsys):
    args = ["profile", "--config", TINY, "--resolution", "8", "8", "--time-repeats", "3", "--set", "diffusion.T=3"]
    assert main(args) == 0
    assert capsys.readouterr().out.count("wall_repeats: 3") == 5


def test_train_writes_manifest(ckpt):
    man = read_manifest(ckpt.parent / "manifest.txt")
    assert man["command"] == "train"
    assert man["config.train.steps"] == "3" and man["config.data.size"] == "8"
    assert len(man["checkpoint_sha1"]) == 40
    assert len((ckpt.parent / "losses.txt").read_text().splitlines()) == 3


def test_resume(ckpt, tmp_path):
    out = tmp_path / "resumed"
    args = ["train", "--config", TINY, "--out", str(out), "--quiet", "--resume", str(ckpt), "--set", "train.steps=2", *FAST]
    assert main(args) == 0
    assert "resumed_from_sha1" in read_manifest(out / "manifest.txt")
    mismatch = ["train", "--config", TINY, "--resume", str(ckpt), "--out", str(out), "--set", "model.base_channels=4", *FAST]
    assert main(mismatch) == 2


def test_info(ckpt, capsys):
    assert main(["info", "--ckpt", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert "[model]" in out and "param_count: " in out and "memory_mb: " in out


def test_sample_byte_identical(ckpt, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["sample", "--ckpt", str(ckpt), "--n", "1", "--steps", "4", "--seed", "5", "--out", str(out)]) == 0
        runs.append(out)
    assert (runs[0] / "sample_0000.png").read_bytes() == (runs[1] / "sample_0000.png").read_bytes()
    man = read_manifest(runs[0] / "manifest.txt")
    assert man["seed"] == "5" and man["steps"] == "4" and "image_0_sha1" in man


def test_sample_workers_match(ckpt, tmp_path):
    for name, w in (("one", "1"), ("two", "2")):
        args = ["sample", "--ckpt", str(ckpt), "--n", "3", "--steps", "3", "--seed", "1", "--out", str(tmp_path / name)]
        assert main(args + ["--workers", w]) == 0
    for i in range(3):
        f = f"sample_{i:04d}.png"
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()


def test_eval_sweep(ckpt, tmp_path, capsys):
    out = tmp_path / "ev"
    assert main(["eval", "--ckpt", str(ckpt), "--data", "synthetic", "--n", "8", "--out", str(out), "--quiet"]) == 0
    printed = capsys.readouterr().out
    assert "fid_proxy: " in printed and "best_steps: " in printed
    sweep = (out / "sweep.txt").read_text().splitlines()
    # grid capped at T = 20
    assert [line.split(":")[0] for line in sweep] == ["steps_1", "steps_2", "steps_5", "steps_10", "steps_20"]
    man = read_manifest(out / "manifest.txt")
    assert "warning_0" in man and man["fid_proxy"] == printed.split("fid_proxy: ")[1].strip()
    assert main(["eval", "--ckpt", str(ckpt), "--data", "synthetic", "--n", "8", "--out", str(out), "--quiet"]) == 0
    assert (out / "sweep.txt").read_text().splitlines() == sweep


def test_eval_idx_reference(ckpt, tmp_path):
    from cunet.harness import write_idx

    pix = np.random.default_rng(0).integers(0, 256, (12, 8, 8), dtype=np.uint8)
    write_idx(tmp_path / "ref.idx", pix)
    args = ["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "ref.idx"), "--n", "4", "--steps", "3",
            "--out", str(tmp_path / "ev"), "--quiet"]
    assert main(args) == 0
    assert read_manifest(tmp_path / "ev" / "manifest.txt")["fid_steps"] == "3"
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x08\x01" + bytes(8))
    assert main(args[:4] + [str(tmp_path / "bad.idx")] + args[5:]) == 2


def test_train_smoke_loss_drop(tmp_path, capsys):
    """200 synthetic images, 500 steps: moving-average loss falls by half."""
    args = ["train", "--config", TINY, "--out", str(tmp_path), "--quiet",
            "--set", "data.n=200", "--set", "train.steps=500"]
    assert main(args) == 0
    drop = float(read_manifest(tmp_path / "manifest.txt")["loss_drop"])
    assert drop >= 0.5
