import hashlib
import subprocess
import sys
from pathlib import Path

import pytest

from emptystreet.cli import main

FAST = ["--set", "train.stage1_steps=20", "--set", "train.stage2_steps=10", "--set", "train.retrain_steps=5",
        "--set", "train.densify_interval=10", "--set", "train.prune_interval=5",
        # short runs leave opacities near their 0.1 start; keep them through pruning
        "--set", "train.prune_epsilon=0.01"]
SMALL = ["--set", "synth.frames=5", "--set", "synth.width=20", "--set", "synth.height=20"]


def tree_digest(root: Path):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def metrics(path: Path):
    rows = []
    for line in path.read_text().splitlines():
        rows.append(dict(kv.split("=", 1) for kv in line.split()))
    return rows


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "7", "--out", str(root / "ds")] + SMALL) == 0
    return root


def test_end_to_end_smoke(workdir, capsys):
    ds, cfg = workdir / "ds", str(workdir / "ds" / "config.ini")
    before = tree_digest(ds)
    assert main(["reconstruct", "--data", str(ds), "--config", cfg, "--out", str(workdir / "rec")] + FAST) == 0
    assert main(["unveil", "--data", str(ds), "--checkpoint", str(workdir / "rec" / "scene.uspl"),
                 "--config", cfg, "--backend", "oracle", "--out", str(workdir / "unv")] + FAST) == 0
    assert main(["eval", "--data", str(ds), "--checkpoint", str(workdir / "unv" / "scene.uspl"),
                 "--target", "empty", "--masks", str(workdir / "unv" / "masks"), "--out", str(workdir / "ev")]) == 0
    assert main(["render", "--data", str(ds), "--checkpoint", str(workdir / "unv" / "scene.uspl"),
                 "--out", str(workdir / "img")]) == 0
    assert tree_digest(ds) == before  # inputs are never written
    rows = metrics(workdir / "ev" / "metrics.txt")
    assert len(rows) == 6 and rows[-1]["summary"] == "1" and float(rows[-1]["psnr"]) > 10
    unv = metrics(workdir / "unv" / "metrics.txt")[0]
    assert unv["frozen_unchanged"] == "1" and unv["labels_intact"] == "1"
    assert int(unv["removed"]) > 0 and int(unv["jobs"]) > 0
    for ch in ("color", "alpha", "depth", "normal", "semantic"):
        assert len(list((workdir / "img" / ch).glob("*.png"))) == 5
    assert "psnr=" in capsys.readouterr().out


def test_deterministic_under_fixed_seed(workdir, tmp_path):
    assert main(["synth", "--seed", "7", "--out", str(tmp_path / "ds")] + SMALL) == 0
    assert tree_digest(tmp_path / "ds") == tree_digest(workdir / "ds")
    for out in ("a", "b"):
        assert main(["reconstruct", "--data", str(workdir / "ds"), "--out", str(tmp_path / out)] + FAST) == 0
    a = (tmp_path / "a" / "scene.uspl").read_bytes()
    assert a == (tmp_path / "b" / "scene.uspl").read_bytes()


def test_failures_exit_nonzero_with_diagnostic(workdir, tmp_path, capsys):
    assert main(["render", "--data", str(workdir / "ds"), "--checkpoint", str(tmp_path / "no.uspl"),
                 "--out", str(tmp_path / "r")]) != 0
    assert "not found" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path / "x"), "--set", "train.nope=1"]) != 0
    assert "unknown config key" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "missing.ini")]) != 0
    assert main(["bogus"]) != 0
    assert main(["render", "--unknown-flag"]) != 0
    assert "usage" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path / "x"), "--threads", "0"]) != 0


def test_remote_backend_unreachable(workdir, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("EMPTYSTREET_INPAINT_ENDPOINT", raising=False)
    rec = workdir / "rec" / "scene.uspl"
    if not rec.exists():
        pytest.skip("needs the smoke run checkpoint")
    code = main(["unveil", "--data", str(workdir / "ds"), "--checkpoint", str(rec), "--backend", "remote",
                 "--set", "remote.endpoint=http://127.0.0.1:9", "--set", "remote.retries=1",
                 "--out", str(tmp_path / "u")] + FAST)
    assert code != 0 and "cannot reach inpainter" in capsys.readouterr().err


def test_console_entry_point_runs(tmp_path):
    r = subprocess.run([sys.executable, "-m", "emptystreet.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "reconstruct" in r.stdout
    r = subprocess.run([sys.executable, "-m", "emptystreet.cli", "synth", "--threads", "1", "--out",
                        str(tmp_path / "d")] + SMALL, capture_output=True, text=True)
    assert r.returncode == 0 and (tmp_path / "d" / "manifest.json").exists()
