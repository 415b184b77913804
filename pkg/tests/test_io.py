import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from emptystreet.core import EnvironmentModel, Scene
from emptystreet.io import (MAGIC, CheckpointCorrupt, CheckpointError, CheckpointTruncated,
                            CheckpointVersionError, ConfigError, DatasetError, checkpoint_bytes,
                            checkpoint_from_bytes, default_config_text, load_checkpoint, load_config,
                            load_dataset, parse_config, read_depth_png, read_label_png, read_ply, read_png,
                            save_checkpoint, train_config_from, write_dataset, write_depth_png,
                            write_label_png, write_ply, write_png)
from emptystreet.synthetic import generate_synthetic_scene
from helpers import palette, random_scene


def same_scene(a, b):
    return (a.checksum() == b.checksum() and a.sh_degree == b.sh_degree
            and a.palette.entries == b.palette.entries)


@given(st.integers(0, 2**31 - 1), st.integers(0, 40), st.integers(0, 3))
def test_checkpoint_roundtrip_bitwise(seed, n, deg):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, n=n, K=4, deg=deg)
    sc.palette = palette(4, removable=(1, 3))
    data = checkpoint_bytes(sc)
    back = checkpoint_from_bytes(data)
    assert same_scene(sc, back)
    assert checkpoint_bytes(back) == data


def test_checkpoint_1k_and_special_values(tmp_path):
    rng = np.random.default_rng(0)
    sc = random_scene(rng, n=1000, deg=3)
    sc.centers[0] = [-0.0, np.float32(1e-45), np.float32(3.4e38)]
    save_checkpoint(sc, tmp_path / "a.uspl")
    back = load_checkpoint(tmp_path / "a.uspl")
    assert same_scene(sc, back)
    assert np.signbit(back.centers[0, 0])


def test_empty_scene_checkpoint():
    sc = Scene.empty(palette(2), 1, EnvironmentModel(height=2, width=4))
    back = checkpoint_from_bytes(checkpoint_bytes(sc))
    assert len(back) == 0 and same_scene(sc, back)


def test_checkpoint_file_layout():
    sc = random_scene(np.random.default_rng(1), n=3, deg=1)
    data = checkpoint_bytes(sc)
    assert data[:4] == MAGIC
    version, count, deg = struct.unpack("<IQB", data[4:17])
    assert (version, count, deg) == (1, 3, 1)
    rec = 4 * (3 + 4 + 2 + 1) + 2 + 4 * 3 * 4
    assert data[-rec:][:12] == sc.centers[2].astype("<f4").tobytes()


def test_checkpoint_errors(tmp_path):
    data = checkpoint_bytes(random_scene(np.random.default_rng(2), n=5))
    for cut in (2, 10, 30, len(data) - 1):
        with pytest.raises(CheckpointTruncated):
            checkpoint_from_bytes(data[:cut])
    with pytest.raises(CheckpointCorrupt):
        checkpoint_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointVersionError):
        checkpoint_from_bytes(MAGIC + struct.pack("<I", 2) + data[8:])
    with pytest.raises(CheckpointCorrupt):
        checkpoint_from_bytes(data + b"\0")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.uspl")


@given(st.binary(max_size=200))
def test_checkpoint_fuzz_never_crashes(blob):
    try:
        checkpoint_from_bytes(MAGIC + blob)
    except CheckpointError:
        pass


def test_images_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (6, 5, 3)) / 255.0
    write_png(tmp_path / "c.png", img)
    assert np.array_equal(read_png(tmp_path / "c.png"), img)
    lab = rng.integers(0, 7, (6, 5))
    write_label_png(tmp_path / "l.png", lab)
    assert np.array_equal(read_label_png(tmp_path / "l.png"), lab)
    with pytest.raises(ValueError):
        write_label_png(tmp_path / "bad.png", np.full((2, 2), 300))
    d = np.round(rng.uniform(0, 60, (6, 5)) * 1000) / 1000
    write_depth_png(tmp_path / "d.png", d)
    assert np.allclose(read_depth_png(tmp_path / "d.png"), d, atol=1e-9)
    with pytest.raises(DatasetError):
        write_png(tmp_path / "rgb.png", img)
        read_label_png(tmp_path / "rgb.png")


def test_ply_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(20, 3)).astype(np.float32).astype(np.float64)
    cols = rng.integers(0, 256, (20, 3)) / 255.0
    labs = rng.integers(0, 4, 20)
    write_ply(tmp_path / "p.ply", pts, cols, labs)
    p, c, l = read_ply(tmp_path / "p.ply")
    assert np.array_equal(p, pts) and np.allclose(c, cols) and np.array_equal(l, labs)
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    assert len(read_ply(tmp_path / "e.ply")[0]) == 0
    (tmp_path / "b.ply").write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(DatasetError):
        read_ply(tmp_path / "b.ply")


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = generate_synthetic_scene(seed=1, n_frames=3, width=16, height=12, supersample=1)
    root = tmp_path_factory.mktemp("ds")
    write_dataset(root, d.cameras, d.images_full, d.labels_full, d.points, d.point_colors, d.point_labels,
                  d.palette, extras={"empty": d.images_empty, "unobservable": d.unobservable})
    return root, d


def test_dataset_roundtrip(dataset_dir):
    root, d = dataset_dir
    ds = load_dataset(root)
    assert len(ds.cameras) == 3 and ds.palette.entries == d.palette.entries
    for a, b in zip(ds.cameras, d.cameras):
        assert np.allclose(a.rotation, b.rotation) and a.time_index == b.time_index and a.fx == b.fx
    for a, b in zip(ds.labels, d.labels_full):
        assert np.array_equal(a, b)
    for a, b in zip(ds.images, d.images_full):
        assert np.abs(a - b).max() <= 0.5 / 255 + 1e-12
    assert np.allclose(ds.points, d.points, rtol=1e-7, atol=1e-7)
    assert np.array_equal(ds.point_labels, d.point_labels)
    assert set(ds.extras) == {"empty", "unobservable"}


def _copy(src, dst):
    import shutil
    shutil.copytree(src, dst)
    return dst


def test_dataset_errors(dataset_dir, tmp_path):
    root, _ = dataset_dir
    bad = _copy(root, tmp_path / "missing")
    (bad / "images" / "0001.png").unlink()
    with pytest.raises(DatasetError, match="0001.png"):
        load_dataset(bad)
    bad = _copy(root, tmp_path / "label")
    write_label_png(bad / "semantic" / "0002.png", np.full((12, 16), 9))
    with pytest.raises(DatasetError, match="unknown label"):
        load_dataset(bad)
    bad = _copy(root, tmp_path / "dims")
    write_label_png(bad / "semantic" / "0000.png", np.zeros((11, 16), int))
    with pytest.raises(DatasetError, match="0000.png"):
        load_dataset(bad)
    bad = _copy(root, tmp_path / "empty")
    man = json.loads((bad / "manifest.json").read_text())
    man["frames"] = []
    (bad / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DatasetError):
        load_dataset(bad)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nowhere")


def test_config_defaults_and_overrides(tmp_path):
    secs = parse_config(default_config_text())
    assert secs["train"]["stage1_steps"] == 2000 and secs["loss"]["lambda_d"] == 100.0
    assert secs["train"]["alpha_threshold"] == 0.99 and secs["train"]["keyframe_stride"] == 10
    assert secs["train"]["ignore_label"] is None
    p = tmp_path / "c.ini"
    p.write_text("[train]\nstage1_steps = 5\nignore_label = 3\n[loss]\nlambda_n = 0.5\n")
    secs = load_config(p, {"train.stage2_steps": "7", "remote.endpoint": "http://x:1"})
    cfg = train_config_from(secs)
    assert (cfg.stage1_steps, cfg.stage2_steps, cfg.ignore_label) == (5, 7, 3)
    assert cfg.weights.lambda_n == 0.5 and secs["remote"]["endpoint"] == "http://x:1"
    assert cfg.distortion_depth == (0.2, 100.0)
    assert train_config_from(parse_config("", {"train.distortion_near": "none"})).distortion_depth is None


@pytest.mark.parametrize("text,over", [("[train]\nbogus = 1\n", None), ("[nosuch]\na = 1\n", None),
                                       ("", {"train.stage1_steps": "many"}), ("", {"nodot": "1"}),
                                       ("not an ini", None), ("", {"train.seed_holes": "maybe"})])
def test_config_errors(text, over):
    with pytest.raises(ConfigError):
        parse_config(text, over)
