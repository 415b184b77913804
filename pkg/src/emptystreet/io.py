"""Checkpoints, images, point clouds, dataset manifests and config files."""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
import struct
import tempfile
from io import StringIO
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraFrame, EnvironmentModel, PaletteEntry, Scene, SemanticPalette, sh_coeff_count

MAGIC = b"USPL"
VERSION = 1
DEPTH_SCALE = 1000.0  # 16-bit depth PNG units per meter


class CheckpointError(ValueError):
    pass


class CheckpointTruncated(CheckpointError):
    pass


class CheckpointCorrupt(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class DatasetError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- checkpoint ---------------------------------------------------------------

def _record_dtype(sh_degree: int) -> np.dtype:
    m = sh_coeff_count(sh_degree)
    return np.dtype([("center", "<f4", 3), ("rotation", "<f4", 4), ("log_scales", "<f4", 2),
                     ("opacity", "<f4"), ("label", "<u2"), ("sh", "<f4", (m, 3))])


def checkpoint_bytes(scene: Scene) -> bytes:
    if len(scene) and scene.labels.max() > 0xFFFF:
        raise CheckpointError("label id does not fit in u16")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IQB", VERSION, len(scene), scene.sh_degree)
    entries = scene.palette.entries
    out += struct.pack("<I", len(entries))
    for e in entries:
        name = e.name.encode("utf-8")
        out += struct.pack("<HBH", e.label, int(e.removable), len(name)) + name
    grid = np.ascontiguousarray(scene.environment.grid, dtype="<f4")
    out += struct.pack("<II", grid.shape[0], grid.shape[1]) + grid.tobytes()
    rec = np.zeros(len(scene), dtype=_record_dtype(scene.sh_degree))
    rec["center"] = scene.centers
    rec["rotation"] = scene.rotations
    rec["log_scales"] = scene.log_scales
    rec["opacity"] = scene.opacity_logits
    rec["label"] = scene.labels
    rec["sh"] = scene.sh
    out += rec.tobytes()
    return bytes(out)


def save_checkpoint(scene: Scene, path):
    atomic_write_bytes(path, checkpoint_bytes(scene))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncated(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_from_bytes(data: bytes) -> Scene:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointCorrupt("bad magic, not a splat checkpoint")
    version, count, deg = r.unpack("<IQB", "header")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    if deg > 3:
        raise CheckpointCorrupt(f"sh degree {deg} out of range")
    (n_entries,) = r.unpack("<I", "palette header")
    if n_entries > 0xFFFF:
        raise CheckpointCorrupt("implausible palette size")
    entries = []
    for _ in range(n_entries):
        label, removable, nlen = r.unpack("<HBH", "palette entry")
        try:
            name = r.take(nlen, "palette name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointCorrupt("palette name is not utf-8") from exc
        entries.append(PaletteEntry(label, name, bool(removable)))
    try:
        palette = SemanticPalette(entries)
    except ValueError as exc:
        raise CheckpointCorrupt(f"invalid palette: {exc}") from exc
    he, we = r.unpack("<II", "environment header")
    if he * we > 1 << 26:
        raise CheckpointCorrupt("implausible environment size")
    grid = np.frombuffer(r.take(he * we * 12, "environment grid"), dtype="<f4").reshape(he, we, 3)
    dt = _record_dtype(deg)
    need = count * dt.itemsize
    remaining = len(data) - r.pos
    if remaining < need:
        raise CheckpointTruncated(f"expected {count} splat records ({need} bytes), found {remaining}")
    if remaining > need:
        raise CheckpointCorrupt(f"{remaining - need} trailing bytes after splat records")
    rec = np.frombuffer(r.take(need, "splat records"), dtype=dt)
    try:
        return Scene(rec["center"].astype(np.float32), rec["rotation"].astype(np.float32),
                     rec["log_scales"].astype(np.float32), rec["opacity"].astype(np.float32),
                     rec["sh"].astype(np.float32), rec["label"].astype(np.int64), palette,
                     EnvironmentModel(grid.astype(np.float32)), deg)
    except ValueError as exc:
        raise CheckpointCorrupt(str(exc)) from exc


def load_checkpoint(path) -> Scene:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())


# -- images -------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def _save_image(path, im: Image.Image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".png")
    os.close(fd)
    try:
        im.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_png(path, img: np.ndarray):
    """8-bit PNG from a float image in [0, 1] (H x W or H x W x 3) or uint8 array."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    _save_image(path, Image.fromarray(a))


def write_label_png(path, labels: np.ndarray):
    lab = np.asarray(labels)
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise ValueError("label ids must fit in 8 bits")
    _save_image(path, Image.fromarray(lab.astype(np.uint8)))


def write_depth_png(path, depth: np.ndarray, scale: float = DEPTH_SCALE):
    d = np.clip(np.round(np.asarray(depth) * scale), 0, 65535).astype(np.uint16)
    _save_image(path, Image.fromarray(d))


def read_png(path) -> np.ndarray:
    """Color PNGs decode to float RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim != 2:
        raise DatasetError(f"{path}: semantic map must be single channel")
    return a.astype(np.int64)


def read_depth_png(path, scale: float = DEPTH_SCALE) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / scale


# -- point clouds -------------------------------------------------------------

def write_ply(path, points, colors, labels):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colors)
    if cols.dtype != np.uint8:
        cols = to_uint8(cols)
    labs = np.asarray(labels, dtype=np.int64)
    head = ["ply", "format ascii 1.0", f"element vertex {len(pts)}", "property float x",
            "property float y", "property float z", "property uchar red", "property uchar green",
            "property uchar blue", "property ushort label", "end_header"]
    lines = [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]} {l}"
             for p, c, l in zip(pts, cols.reshape(-1, 3), labs)]
    atomic_write_bytes(path, ("\n".join(head + lines) + "\n").encode("ascii"))


def read_ply(path):
    """ASCII PLY with x, y, z, red, green, blue, label vertex properties."""
    path = Path(path)
    with open(path, "r", encoding="ascii") as f:
        if f.readline().strip() != "ply":
            raise DatasetError(f"{path}: not a PLY file")
        props, count, fmt = [], None, None
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element" and tok[1] == "vertex":
                count = int(tok[2])
            elif tok[0] == "property":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if fmt != "ascii":
            raise DatasetError(f"{path}: only ASCII PLY is supported")
        missing = {"x", "y", "z", "red", "green", "blue", "label"} - set(props)
        if count is None or missing:
            raise DatasetError(f"{path}: missing PLY properties {sorted(missing)}")
        data = np.loadtxt(f, ndmin=2) if count else np.zeros((0, len(props)))
    if data.shape != (count, len(props)):
        raise DatasetError(f"{path}: expected {count} vertices with {len(props)} properties")
    col = {p: data[:, i] for i, p in enumerate(props)}
    # coordinates are declared float: round to single precision like any PLY reader would
    pts = np.stack([col["x"], col["y"], col["z"]], 1).astype(np.float32).astype(np.float64)
    rgb = np.stack([col["red"], col["green"], col["blue"]], 1) / 255.0
    return pts, rgb, col["label"].astype(np.int64)


# -- dataset manifest -----------------------------------------------------------

def camera_to_dict(cam: CameraFrame) -> dict:
    return dict(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, rotation=cam.rotation.tolist(),
                translation=cam.translation.tolist(), width=cam.width, height=cam.height,
                time_index=cam.time_index)


def camera_from_dict(d: dict) -> CameraFrame:
    return CameraFrame(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["rotation"]),
                       np.array(d["translation"]), d["width"], d["height"], d["time_index"])


def palette_to_list(p: SemanticPalette) -> list:
    return [dict(label=e.label, name=e.name, removable=e.removable) for e in p.entries]


def palette_from_list(items: list) -> SemanticPalette:
    return SemanticPalette([PaletteEntry(int(e["label"]), str(e["name"]), bool(e["removable"]))
                            for e in items])


@dataclass
class Dataset:
    root: Path
    cameras: list
    images: list
    labels: list
    points: np.ndarray
    point_colors: np.ndarray
    point_labels: np.ndarray
    palette: SemanticPalette
    extras: dict


def write_dataset(out_dir, cameras, images, labels, points, point_colors, point_labels,
                  palette: SemanticPalette, extras: dict | None = None) -> Path:
    """Write PNG frames, a PLY cloud and ``manifest.json``.

    ``extras`` maps a name to per-frame images (float RGB, or bool masks)
    recorded alongside each frame, e.g. ground-truth empty renders.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (cam, img, lab) in enumerate(zip(cameras, images, labels)):
        rec = dict(image=f"images/{i:04d}.png", semantic=f"semantic/{i:04d}.png", camera=camera_to_dict(cam))
        write_png(root / rec["image"], img)
        write_label_png(root / rec["semantic"], lab)
        for name, seq in (extras or {}).items():
            rel = f"{name}/{i:04d}.png"
            a = np.asarray(seq[i])
            write_png(root / rel, np.where(a, 255, 0).astype(np.uint8) if a.dtype == bool else a)
            rec[name] = rel
        frames.append(rec)
    write_ply(root / "points.ply", points, point_colors, point_labels)
    manifest = dict(palette=palette_to_list(palette), points="points.ply", frames=frames)
    atomic_write_bytes(root / "manifest.json", json.dumps(manifest, indent=1).encode())
    return root / "manifest.json"


def load_dataset(manifest_path) -> Dataset:
    """Load and validate every referenced file; nothing is returned on error."""
    mpath = Path(manifest_path)
    if mpath.is_dir():
        mpath = mpath / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath}: manifest not found")
    root = mpath.parent
    try:
        man = json.loads(mpath.read_text())
        palette = palette_from_list(man["palette"])
        frames = man["frames"]
        points_rel = man["points"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{mpath}: malformed manifest ({exc})") from exc
    if not frames:
        raise DatasetError(f"{mpath}: no frames")
    # check existence first so a missing file never leaves a half-loaded dataset
    for rec in frames:
        for key in ("image", "semantic"):
            if key not in rec:
                raise DatasetError(f"{mpath}: frame record lacks '{key}'")
        for key, rel in rec.items():
            if key != "camera" and not (root / rel).exists():
                raise DatasetError(f"{root / rel}: missing file")
    if not (root / points_rel).exists():
        raise DatasetError(f"{root / points_rel}: missing file")
    K = len(palette)
    cams, imgs, labs = [], [], []
    extras: dict = {}
    for rec in frames:
        try:
            cam = camera_from_dict(rec["camera"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{mpath}: bad camera record ({exc})") from exc
        img = read_png(root / rec["image"])
        lab = read_label_png(root / rec["semantic"])
        if img.shape[:2] != lab.shape:
            raise DatasetError(f"{root / rec['semantic']}: size {lab.shape} differs from image {img.shape[:2]}")
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"{root / rec['image']}: size differs from camera {cam.height}x{cam.width}")
        if lab.max(initial=0) >= K:
            raise DatasetError(f"{root / rec['semantic']}: unknown label id {int(lab.max())}")
        for key, rel in rec.items():
            if key in ("image", "semantic", "camera"):
                continue
            extras.setdefault(key, []).append(read_png(root / rel))
        cams.append(cam)
        imgs.append(img)
        labs.append(lab)
    ts = [c.time_index for c in cams]
    if len(set(ts)) != len(ts) or ts != sorted(ts):
        raise DatasetError(f"{mpath}: frame time indices must be unique and increasing")
    pts, cols, plabs = read_ply(root / points_rel)
    if len(plabs) and plabs.max() >= K:
        raise DatasetError(f"{root / points_rel}: unknown label id {int(plabs.max())}")
    return Dataset(root, cams, imgs, labs, pts, cols, plabs, palette, extras)


# -- configuration ------------------------------------------------------------

def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


_INT_KEYS = {"densify_until", "ignore_label"}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if raw.lower() in ("none", ""):
            return None
        if isinstance(default, int) or key.rsplit(".", 1)[-1] in _INT_KEYS:
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw!r} for {key}") from exc


def config_sections() -> dict:
    """Section -> {key: default} for every tunable constant."""
    from .grad import DEFAULT_LR
    from .losses import LossWeights
    from .time_reversal import DEFAULT_DELTA, MIN_REFERENCE_PIXELS, RemoteConfig
    from .training import TrainConfig

    train = {k: f.default for k, f in _fields(TrainConfig).items()
             if k not in ("weights", "lr") and f.default is not dataclasses.MISSING}
    return {
        "train": train,
        "loss": {k: f.default for k, f in _fields(LossWeights).items()},
        "lr": dict(DEFAULT_LR),
        "schedule": {"delta": DEFAULT_DELTA, "min_reference_pixels": MIN_REFERENCE_PIXELS},
        "remote": {k: f.default for k, f in _fields(RemoteConfig).items()},
        "synth": {"seed": 7, "frames": 20, "width": 64, "height": 64, "boxes": 1},
    }


def config_text(sections: dict) -> str:
    cp = configparser.ConfigParser()
    for sec, vals in sections.items():
        cp[sec] = {k: "none" if v is None else str(v) for k, v in vals.items()}
    buf = StringIO()
    cp.write(buf)
    return buf.getvalue()


def default_config_text() -> str:
    return config_text(config_sections())


def parse_config(text: str = "", overrides: dict | None = None) -> dict:
    """Merge an INI text and ``section.key=value`` overrides over the defaults."""
    sections = {s: dict(v) for s, v in config_sections().items()}
    defaults = config_sections()
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    items = [(s, k, v) for s in cp.sections() for k, v in cp[s].items()]
    for dotted, v in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        s, k = dotted.split(".", 1)
        items.append((s, k, str(v)))
    for s, k, v in items:
        if s not in defaults:
            raise ConfigError(f"unknown config section [{s}]")
        if k not in defaults[s]:
            raise ConfigError(f"unknown config key {s}.{k}")
        sections[s][k] = _coerce(v, defaults[s][k], f"{s}.{k}")
    return sections


def load_config(path=None, overrides: dict | None = None) -> dict:
    text = ""
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
    return parse_config(text, overrides)


def train_config_from(sections: dict):
    from .losses import LossWeights
    from .training import TrainConfig

    cfg = TrainConfig(**sections["train"])
    cfg.weights = LossWeights(**sections["loss"])
    cfg.lr = dict(sections["lr"])
    return cfg
