"""Time-reversal inpainting: keyframe scheduling, reference visibility and backends."""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import requests
from PIL import Image

from .core import CameraFrame, Scene
from .rasterizer import NEAR, RenderOptions, render

log = logging.getLogger(__name__)

UNCONDITIONAL = "unconditional"
REFERENCE = "reference"

PROV_RENDER, PROV_UNCOND, PROV_REFERENCE = 0, 1, 2

DEFAULT_STRIDE = 10
DEFAULT_DELTA = 0.01
MIN_REFERENCE_PIXELS = 16
DEPTH_ALPHA_FLOOR = 1e-3
ENDPOINT_ENV = "EMPTYSTREET_INPAINT_ENDPOINT"


class InpaintError(RuntimeError):
    pass


class InpaintTimeout(InpaintError):
    pass


class InpaintStatusError(InpaintError):
    def __init__(self, status: int, msg: str = ""):
        super().__init__(f"inpainter returned HTTP {status} {msg}".strip())
        self.status = status


class InpaintPayloadError(InpaintError):
    pass


class BackendUnreachable(InpaintError):
    pass


class ScheduleError(RuntimeError):
    def __init__(self, job: "InpaintJob", cause: Exception):
        super().__init__(f"job {job.slot} ({job.mode}, frame {job.target}) failed: {cause}")
        self.job = job
        self.cause = cause


@dataclass
class InpaintJob:
    slot: int
    target: int
    mode: str
    mask: np.ndarray
    reference: int | None = None
    depends_on: tuple = ()
    # resolved when the job runs
    image: np.ndarray | None = None
    reference_image: np.ndarray | None = None

    def __post_init__(self):
        if self.mode == REFERENCE:
            if self.reference is None or self.reference <= self.target:
                raise ValueError("reference job needs a strictly later reference frame")
        elif self.mode == UNCONDITIONAL:
            if self.reference is not None:
                raise ValueError("unconditional job cannot carry a reference")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class FrameData:
    """Post-removal view of one frame: camera, rendered image and depth (0 = missing)."""
    camera: CameraFrame
    image: np.ndarray
    depth: np.ndarray

    @property
    def time_index(self) -> int:
        return self.camera.time_index


def render_frame_data(scene: Scene, camera: CameraFrame, alpha_floor: float = DEPTH_ALPHA_FLOOR) -> FrameData:
    buf = render(scene, camera, RenderOptions())
    depth = np.where(buf.alpha > alpha_floor, buf.depth, 0.0)
    return FrameData(camera, buf.color, depth)


@dataclass
class Schedule:
    jobs: list
    stride: int
    frames: tuple

    def jobs_for(self, t: int):
        return [j for j in self.jobs if j.target == t]

    def check_order(self):
        """Assert every dependency precedes its consumer."""
        done = set()
        for j in self.jobs:
            missing = set(j.depends_on) - done
            assert not missing, f"job {j.slot} consumes unfinished slots {sorted(missing)}"
            done.add(j.slot)
        return True


def select_keyframes(time_indices, stride: int) -> list:
    ts = list(time_indices)
    if not ts:
        raise ValueError("no frames")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    keys = ts[::stride]
    if keys[-1] != ts[-1]:
        keys.append(ts[-1])
    return keys


def _bilinear_inverse_depth(depth: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear inverse depth at (u, v); invalid if any corner lacks depth."""
    H, W = depth.shape
    x0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2) if W > 1 else np.zeros(len(u), np.int64)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2) if H > 1 else np.zeros(len(v), np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx, fy = u - x0, v - y0
    d = [depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]]
    ok = np.all([di > 0 for di in d], axis=0)
    inv = [np.where(di > 0, 1.0 / np.where(di > 0, di, 1.0), 0.0) for di in d]
    val = ((1 - fx) * (1 - fy) * inv[0] + fx * (1 - fy) * inv[1]
           + (1 - fx) * fy * inv[2] + fx * fy * inv[3])
    return val, ok


def visibility_mask(target_cam: CameraFrame, ref_cam: CameraFrame, ref_depth: np.ndarray,
                    target_mask: np.ndarray, target_depth: np.ndarray, delta: float = DEFAULT_DELTA):
    """Masked target pixels whose surface point is seen unoccluded by the reference camera."""
    target_mask = np.asarray(target_mask, dtype=bool)
    out = np.zeros_like(target_mask)
    ys, xs = np.nonzero(target_mask & (target_depth > 0))
    if len(ys) == 0:
        return out
    rays = target_cam.pixel_rays()[ys, xs]
    p_cam = rays * target_depth[ys, xs, None]
    world = (p_cam - target_cam.translation) @ target_cam.rotation
    pr = ref_cam.world_to_cam(world)
    z = pr[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    u = ref_cam.fx * pr[:, 0] / zs + ref_cam.cx
    v = ref_cam.fy * pr[:, 1] / zs + ref_cam.cy
    inb = front & (u >= 0) & (u <= ref_cam.width - 1) & (v >= 0) & (v <= ref_cam.height - 1)
    inv, ok = _bilinear_inverse_depth(ref_depth, np.clip(u, 0, ref_cam.width - 1),
                                      np.clip(v, 0, ref_cam.height - 1))
    ok &= inb & (inv > 0)
    dref = 1.0 / np.where(ok, inv, 1.0)
    agree = ok & (np.abs(dref - z) <= delta * z)
    out[ys[agree], xs[agree]] = True
    return out


def build_schedule(frames: list, masks: dict, keyframes, *, delta: float = DEFAULT_DELTA,
                   min_reference_pixels: int = MIN_REFERENCE_PIXELS, stride: int = 0) -> Schedule:
    """Jobs for the last keyframe, earlier keyframes in reverse, then in-between frames."""
    by_t = {f.time_index: f for f in frames}
    ts = sorted(by_t)
    for t in ts:
        if t not in masks:
            raise ValueError(f"no mask for frame {t}")
    keys = sorted(keyframes)
    if not keys or keys[-1] != ts[-1] or not set(keys) <= set(ts):
        raise ValueError("keyframes must be frames and include the last frame")
    jobs: list[InpaintJob] = []
    slots_of: dict[int, list[int]] = {t: [] for t in ts}

    def add(t, mode, mask, ref=None):
        if not mask.any():
            return
        deps = tuple(slots_of[ref]) if ref is not None else ()
        job = InpaintJob(len(jobs), t, mode, mask, ref, deps)
        jobs.append(job)
        slots_of[t].append(job.slot)

    def split(t, ref):
        m = np.asarray(masks[t], dtype=bool)
        f, r = by_t[t], by_t[ref]
        vis = visibility_mask(f.camera, r.camera, r.depth, m, f.depth, delta)
        if vis.sum() < min_reference_pixels:
            vis = np.zeros_like(m)
        add(t, UNCONDITIONAL, m & ~vis)
        add(t, REFERENCE, vis, ref)

    add(keys[-1], UNCONDITIONAL, np.asarray(masks[keys[-1]], dtype=bool))
    for i in range(len(keys) - 2, -1, -1):
        split(keys[i], keys[i + 1])
    keyset = set(keys)
    for t in sorted((t for t in ts if t not in keyset), reverse=True):
        later = next(k for k in keys if k > t)
        split(t, later)
    sched = Schedule(jobs, stride, tuple(ts))
    sched.check_order()
    return sched


class InpainterBackend(Protocol):
    supports_reference: bool

    def inpaint(self, job: InpaintJob) -> np.ndarray: ...


def oracle_inpaint(image: np.ndarray, mask: np.ndarray, gt_empty_render: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.shape != np.shape(gt_empty_render) or image.shape[:2] != np.shape(mask):
        raise ValueError("image, mask and ground truth shapes differ")
    m = np.asarray(mask, dtype=bool)
    return np.where(m[..., None], gt_empty_render, image)


class OracleInpainter:
    """Fills masked pixels from known empty-scene images keyed by time index."""
    supports_reference = True

    def __init__(self, gt_empty: dict):
        self.gt_empty = gt_empty

    def inpaint(self, job: InpaintJob) -> np.ndarray:
        return oracle_inpaint(job.image, job.mask, self.gt_empty[job.target])


class IdentityInpainter:
    supports_reference = True

    def inpaint(self, job: InpaintJob) -> np.ndarray:
        return np.array(job.image, copy=True)


def recomposite(original: np.ndarray, result: np.ndarray, mask: np.ndarray) -> np.ndarray:
    result = np.asarray(result)
    if result.shape != original.shape:
        raise InpaintPayloadError(f"inpainted image has shape {result.shape}, expected {original.shape}")
    return np.where(mask[..., None], result, original)


@dataclass
class ScheduleResult:
    images: dict
    provenance: dict
    executed: list = field(default_factory=list)


def _save_state(root: Path, images, prov, done):
    root.mkdir(parents=True, exist_ok=True)
    for t in images:
        tmp = root / f"frame_{t:06d}.tmp.npz"
        np.savez(tmp, image=images[t], provenance=prov[t])
        os.replace(tmp, root / f"frame_{t:06d}.npz")
    tmp = root / "progress.json.tmp"
    tmp.write_text(json.dumps({"done": sorted(done)}))
    os.replace(tmp, root / "progress.json")


def _load_state(root: Path, images, prov):
    p = root / "progress.json"
    if not p.exists():
        return set()
    done = set(json.loads(p.read_text())["done"])
    for t in images:
        f = root / f"frame_{t:06d}.npz"
        if f.exists():
            with np.load(f) as z:
                images[t] = z["image"]
                prov[t] = z["provenance"]
    return done


def run_schedule(schedule: Schedule, backend, base_images: dict, persist_dir=None) -> ScheduleResult:
    """Execute jobs in order, composing fills over the post-removal renders.

    With ``persist_dir`` every finished job is checkpointed; a rerun resumes
    after the last finished job.
    """
    images = {t: np.array(base_images[t], dtype=np.float64, copy=True) for t in schedule.frames}
    prov = {t: np.full(images[t].shape[:2], PROV_RENDER, dtype=np.uint8) for t in schedule.frames}
    root = Path(persist_dir) if persist_dir is not None else None
    done = _load_state(root, images, prov) if root is not None else set()
    executed = []
    for job in schedule.jobs:
        if job.slot in done:
            continue
        use_ref = job.mode == REFERENCE and getattr(backend, "supports_reference", False)
        job.image = images[job.target]
        job.reference_image = images[job.reference] if use_ref else None
        try:
            out = backend.inpaint(job)
            out = recomposite(job.image, out, job.mask)
        except Exception as exc:
            if root is not None:
                _save_state(root, images, prov, done)
            raise ScheduleError(job, exc) from exc
        finally:
            job.image = job.reference_image = None
        images[job.target] = out
        prov[job.target][job.mask] = PROV_REFERENCE if use_ref else PROV_UNCOND
        done.add(job.slot)
        executed.append(job.slot)
        if root is not None:
            _save_state(root, images, prov, done)
    return ScheduleResult(images, prov, executed)


# -- remote backend --------------------------------------------------------

def encode_png(arr: np.ndarray) -> str:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(a).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            im = im.convert("RGB")
            return np.asarray(im, dtype=np.float64) / 255.0
    except Exception as exc:
        raise InpaintPayloadError(f"undecodable image payload: {exc}") from exc


@dataclass
class RemoteConfig:
    endpoint: str = "http://127.0.0.1:8600"
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5

    def resolved_endpoint(self) -> str:
        return os.environ.get(ENDPOINT_ENV) or self.endpoint


def _post_once(url, body, timeout):
    try:
        resp = requests.post(url, json=body, timeout=timeout)
    except requests.Timeout as exc:
        raise InpaintTimeout(f"no response from {url} within {timeout}s") from exc
    except requests.ConnectionError as exc:
        raise BackendUnreachable(f"cannot reach inpainter at {url}") from exc
    if resp.status_code != 200:
        raise InpaintStatusError(resp.status_code, resp.text[:200])
    try:
        payload = resp.json()
        return payload["image_b64"]
    except (ValueError, KeyError, TypeError) as exc:
        raise InpaintPayloadError("response lacks an image_b64 field") from exc


def remote_inpaint(job: InpaintJob, config: RemoteConfig | None = None, sleep=time.sleep) -> np.ndarray:
    """POST the job to ``<endpoint>/inpaint`` and recomposite the answer locally.

    Timeouts, unreachable hosts and 5xx answers are retried with exponential
    backoff; client errors and malformed payloads are not.
    """
    cfg = config or RemoteConfig()
    url = cfg.resolved_endpoint().rstrip("/") + "/inpaint"
    body = {"mode": job.mode, "image_b64": encode_png(job.image),
            "mask_b64": encode_png(np.where(job.mask, 255, 0).astype(np.uint8))}
    if job.reference_image is not None:
        body["reference_b64"] = encode_png(job.reference_image)
    last = None
    for attempt in range(max(1, cfg.retries)):
        if attempt:
            sleep(cfg.backoff * 2 ** (attempt - 1))
        try:
            data = _post_once(url, body, cfg.timeout)
        except (InpaintTimeout, BackendUnreachable) as exc:
            last = exc
        except InpaintStatusError as exc:
            if exc.status < 500:
                raise
            last = exc
        else:
            return recomposite(np.asarray(job.image), decode_png(data), job.mask)
        log.warning("inpaint attempt %d for frame %d failed: %s", attempt + 1, job.target, last)
    raise last


class RemoteInpainter:
    supports_reference = True

    def __init__(self, config: RemoteConfig | None = None):
        self.config = config or RemoteConfig()

    def inpaint(self, job: InpaintJob) -> np.ndarray:
        return remote_inpaint(job, self.config)
