"""Procedural street scene with analytic ground truth.

World frame: y points down (ground at y = 0, up is -y), z forward along the
street. A road plane, a building facade on the right, a back facade closing
the street and a few axis-aligned boxes standing in for vehicles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import CameraFrame, EnvironmentModel, PaletteEntry, Scene, SemanticPalette, logit
from .sh import rgb_to_sh0

ROAD, BUILDING, VEHICLE, SKY = 0, 1, 2, 3

GROUND_X = (-12.0, 4.0)
GROUND_Z = (-1.0, 24.0)
WALL_X = 4.0
BACK_Z = 24.0
WALL_TOP = -5.0


def default_palette() -> SemanticPalette:
    return SemanticPalette([PaletteEntry(ROAD, "road", False), PaletteEntry(BUILDING, "building", False),
                            PaletteEntry(VEHICLE, "vehicle", True), PaletteEntry(SKY, "sky", False)])


def sky_grid(height: int = 64, width: int = 128) -> np.ndarray:
    """Smooth sky: pale at the horizon, deeper blue overhead, faint azimuth tint."""
    elev = (0.5 - (np.arange(height) + 0.5) / height) * math.pi
    azim = (np.arange(width) + 0.5) / width * 2 * math.pi - math.pi
    e = np.clip(elev, 0, None)[:, None, None] / (math.pi / 2)
    horizon = np.array([0.78, 0.84, 0.92])
    zenith = np.array([0.32, 0.5, 0.85])
    g = horizon + (zenith - horizon) * np.sqrt(e)
    g = g + 0.03 * np.cos(azim)[None, :, None] * np.array([1.0, 0.6, 0.2])
    g = np.broadcast_to(g, (height, width, 3))
    return np.clip(g, 0, 1).astype(np.float32)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray

    def slab(self, o: np.ndarray, d: np.ndarray):
        """Entry/exit parameters along o + t d (inf where missed) and entry face normal."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (self.lo - o) * inv
            t1 = (self.hi - o) * inv
        # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
        par = d == 0
        inside = (o >= self.lo) & (o <= self.hi)
        t0 = np.where(par, np.where(inside, -np.inf, np.inf), t0)
        t1 = np.where(par, np.where(inside, np.inf, -np.inf), t1)
        tn = np.minimum(t0, t1)
        tf = np.maximum(t0, t1)
        t_in = tn.max(axis=-1)
        t_out = tf.min(axis=-1)
        axis = tn.argmax(axis=-1)
        sgn = -np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
        normal = np.zeros(d.shape)
        np.put_along_axis(normal, axis[..., None], sgn[..., None], -1)
        return t_in, t_out, normal


def ground_color(x, z):
    base = np.array([0.34, 0.35, 0.37])
    v = (0.07 * np.sin(0.9 * x + 0.35 * z)[..., None] * np.array([1.0, 1.0, 1.0])
         + 0.05 * np.cos(0.45 * z - 0.6 * x)[..., None] * np.array([0.8, 0.5, 0.1]))
    return base + v


def wall_color(z, y):
    base = np.array([0.63, 0.5, 0.4])
    return base + 0.08 * (np.sin(0.7 * z) * np.cos(0.9 * y))[..., None] * np.array([1.0, 0.8, 0.6])


def back_color(x, y):
    base = np.array([0.48, 0.52, 0.6])
    return base + 0.07 * (np.sin(0.6 * x + 0.4 * y))[..., None] * np.array([0.5, 0.8, 1.0])


@dataclass
class Hit:
    t: np.ndarray
    point: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    label: np.ndarray
    surface: np.ndarray  # -1 sky, 0 ground, 1 right wall, 2 back wall, 3+ boxes


def cast(origin: np.ndarray, dirs: np.ndarray, boxes: list) -> Hit:
    """Nearest surface along each ray (dirs shape (..., 3))."""
    o = np.broadcast_to(origin, dirs.shape)
    shape = dirs.shape[:-1]
    best = np.full(shape, np.inf)
    surf = np.full(shape, -1, dtype=np.int64)
    normal = np.zeros(dirs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        # ground y = 0 seen from above
        t = -o[..., 1] / dirs[..., 1]
        p = o + t[..., None] * dirs
        ok = (dirs[..., 1] > 0) & (t > 0) & (p[..., 0] >= GROUND_X[0]) & (p[..., 0] <= GROUND_X[1]) \
            & (p[..., 2] >= GROUND_Z[0]) & (p[..., 2] <= GROUND_Z[1])
        upd = ok & (t < best)
        best, surf = np.where(upd, t, best), np.where(upd, 0, surf)
        normal[upd] = (0.0, -1.0, 0.0)
        # right facade x = WALL_X facing -x
        t = (WALL_X - o[..., 0]) / dirs[..., 0]
        p = o + t[..., None] * dirs
        ok = (dirs[..., 0] > 0) & (t > 0) & (p[..., 1] >= WALL_TOP) & (p[..., 1] <= 0) \
            & (p[..., 2] >= GROUND_Z[0]) & (p[..., 2] <= GROUND_Z[1])
        upd = ok & (t < best)
        best, surf = np.where(upd, t, best), np.where(upd, 1, surf)
        normal[upd] = (-1.0, 0.0, 0.0)
        # back facade z = BACK_Z facing -z
        t = (BACK_Z - o[..., 2]) / dirs[..., 2]
        p = o + t[..., None] * dirs
        ok = (dirs[..., 2] > 0) & (t > 0) & (p[..., 1] >= WALL_TOP) & (p[..., 1] <= 0) \
            & (p[..., 0] >= GROUND_X[0]) & (p[..., 0] <= GROUND_X[1])
        upd = ok & (t < best)
        best, surf = np.where(upd, t, best), np.where(upd, 2, surf)
        normal[upd] = (0.0, 0.0, -1.0)
    for i, b in enumerate(boxes):
        t_in, t_out, nb = b.slab(o, dirs)
        ok = (t_in <= t_out) & (t_in > 0)
        upd = ok & (t_in < best)
        best, surf = np.where(upd, t_in, best), np.where(upd, 3 + i, surf)
        normal[upd] = nb[upd]
    pt = o + np.where(np.isfinite(best), best, 0.0)[..., None] * dirs
    color = np.zeros(dirs.shape)
    label = np.full(shape, SKY, dtype=np.int64)
    m = surf == 0
    color[m] = ground_color(pt[m, 0], pt[m, 2])
    label[m] = ROAD
    m = surf == 1
    color[m] = wall_color(pt[m, 2], pt[m, 1])
    label[m] = BUILDING
    m = surf == 2
    color[m] = back_color(pt[m, 0], pt[m, 1])
    label[m] = BUILDING
    for i, b in enumerate(boxes):
        m = surf == 3 + i
        shade = 0.8 + 0.2 * np.abs(normal[m] @ np.array([0.3, -0.9, -0.3]))
        color[m] = b.color * shade[:, None]
        label[m] = VEHICLE
    return Hit(best, pt, normal, np.clip(color, 0, 1), label, surf)


def segment_blocked(a: np.ndarray, b: np.ndarray, boxes: list, eps: float = 1e-6) -> np.ndarray:
    """Whether the open segment a -> b passes through any box (slab test)."""
    d = b - a
    out = np.zeros(d.shape[:-1], dtype=bool)
    for box in boxes:
        t_in, t_out, _ = box.slab(np.broadcast_to(a, d.shape), d)
        out |= (t_in < t_out) & (t_out > eps) & (t_in < 1 - eps)
    return out


def segment_blocked_march(a: np.ndarray, b: np.ndarray, boxes: list, samples: int = 400) -> np.ndarray:
    """Brute-force counterpart of :func:`segment_blocked` sampling interior points."""
    t = (np.arange(samples) + 0.5) / samples
    pts = a[..., None, :] + t[:, None] * (b - a)[..., None, :]
    out = np.zeros(pts.shape[:-2], dtype=bool)
    for box in boxes:
        inside = np.all((pts > box.lo) & (pts < box.hi), axis=-1)
        out |= inside.any(axis=-1)
    return out


def world_dirs(camera: CameraFrame, supersample: int = 1) -> np.ndarray:
    """World ray directions (H, W, s*s, 3) over an s x s subpixel grid."""
    s = supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    ys, xs = np.mgrid[0:camera.height, 0:camera.width].astype(np.float64)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    px = xs[..., None] + ox.ravel()
    py = ys[..., None] + oy.ravel()
    d = np.stack([(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, np.ones_like(px)], -1)
    return d @ camera.rotation


def point_visible(points: np.ndarray, camera: CameraFrame, boxes: list, march: bool = False) -> np.ndarray:
    """In-frustum and not hidden by a box, as seen from ``camera``."""
    pc = camera.world_to_cam(points)
    z = pc[..., 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = camera.fx * pc[..., 0] / zs + camera.cx
    v = camera.fy * pc[..., 1] / zs + camera.cy
    inb = front & (u >= -0.5) & (u <= camera.width - 0.5) & (v >= -0.5) & (v <= camera.height - 0.5)
    blocked = (segment_blocked_march if march else segment_blocked)(
        np.broadcast_to(camera.center, points.shape), points, boxes)
    return inb & ~blocked


@dataclass
class SyntheticDataset:
    cameras: list
    images_full: list
    images_empty: list
    labels_full: list
    labels_empty: list
    unobservable: list
    points: np.ndarray
    point_colors: np.ndarray
    point_labels: np.ndarray
    boxes: list
    palette: SemanticPalette
    env_grid: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.cameras)


def make_boxes(rng: np.random.Generator, n: int) -> list:
    boxes = []
    slots = [(-2.4, 7.0), (1.2, 11.5), (-2.6, 14.5), (1.0, 17.0)]
    palette = [np.array(c) for c in ((0.75, 0.18, 0.15), (0.15, 0.3, 0.7), (0.85, 0.8, 0.25), (0.2, 0.6, 0.3))]
    for i in range(n):
        x0, z0 = slots[i % len(slots)]
        z0 += 4.0 * (i // len(slots))
        w = rng.uniform(1.5, 1.9)
        ln = rng.uniform(2.4, 3.0)
        h = rng.uniform(1.1, 1.35)
        x0 += rng.uniform(-0.2, 0.2)
        z0 += rng.uniform(-0.3, 0.3)
        boxes.append(Box(np.array([x0, -h, z0]), np.array([x0 + w, 0.0, z0 + ln]), palette[i % len(palette)]))
    return boxes


def make_cameras(n_frames: int, width: int, height: int, fov_deg: float = 70.0,
                 travel: float = 4.0, lateral: float = 0.6, cam_height: float = 1.6) -> list:
    fx = (width / 2) / math.tan(math.radians(fov_deg) / 2)
    cams = []
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        x = lateral * (0.5 - s)
        z = travel * s
        eye = np.array([x, -cam_height, z])
        target = np.array([x * 0.5, -0.9, z + 10.0])
        cams.append(CameraFrame.look_at(eye, target, fx=fx, width=width, height=height, time_index=i))
    return cams


def _render_gt(camera, boxes, env: EnvironmentModel, supersample: int):
    dirs = world_dirs(camera, supersample)
    hit = cast(camera.center, dirs, boxes)
    sky = env.query(dirs)
    col = np.where(hit.surface[..., None] >= 0, hit.color, sky)
    centre = world_dirs(camera, 1)[:, :, 0]
    lab = cast(camera.center, centre, boxes)
    return col.mean(axis=2), lab


def unobservable_mask(camera: CameraFrame, cameras: list, boxes: list, march: bool = False) -> np.ndarray:
    """Pixels whose empty-scene surface point is hidden from every camera."""
    dirs = world_dirs(camera, 1)[:, :, 0]
    hit = cast(camera.center, dirs, [])
    valid = hit.surface >= 0
    pts = hit.point[valid]
    seen = np.zeros(len(pts), dtype=bool)
    for cam in cameras:
        todo = ~seen
        if not todo.any():
            break
        seen[todo] = point_visible(pts[todo], cam, boxes, march)
    out = np.zeros(valid.shape, dtype=bool)
    out[valid] = ~seen
    return out


def sample_lidar(cameras: list, boxes: list, stride: int = 2, voxel: float = 0.15):
    """Surface points seen by the cameras, thinned to one per voxel."""
    pts, cols, labs = [], [], []
    for cam in cameras:
        dirs = world_dirs(cam, 1)[::stride, ::stride, 0]
        hit = cast(cam.center, dirs, boxes)
        m = hit.surface >= 0
        pts.append(hit.point[m])
        cols.append(hit.color[m])
        labs.append(hit.label[m])
    pts = np.concatenate(pts)
    cols = np.concatenate(cols)
    labs = np.concatenate(labs)
    if voxel > 0 and len(pts):
        keys = np.floor(pts / voxel).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        first = np.sort(first)
        pts, cols, labs = pts[first], cols[first], labs[first]
    return pts, cols, labs


def generate_synthetic_scene(seed: int = 0, n_boxes: int = 1, n_frames: int = 20, width: int = 64,
                             height: int = 64, supersample: int = 3, lidar_stride: int = 2,
                             voxel: float = 0.15, fov_deg: float = 70.0, travel: float = 4.0,
                             lateral: float = 0.6, with_masks: bool = True) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    boxes = make_boxes(rng, n_boxes)
    cams = make_cameras(n_frames, width, height, fov_deg, travel, lateral)
    env_grid = sky_grid()
    env = EnvironmentModel(env_grid)
    full, empty, lab_full, lab_empty, masks = [], [], [], [], []
    for cam in cams:
        img, lab = _render_gt(cam, boxes, env, supersample)
        full.append(img)
        lab_full.append(lab.label)
        if boxes:
            img_e, lab_e = _render_gt(cam, [], env, supersample)
        else:
            img_e, lab_e = img.copy(), lab
        empty.append(img_e)
        lab_empty.append(lab_e.label)
        if with_masks:
            masks.append(unobservable_mask(cam, cams, boxes) if boxes else np.zeros((height, width), bool))
    pts, cols, labs = sample_lidar(cams, boxes, lidar_stride, voxel)
    return SyntheticDataset(cams, full, empty, lab_full, lab_empty, masks, pts, cols, labs, boxes,
                            default_palette(), env_grid, seed,
                            dict(n_boxes=n_boxes, n_frames=n_frames, width=width, height=height))


def _normal_to_quat(n: np.ndarray) -> np.ndarray:
    """Quaternions (w, x, y, z) whose rotation sends +z to each unit normal."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, n)
    c = n @ z
    q = np.concatenate([(1.0 + c)[:, None], axis], axis=1)
    flip = c < -1 + 1e-9
    q[flip] = (0.0, 1.0, 0.0, 0.0)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def oriented_scene(points, normals, colors, labels, scales, opacity: float, palette,
                   sh_degree: int = 0, env_grid=None) -> Scene:
    n = len(points)
    m = (sh_degree + 1) ** 2
    sh = np.zeros((n, m, 3))
    sh[:, 0] = rgb_to_sh0(colors)
    env = EnvironmentModel(env_grid) if env_grid is not None else EnvironmentModel()
    return Scene(points, _normal_to_quat(normals), np.log(np.stack([scales, scales], 1)),
                 np.full(n, logit(opacity)), sh, labels, palette, env, sh_degree)


def build_observed_splats(data: SyntheticDataset, density: int = 2, scale_factor: float = 1.0,
                          opacity: float = 0.99, voxel_px: float = 1.0) -> tuple:
    """Opaque splats lying on every surface point the cameras observe.

    Returns (scene, removal_indices). Surfaces hidden from every camera get no
    splats, which leaves exactly the completely unobservable holes.
    """
    pts, nrm, cols, labs, foot = [], [], [], [], []
    for cam in data.cameras:
        dirs = world_dirs(cam, density).reshape(-1, 3)
        hit = cast(cam.center, dirs, data.boxes)
        m = hit.surface >= 0
        pts.append(hit.point[m])
        nrm.append(hit.normal[m])
        cols.append(hit.color[m])
        labs.append(hit.label[m] * 16 + hit.surface[m])
        depth = cam.world_to_cam(hit.point[m])[:, 2]
        foot.append(depth / cam.fx / density)
    pts, nrm, cols, labs, foot = map(np.concatenate, (pts, nrm, cols, labs, foot))
    # keep the finest sample first, then thin to about voxel_px pixel footprints
    order = np.argsort(foot, kind="stable")
    pts, nrm, cols, labs, foot = pts[order], nrm[order], cols[order], labs[order], foot[order]
    tree = cKDTree(pts)
    keep = np.ones(len(pts), dtype=bool)
    for i in range(len(pts)):
        if not keep[i]:
            continue
        for j in tree.query_ball_point(pts[i], voxel_px * foot[i] * density):
            if j > i:
                keep[j] = False
    pts, nrm, cols, labs = pts[keep], nrm[keep], cols[keep], labs[keep]
    surface = labs % 16
    labs = labs // 16
    # isotropic scale from local spacing among samples of the same surface
    scales = np.empty(len(pts))
    for s in np.unique(surface):
        idx = np.flatnonzero(surface == s)
        k = min(4, len(idx))
        d, _ = cKDTree(pts[idx]).query(pts[idx], k=k)
        scales[idx] = scale_factor * (d[:, 1:].mean(axis=1) if k > 1 else 0.05)
    scene = oriented_scene(pts, nrm, cols, labs, scales, opacity, data.palette, 0, data.env_grid)
    return scene, np.flatnonzero(labs == VEHICLE)
