"""Ray/splat intersection and front-to-back compositing of 2D Gaussian splats.

The vectorized renderer works on a flat list of (pixel, splat) hit pairs.
Splats are depth-sorted once per view by camera-space center depth, pairs are
enumerated tile by tile from projected 3-sigma bounding boxes, and all
per-pixel blending runs as segmented prefix sums over the pair list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CameraFrame, Scene, Splat2D, quat_to_matrix, sigmoid
from .sh import eval_colors

NEAR = 0.05
CUTOFF_SQ = 9.0
MIN_WEIGHT = 1.0 / 255.0
MAX_ALPHA = 0.99
PARALLEL_EPS = 1e-9
DEPTH_EPS = 1e-8


@dataclass
class RenderOptions:
    include_environment: bool = True
    semantic_filter: int | None = None
    sh_eval_degree: int | None = None
    tile_size: int = 64
    per_class: bool = False
    # (near, far): measure distortion on far/(far-near) * (1 - near/z) instead of z
    distortion_depth: tuple | None = None


@dataclass
class RenderBuffers:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    semantic: np.ndarray
    distortion: np.ndarray
    per_class_distortion: np.ndarray | None = None
    ctx: dict = field(default=None, repr=False)

    @property
    def shape(self):
        return self.alpha.shape


# ---------------------------------------------------------------- scalar path

def intersect(splat: Splat2D, camera: CameraFrame, pixel):
    """Local (u, v) and camera depth of the pixel ray's hit on the splat plane, or None."""
    x, y = pixel
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ValueError(f"pixel {pixel} outside the {camera.width}x{camera.height} image")
    Rc, tc = camera.rotation, camera.translation
    R = quat_to_matrix(splat.rotation)
    frame = Rc @ R
    p = Rc @ splat.center.astype(np.float64) + tc
    tu, tv, n = frame[:, 0], frame[:, 1], frame[:, 2]
    su, sv = np.exp(splat.log_scales.astype(np.float64))
    dx, dy = (x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy
    m = dx * n[0] + dy * n[1] + n[2]
    if abs(m) < PARALLEL_EPS * math.sqrt(dx * dx + dy * dy + 1.0):
        return None
    tau = (p[0] * n[0] + p[1] * n[1] + p[2] * n[2]) / m
    if tau <= NEAR:
        return None
    rx, ry, rz = tau * dx - p[0], tau * dy - p[1], tau - p[2]
    u = (rx * tu[0] + ry * tu[1] + rz * tu[2]) / su
    v = (rx * tv[0] + ry * tv[1] + rz * tv[2]) / sv
    if u * u + v * v > CUTOFF_SQ:
        return None
    return float(u), float(v), float(tau)


@dataclass
class PixelOutputs:
    color: np.ndarray
    alpha: float
    depth: float
    normal: np.ndarray
    semantic: np.ndarray
    distortion: float


def splat_color(splat: Splat2D, camera: CameraFrame, degree: int | None = None) -> np.ndarray:
    deg = int(round(math.sqrt(len(splat.color_sh)))) - 1 if degree is None else degree
    colors, _ = eval_colors(splat.color_sh[None], splat.center[None].astype(np.float64),
                            camera.center, deg)
    return colors[0]


def camera_facing_normal(splat: Splat2D, camera: CameraFrame) -> np.ndarray:
    n = camera.rotation @ quat_to_matrix(splat.rotation)[:, 2]
    p = camera.world_to_cam(splat.center)
    return -n if float(n @ p) > 0 else n


def distortion_depth(z, near_far=None):
    """Depth used by the distortion terms and its derivative w.r.t. z."""
    z = np.asarray(z, dtype=np.float64)
    if near_far is None:
        return z, np.ones_like(z)
    near, far = near_far
    k = far / (far - near)
    return k * (1.0 - near / z), k * near / (z * z)


def composite_pixel(hits, env_color=None, *, camera: CameraFrame, num_labels: int,
                    include_environment: bool = True, sh_degree: int | None = None,
                    cache: dict | None = None, depth_map=None) -> PixelOutputs:
    """Blend hits (splat, u, v, z) front to back in the order given.

    ``cache`` may map id(splat) to its (color, normal) so repeated calls over
    an image skip the SH evaluation.
    """
    color = np.zeros(3)
    normal = np.zeros(3)
    semantic = np.zeros(num_labels)
    trans = 1.0
    acc = 0.0
    acc_z = 0.0
    weights, depths = [], []
    for splat, u, v, z in hits:
        a = splat.opacity * gaussian(u, v)
        if a < MIN_WEIGHT:
            continue
        a = min(a, MAX_ALPHA)
        w = a * trans
        if cache is None or id(splat) not in cache:
            resolved = (splat_color(splat, camera, sh_degree), camera_facing_normal(splat, camera))
            if cache is not None:
                cache[id(splat)] = resolved
        else:
            resolved = cache[id(splat)]
        color += w * resolved[0]
        normal += w * resolved[1]
        semantic[splat.label] += w
        acc += w
        acc_z += w * z
        weights.append(w)
        depths.append(float(distortion_depth(z, depth_map)[0]))
        trans *= 1.0 - a
    # running sums in depth order: sum_{i<j} w_i w_j |z_i - z_j|
    distortion = 0.0
    run_w = run_wz = 0.0
    for i in sorted(range(len(depths)), key=lambda k: depths[k]):
        distortion += weights[i] * (depths[i] * run_w - run_wz)
        run_w += weights[i]
        run_wz += weights[i] * depths[i]
    if include_environment and env_color is not None:
        color = color + (1.0 - acc) * np.asarray(env_color, dtype=np.float64)
    return PixelOutputs(color, acc, acc_z / max(acc, DEPTH_EPS), normal, semantic, distortion)


def gaussian(u: float, v: float) -> float:
    return math.exp(-(u * u + v * v) / 2.0)


# ------------------------------------------------------------ vectorized path

def _segments(keys: np.ndarray):
    """Start offsets and lengths of runs of equal values in a sorted key array."""
    if len(keys) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    starts = np.flatnonzero(np.diff(keys)) + 1
    starts = np.concatenate([[0], starts])
    lengths = np.diff(np.concatenate([starts, [len(keys)]]))
    return starts, lengths


def seg_exclusive_cumsum(x: np.ndarray, starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return x.copy()
    cs = np.cumsum(x)
    excl = cs - x
    return excl - np.repeat(excl[starts], lengths)


def seg_exclusive_suffix(x: np.ndarray, starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """sum over later elements of the same segment."""
    if len(x) == 0:
        return x.copy()
    incl = seg_exclusive_cumsum(x, starts, lengths) + x
    totals = np.add.reduceat(x, starts)
    return np.repeat(totals, lengths) - incl


def composite_segments(a: np.ndarray, starts, lengths):
    """Transmittance before each hit and blend weights, per segment."""
    log_t = seg_exclusive_cumsum(np.log1p(-a), starts, lengths)
    trans = np.exp(log_t)
    return trans, a * trans


def distortion_terms(w: np.ndarray, z: np.ndarray, keys: np.ndarray):
    """Per-hit distortion contributions in depth order within each key.

    Returns (order, starts, lengths, w_prev, wz_prev) with the running sums
    indexed in the depth-sorted order.
    """
    order = np.lexsort((z, keys))
    ks = keys[order]
    starts, lengths = _segments(ks)
    ws = w[order]
    zs = z[order]
    w_prev = seg_exclusive_cumsum(ws, starts, lengths)
    wz_prev = seg_exclusive_cumsum(ws * zs, starts, lengths)
    return order, starts, lengths, w_prev, wz_prev


def _bincount(idx, weights, n):
    if len(idx) == 0:
        return np.zeros(n)
    return np.bincount(idx, weights, minlength=n)


def _splat_geometry(scene: Scene, camera: CameraFrame, keep: np.ndarray, sh_degree: int):
    ids = np.flatnonzero(keep)
    Rc, tc = camera.rotation, camera.translation
    centers = scene.centers[ids].astype(np.float64)
    p_c = centers @ Rc.T + tc
    R = quat_to_matrix(scene.rotations[ids])
    frame = np.einsum("ij,njk->nik", Rc, R)
    tu, tv, n = frame[:, :, 0], frame[:, :, 1], frame[:, :, 2]
    scales = np.exp(scene.log_scales[ids].astype(np.float64))
    opac = sigmoid(scene.opacity_logits[ids].astype(np.float64))
    colors, color_cache = eval_colors(scene.sh[ids], centers, camera.center, sh_degree)
    flip = np.where(np.sum(n * p_c, axis=1) > 0, -1.0, 1.0)
    # projected square for pair culling; hits beyond the radius where
    # opacity * G < 1/255 would be dropped anyway
    with np.errstate(divide="ignore"):
        reach = np.sqrt(np.clip(2 * np.log(np.maximum(opac, 1e-300) / MIN_WEIGHT), 0.0, CUTOFF_SQ))
    reach = reach * (1 + 1e-6)
    corners = (p_c[:, None, :]
               + (reach * scales[:, 0])[:, None, None] * tu[:, None, :] * np.array([1, 1, -1, -1])[None, :, None]
               + (reach * scales[:, 1])[:, None, None] * tv[:, None, :] * np.array([1, -1, 1, -1])[None, :, None])
    cz = corners[..., 2]
    any_front = (cz > NEAR).any(1)
    all_front = (cz > NEAR).all(1)
    W, H = camera.width, camera.height
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * corners[..., 0] / cz + camera.cx
        py = camera.fy * corners[..., 1] / cz + camera.cy
    bx0 = np.where(all_front, np.floor(np.nan_to_num(px.min(1), nan=0.0, posinf=W, neginf=-1)), 0)
    bx1 = np.where(all_front, np.ceil(np.nan_to_num(px.max(1), nan=0.0, posinf=W, neginf=-1)), W - 1)
    by0 = np.where(all_front, np.floor(np.nan_to_num(py.min(1), nan=0.0, posinf=H, neginf=-1)), 0)
    by1 = np.where(all_front, np.ceil(np.nan_to_num(py.max(1), nan=0.0, posinf=H, neginf=-1)), H - 1)
    bx0 = np.clip(bx0, -1, W).astype(np.int64)
    bx1 = np.clip(bx1, -1, W).astype(np.int64)
    by0 = np.clip(by0, -1, H).astype(np.int64)
    by1 = np.clip(by1, -1, H).astype(np.int64)
    visible = any_front & (opac >= MIN_WEIGHT) & (bx1 >= 0) & (bx0 <= W - 1) & (by1 >= 0) & (by0 <= H - 1)
    bx0, by0 = np.maximum(bx0, 0), np.maximum(by0, 0)
    bx1, by1 = np.minimum(bx1, W - 1), np.minimum(by1, H - 1)
    order = np.argsort(p_c[:, 2], kind="stable")
    return dict(ids=ids, p_c=p_c, tu=tu, tv=tv, n=n, scales=scales, opac=opac, colors=colors,
                color_cache=color_cache, flip=flip, bbox=(bx0, bx1, by0, by1), visible=visible,
                order=order, labels=scene.labels[ids])


def _tile_pairs(geo, camera: CameraFrame, x0, x1, y0, y1):
    """Hit pairs for the tile [x0, x1) x [y0, y1), splats in depth order."""
    bx0, bx1, by0, by1 = geo["bbox"]
    order = geo["order"]
    sel = geo["visible"][order] & (bx0[order] < x1) & (bx1[order] >= x0) \
        & (by0[order] < y1) & (by1[order] >= y0)
    sid = order[sel]
    if len(sid) == 0:
        return None
    lx0 = np.maximum(bx0[sid], x0)
    lx1 = np.minimum(bx1[sid], x1 - 1)
    ly0 = np.maximum(by0[sid], y0)
    ly1 = np.minimum(by1[sid], y1 - 1)
    bw = lx1 - lx0 + 1
    cnt = bw * (ly1 - ly0 + 1)
    total = int(cnt.sum())
    if total == 0:
        return None
    rep = np.repeat(np.arange(len(sid)), cnt)
    offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    bw_r = bw[rep]
    px = lx0[rep] + offs % bw_r
    py = ly0[rep] + offs // bw_r
    sid = sid[rep]

    d = np.empty((total, 3))
    d[:, 0] = (px - camera.cx) / camera.fx
    d[:, 1] = (py - camera.cy) / camera.fy
    d[:, 2] = 1.0
    n = geo["n"][sid]
    p = geo["p_c"][sid]
    m = np.einsum("ij,ij->i", d, n)
    ok = np.abs(m) >= PARALLEL_EPS * np.linalg.norm(d, axis=1)
    m_safe = np.where(ok, m, 1.0)
    tau = np.einsum("ij,ij->i", p, n) / m_safe
    r = tau[:, None] * d - p
    sc = geo["scales"][sid]
    u = np.einsum("ij,ij->i", r, geo["tu"][sid]) / sc[:, 0]
    v = np.einsum("ij,ij->i", r, geo["tv"][sid]) / sc[:, 1]
    rr = u * u + v * v
    ok &= (tau > NEAR) & (rr <= CUTOFF_SQ)
    G = np.exp(-0.5 * rr)
    a_raw = geo["opac"][sid] * G
    ok &= a_raw >= MIN_WEIGHT
    pix = py * camera.width + px
    keep = np.flatnonzero(ok)
    # stable sort by pixel keeps the per-splat depth order inside each pixel
    srt = keep[np.argsort(pix[keep], kind="stable")]
    a = a_raw[srt]
    return dict(sid=sid[srt], pix=pix[srt], d=d[srt], m=m_safe[srt], tau=tau[srt], r=r[srt],
                u=u[srt], v=v[srt], G=G[srt], a=np.minimum(a, MAX_ALPHA), clamped=a > MAX_ALPHA)


_PAIR_KEYS = ("sid", "pix", "d", "m", "tau", "r", "u", "v", "G", "a", "clamped")


def _empty_pairs():
    return dict(sid=np.zeros(0, np.int64), pix=np.zeros(0, np.int64), d=np.zeros((0, 3)),
                m=np.zeros(0), tau=np.zeros(0), r=np.zeros((0, 3)), u=np.zeros(0),
                v=np.zeros(0), G=np.zeros(0), a=np.zeros(0), clamped=np.zeros(0, bool))


def world_ray_dirs(camera: CameraFrame) -> np.ndarray:
    return camera.pixel_rays().reshape(-1, 3) @ camera.rotation


def render(scene: Scene, camera: CameraFrame, options: RenderOptions | None = None) -> RenderBuffers:
    options = options or RenderOptions()
    W, H = camera.width, camera.height
    if W <= 0 or H <= 0:
        raise ValueError("cannot render a zero-sized image")
    if options.tile_size <= 0:
        raise ValueError("tile_size must be positive")
    deg = scene.sh_degree if options.sh_eval_degree is None else options.sh_eval_degree
    if deg > scene.sh_degree:
        raise ValueError("sh_eval_degree exceeds the scene's SH degree")
    K = len(scene.palette)
    npix = W * H

    keep = np.ones(len(scene), dtype=bool)
    if options.semantic_filter is not None:
        keep &= scene.labels == options.semantic_filter
    geo = _splat_geometry(scene, camera, keep, deg)

    chunks = []
    ts = options.tile_size
    for ty in range(0, H, ts):
        for tx in range(0, W, ts):
            tp = _tile_pairs(geo, camera, tx, min(tx + ts, W), ty, min(ty + ts, H))
            if tp is not None:
                chunks.append(tp)
    if chunks:
        pairs = {k: np.concatenate([c[k] for c in chunks]) for k in _PAIR_KEYS}
    else:
        pairs = _empty_pairs()

    sid, pix, a, tau = pairs["sid"], pairs["pix"], pairs["a"], pairs["tau"]
    starts, lengths = _segments(pix)
    trans, w = composite_segments(a, starts, lengths)
    labels = geo["labels"][sid]

    alpha = _bincount(pix, w, npix)
    color = np.stack([_bincount(pix, w * geo["colors"][sid, c], npix) for c in range(3)], -1)
    nrm = geo["n"][sid] * geo["flip"][sid, None]
    normal = np.stack([_bincount(pix, w * nrm[:, c], npix) for c in range(3)], -1)
    semantic = _bincount(pix * K + labels, w, npix * K).reshape(npix, K)
    acc_z = _bincount(pix, w * tau, npix)
    depth = acc_z / np.maximum(alpha, DEPTH_EPS)

    zd, dzd = distortion_depth(tau, options.distortion_depth)
    dorder, dstarts, dlengths, w_prev, wz_prev = distortion_terms(w, zd, pix)
    ws, zs = w[dorder], zd[dorder]
    distortion = _bincount(pix[dorder], ws * (zs * w_prev - wz_prev), npix)

    env = None
    if options.include_environment:
        env = scene.environment.query(world_ray_dirs(camera))
        color = color + (1.0 - alpha)[:, None] * env

    ctx = dict(geo=geo, pairs=pairs, starts=starts, lengths=lengths, trans=trans, w=w,
               labels=labels, dist=(dorder, dstarts, dlengths, w_prev, wz_prev), env=env, zd=zd, dzd=dzd,
               options=options, num_splats=len(scene), sh_degree=deg, camera=camera)

    per_class = None
    if options.per_class:
        per_class, pc_ctx = _per_class_distortion(w, zd, pix, labels, K, npix)
        ctx["per_class"] = pc_ctx

    return RenderBuffers(
        color=color.reshape(H, W, 3), alpha=alpha.reshape(H, W), depth=depth.reshape(H, W),
        normal=normal.reshape(H, W, 3), semantic=semantic.reshape(H, W, K),
        distortion=distortion.reshape(H, W),
        per_class_distortion=None if per_class is None else per_class.reshape(K, H, W),
        ctx=ctx)


def _per_class_distortion(w, tau, pix, labels, K, npix):
    """Distortion restricted to same-label pairs, using the full-scene blend weights.

    Each label's map therefore sums a subset of the global pair terms.
    """
    key = pix * K + labels
    dorder, dstarts, dlengths, w_prev, wz_prev = distortion_terms(w, tau, key)
    ws, zs = w[dorder], tau[dorder]
    vals = _bincount(key[dorder], ws * (zs * w_prev - wz_prev), npix * K)
    out = vals.reshape(npix, K).T.copy()
    return out, dict(key=key, dist=(dorder, dstarts, dlengths, w_prev, wz_prev))


def render_per_class_distortion(scene: Scene, camera: CameraFrame, label: int,
                                tile_size: int = 64) -> np.ndarray:
    """Distortion map over pairs of splats that both carry ``label``."""
    if label < 0 or label >= len(scene.palette):
        return np.zeros((camera.height, camera.width))
    buf = render(scene, camera, RenderOptions(include_environment=False, per_class=True,
                                              tile_size=tile_size))
    return buf.per_class_distortion[label]


def render_reference(scene: Scene, camera: CameraFrame, include_environment: bool = True,
                     depth_map=None):
    """Straight per-pixel loop over all splats, no culling or tiling.

    Slow; meant as an independent check of ``render`` on small scenes.
    """
    K = len(scene.palette)
    splats = [scene.splat(i) for i in range(len(scene))]
    depth_key = [float(camera.world_to_cam(s.center)[2]) for s in splats]
    ordered = [splats[i] for i in sorted(range(len(splats)), key=lambda i: depth_key[i])]
    H, W = camera.height, camera.width
    dirs = world_ray_dirs(camera).reshape(H, W, 3)
    out = dict(color=np.zeros((H, W, 3)), alpha=np.zeros((H, W)), depth=np.zeros((H, W)),
               normal=np.zeros((H, W, 3)), semantic=np.zeros((H, W, K)),
               distortion=np.zeros((H, W)))
    cache = {}
    for y in range(H):
        for x in range(W):
            hits = []
            for s in ordered:
                hit = intersect(s, camera, (x, y))
                if hit is not None:
                    hits.append((s,) + hit)
            env = scene.environment.query(dirs[y, x][None])[0] if include_environment else None
            res = composite_pixel(hits, env, camera=camera, num_labels=K,
                                  include_environment=include_environment, cache=cache,
                                  depth_map=depth_map)
            out["color"][y, x] = res.color
            out["alpha"][y, x] = res.alpha
            out["depth"][y, x] = res.depth
            out["normal"][y, x] = res.normal
            out["semantic"][y, x] = res.semantic
            out["distortion"][y, x] = res.distortion
    return out
