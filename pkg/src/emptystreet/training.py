"""Two-stage reconstruction, re-optimization after removal, and metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.ndimage import label as cc_label
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .core import CameraFrame, EnvironmentModel, Scene, SemanticPalette, logit
from .grad import DensifyThresholds, OptimState, adam_step, densify, prune_low_opacity
from .losses import (FrameTargets, LossWeights, depth_normals, loss_retrain, objective_and_grads,
                     splat_grads, ssim)
from .rasterizer import RenderOptions, render
from .sh import rgb_to_sh0
from .unveil import RemovalSet, generate_inpaint_mask

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


@dataclass
class TrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 1000
    retrain_steps: int = 800
    densify_interval: int = 100
    densify_until: int | None = None  # defaults to the end of stage 1
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    max_splats: int = 20000
    prune_epsilon: float = 0.3
    prune_interval: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    keyframe_stride: int = 10
    proximity_radius: float | None = None  # None: 2% of the scene diagonal
    reopt_radius: float | None = None  # None: 3x the proximity radius
    alpha_threshold: float = 0.99
    position_lr_final: float = 0.01
    sh_degree: int = 1
    init_opacity: float = 0.1
    ignore_label: int | None = None
    seed_holes: bool = True
    tile_size: int = 64
    seed: int = 0
    lr: dict = field(default_factory=dict)
    # distortion measured on NDC-style depth between these planes; None for metric depth
    distortion_near: float | None = 0.2
    distortion_far: float = 100.0

    @property
    def distortion_depth(self):
        if self.distortion_near is None:
            return None
        return (self.distortion_near, self.distortion_far)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    components: list = field(default_factory=list)
    splat_counts: list = field(default_factory=list)
    events: list = field(default_factory=list)
    label_checks: list = field(default_factory=list)  # (event, step, ok)

    @property
    def labels_intact(self) -> bool:
        return all(ok for _, _, ok in self.label_checks)


def lineage_labels(scene: Scene) -> np.ndarray:
    """Label of each lineage id (index = lineage), -1 where absent.

    Raises ValueError when one lineage carries two different labels.
    """
    lin = scene.lineage
    ok = lin >= 0
    out = np.full(int(lin.max(initial=-1)) + 1, -1, dtype=np.int64)
    out[lin[ok]] = scene.labels[ok]
    if not np.array_equal(out[lin[ok]], scene.labels[ok]):
        raise ValueError("lineage with mixed labels")
    return out


def labels_match_lineage(scene: Scene, roots: np.ndarray) -> bool:
    """Every splat still carries the label its ancestor started with."""
    lin = scene.lineage
    ok = lin >= 0
    if ok.any() and lin[ok].max() >= len(roots):
        return False
    return bool(np.array_equal(scene.labels[ok], roots[lin[ok]]))


def init_from_points(points, colors, labels, palette: SemanticPalette, sh_degree: int = 1,
                     init_opacity: float = 0.1, environment: EnvironmentModel | None = None) -> Scene:
    """One isotropic splat per point, scaled by the mean distance to 3 neighbours."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no points to initialize from")
    labels = np.asarray(labels, dtype=np.int64)
    n = len(pts)
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(pts).query(pts, k=k)
        scale = d[:, 1:].mean(axis=1)
        scale = np.where(scale > 0, scale, np.max(scale[scale > 0], initial=1.0))
    else:
        scale = np.ones(1)
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = rgb_to_sh0(np.asarray(colors, dtype=np.float64).reshape(-1, 3))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return Scene(pts, rot, np.log(np.stack([scale, scale], axis=1)), np.full(n, logit(init_opacity)),
                 sh, labels, palette, environment or EnvironmentModel(), sh_degree)


def _lr_table(cfg: TrainConfig, extent: float, frac: float | None = None) -> dict:
    lr = dict(OptimState().lr)
    lr.update(cfg.lr)
    base = lr["centers"] * extent
    if frac is not None:
        # log-linear decay from base to base * position_lr_final
        base = base * math.exp(frac * math.log(cfg.position_lr_final))
    lr["centers"] = base
    return lr


def _targets(frames, images, labels, i):
    return frames[i], FrameTargets(images[i], None if labels is None else labels[i])


def train_stage1(scene: Scene, frames: list, images: list, labels: list | None, config: TrainConfig,
                 state: OptimState | None = None, history: TrainLog | None = None):
    """Photometric + semantic + shrink objective with adaptive density control."""
    cfg = config
    history = history if history is not None else TrainLog()
    state = state or OptimState.for_scene(scene)
    rng = np.random.default_rng(cfg.seed)
    extent = scene.extent()
    until = cfg.stage1_steps if cfg.densify_until is None else cfg.densify_until
    thr = DensifyThresholds(cfg.grad_threshold, cfg.percent_dense, extent, cfg.min_opacity)
    roots = lineage_labels(scene)
    for step in range(cfg.stage1_steps):
        cam, tg = _targets(frames, images, labels, step % len(frames))
        res, grads, _ = objective_and_grads(scene, cam, tg, cfg.weights, geometry=False,
                                            ignore_label=cfg.ignore_label, tile_size=cfg.tile_size)
        assert res.upstream.distortion is None and res.upstream.per_class_distortion is None
        assert res.upstream.depth is None and res.upstream.normal is None
        state.accumulate(grads)
        adam_step(scene, grads, state, _lr_table(cfg, extent, step / max(cfg.stage1_steps, 1)))
        history.losses.append(res.total)
        history.components.append(res.components)
        if (step + 1) % cfg.densify_interval == 0 and step + 1 < until:
            if len(scene) < cfg.max_splats:
                densify(scene, state, thr, rng)
            else:
                prune_low_opacity(scene, cfg.min_opacity, state)
                state.reset_stats(len(scene))
            history.events.append(("densify", step + 1, len(scene)))
            history.label_checks.append(("densify", step + 1, labels_match_lineage(scene, roots)))
        history.splat_counts.append(len(scene))
    return scene, state, history


def train_stage2(scene: Scene, frames: list, images: list, labels: list | None, config: TrainConfig,
                 state: OptimState | None = None, history: TrainLog | None = None):
    """Full objective with periodic opacity pruning; no densification."""
    cfg = config
    history = history if history is not None else TrainLog()
    state = state or OptimState.for_scene(scene)
    extent = scene.extent()
    roots = lineage_labels(scene)
    for step in range(cfg.stage2_steps):
        cam, tg = _targets(frames, images, labels, step % len(frames))
        res, grads, _ = objective_and_grads(scene, cam, tg, cfg.weights, geometry=True,
                                            ignore_label=cfg.ignore_label, tile_size=cfg.tile_size,
                                            distortion_depth=cfg.distortion_depth)
        adam_step(scene, grads, state, _lr_table(cfg, extent, 1.0))
        history.losses.append(res.total)
        history.components.append(res.components)
        if (step + 1) % cfg.prune_interval == 0 and step + 1 < cfg.stage2_steps:
            before = len(scene)
            prune_low_opacity(scene, cfg.prune_epsilon, state)
            history.events.append(("prune", step + 1, before, len(scene)))
            history.label_checks.append(("prune", step + 1, labels_match_lineage(scene, roots)))
        history.splat_counts.append(len(scene))
    return scene, state, history


def reconstruct(points, colors, labels_pts, palette, frames, images, labels, config: TrainConfig,
                environment: EnvironmentModel | None = None):
    scene = init_from_points(points, colors, labels_pts, palette, config.sh_degree,
                             config.init_opacity, environment)
    hist = TrainLog()
    scene, state, hist = train_stage1(scene, frames, images, labels, config, history=hist)
    scene, _, hist = train_stage2(scene, frames, images, labels, config, history=hist)
    return scene, hist


# -- hole seeding for re-optimization ---------------------------------------

def harmonic_fill(values: np.ndarray, known: np.ndarray, unknown: np.ndarray) -> np.ndarray:
    """Fill ``unknown`` pixels with the discrete harmonic extension of ``values``.

    Affine functions are reproduced exactly, so inverse depth of a plane is
    recovered from its rim. Components without any known neighbour stay NaN.
    """
    H, W = values.shape
    out = np.where(known, values, np.nan)
    unknown = unknown & ~known
    comps, ncomp = cc_label(unknown)
    idx = -np.ones((H, W), dtype=np.int64)
    ys, xs = np.nonzero(unknown)
    idx[ys, xs] = np.arange(len(ys))
    rows, cols, vals = [], [], []
    rhs = np.zeros(len(ys))
    deg = np.zeros(len(ys))
    touches = np.zeros(ncomp + 1, dtype=bool)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ny, nx = ys + dy, xs + dx
        inb = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
        nyc, nxc = np.clip(ny, 0, H - 1), np.clip(nx, 0, W - 1)
        nb_unknown = inb & unknown[nyc, nxc]
        nb_known = inb & known[nyc, nxc]
        deg += nb_unknown | nb_known
        sel = np.flatnonzero(nb_unknown)
        rows.append(sel)
        cols.append(idx[nyc[sel], nxc[sel]])
        vals.append(-np.ones(len(sel)))
        rhs[nb_known] += values[nyc[nb_known], nxc[nb_known]]
        touches[comps[ys[nb_known], xs[nb_known]]] = True
    solvable = touches[comps[ys, xs]]
    if not solvable.any():
        return out
    rows.append(np.arange(len(ys)))
    cols.append(np.arange(len(ys)))
    vals.append(np.where(deg > 0, deg, 1.0))
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(len(ys), len(ys)))
    keep = np.flatnonzero(solvable)
    sol = spsolve(A[keep][:, keep].tocsc(), rhs[keep])
    out[ys[keep], xs[keep]] = sol
    return out


def _normals_to_quat(n: np.ndarray) -> np.ndarray:
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, n)
    c = n @ z
    q = np.concatenate([(1.0 + c)[:, None], axis], axis=1)
    q[c < -1 + 1e-9] = (0.0, 1.0, 0.0, 0.0)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def seed_hole_splats(scene: Scene, camera: CameraFrame, image: np.ndarray, mask: np.ndarray,
                     alpha_floor: float = 0.9, opacity: float = 0.6, min_spacing: float = 0.7):
    """New splats on pixels of ``mask`` the scene leaves uncovered.

    Depth inside the hole is the harmonic extension of the surrounding inverse
    depth; orientation follows the normals of the filled depth map; labels
    come from the nearest existing splat.
    """
    buf = render(scene, camera, RenderOptions(include_environment=False))
    need = mask & (buf.alpha < alpha_floor)
    if not need.any() or len(scene) == 0:
        return None
    known = (buf.alpha > 0.5) & ~mask & (buf.depth > 0)
    inv = harmonic_fill(np.where(known, 1.0 / np.where(known, buf.depth, 1.0), 0.0), known, mask)
    depth = np.where(np.isfinite(inv) & (inv > 0), 1.0 / np.where(inv > 0, inv, 1.0), 0.0)
    depth = np.where(known, buf.depth, depth)
    ys, xs = np.nonzero(need & (depth > 0))
    if len(ys) == 0:
        return None
    N, valid, _ = depth_normals(depth, camera)
    rays = camera.pixel_rays()[ys, xs]
    z = depth[ys, xs]
    p_cam = rays * z[:, None]
    n_cam = np.where(valid[ys, xs, None], N[ys, xs], -rays / np.linalg.norm(rays, axis=1, keepdims=True))
    world = (p_cam - camera.translation) @ camera.rotation
    n_world = n_cam @ camera.rotation
    foot = z / camera.fx
    # skip pixels already served by a seed or splat closer than the footprint
    tree = cKDTree(scene.centers.astype(np.float64))
    dist, nearest = tree.query(world)
    take = []
    placed = []
    for i in range(len(world)):
        if placed:
            d2 = np.min(np.sum((np.asarray(placed) - world[i]) ** 2, axis=1))
            if d2 < (min_spacing * foot[i]) ** 2:
                continue
        placed.append(world[i])
        take.append(i)
    take = np.asarray(take, dtype=np.int64)
    m = (scene.sh_degree + 1) ** 2
    sh = np.zeros((len(take), m, 3))
    sh[:, 0] = rgb_to_sh0(image[ys[take], xs[take]])
    s = foot[take]
    return dict(centers=world[take], rotations=_normals_to_quat(n_world[take]),
                log_scales=np.log(np.stack([s, s], axis=1)),
                opacity_logits=np.full(len(take), logit(opacity)), sh=sh,
                labels=scene.labels[nearest[take]], lineage=np.full(len(take), -1, dtype=np.int64))


def _append_splats(scene: Scene, extra: dict) -> Scene:
    return Scene(np.concatenate([scene.centers, extra["centers"].astype(scene.centers.dtype)]),
                 np.concatenate([scene.rotations, extra["rotations"].astype(scene.rotations.dtype)]),
                 np.concatenate([scene.log_scales, extra["log_scales"].astype(scene.log_scales.dtype)]),
                 np.concatenate([scene.opacity_logits,
                                 extra["opacity_logits"].astype(scene.opacity_logits.dtype)]),
                 np.concatenate([scene.sh, extra["sh"].astype(scene.sh.dtype)]),
                 np.concatenate([scene.labels, extra["labels"]]), scene.palette, scene.environment,
                 scene.sh_degree, np.concatenate([scene.lineage, extra["lineage"]]))


@dataclass
class ReoptResult:
    scene: Scene
    frozen: np.ndarray
    n_seeded: int
    history: TrainLog


def frozen_unchanged(before: Scene, removal: RemovalSet, result: ReoptResult) -> bool:
    """Frozen splats of ``result`` are bitwise equal to their pre-removal selves."""
    kept = before.subset(removal.keep_mask(len(before)))
    n0 = len(kept)
    f = result.frozen[:n0]
    after = result.scene
    for name in ("centers", "rotations", "log_scales", "opacity_logits", "sh", "labels"):
        if getattr(kept, name)[f].tobytes() != getattr(after, name)[:n0][f].tobytes():
            return False
    return after.environment.grid.tobytes() == before.environment.grid.tobytes()


def reoptimize(scene: Scene, removal: RemovalSet, pseudo_labels: dict, cameras: list,
               config: TrainConfig, masks: dict | None = None) -> ReoptResult:
    """Delete the removal set and fit the splats near it to the pseudo-labels.

    Splats farther than the re-optimization radius from every removed center,
    and the environment, stay bit-identical.
    """
    cfg = config
    hist = TrainLog()
    if len(removal) == 0:
        out = scene.copy()
        return ReoptResult(out, np.ones(len(out), dtype=bool), 0, hist)
    keep = removal.keep_mask(len(scene))
    removed_centers = scene.centers[~keep].astype(np.float64)
    out = scene.subset(keep)
    out.environment = scene.environment.copy()
    radius = cfg.reopt_radius
    if radius is None:
        radius = 3 * (cfg.proximity_radius if cfg.proximity_radius is not None
                      else removal.radius or 0.02 * scene.extent())
    if len(out):
        d, _ = cKDTree(removed_centers).query(out.centers.astype(np.float64))
        frozen = d > radius
    else:
        frozen = np.zeros(0, dtype=bool)
    n_seed = 0
    roots = lineage_labels(scene)
    by_t = {c.time_index: c for c in cameras}
    order = sorted(pseudo_labels, reverse=True)
    if cfg.seed_holes:
        for t in order:
            cam = by_t[t]
            m = masks[t] if masks is not None else generate_inpaint_mask(
                scene, removal, cam, cfg.alpha_threshold).mask
            extra = seed_hole_splats(out, cam, pseudo_labels[t], m)
            if extra is None:
                continue
            out = _append_splats(out, extra)
            hist.label_checks.append(("seed", t, labels_match_lineage(out, roots)))
            frozen = np.concatenate([frozen, np.zeros(len(extra["labels"]), dtype=bool)])
            n_seed += len(extra["labels"])
    extent = scene.extent()
    state = OptimState.for_scene(out)
    lr = _lr_table(cfg, extent, 1.0)
    for step in range(cfg.retrain_steps):
        t = order[step % len(order)]
        cam = by_t[t]
        buf = render(out, cam, RenderOptions(tile_size=cfg.tile_size,
                                             distortion_depth=cfg.distortion_depth))
        res = loss_retrain(buf.color, pseudo_labels[t], buf, cfg.weights, cam)
        grads = splat_grads(out, cam, buf, res)
        adam_step(out, grads, state, lr, frozen=frozen, update_environment=False)
        hist.losses.append(res.total)
        hist.components.append(res.components)
        hist.label_checks.append(("retrain", step + 1, labels_match_lineage(out, roots)))
    return ReoptResult(out, frozen, n_seed, hist)


# -- metrics ------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            return float("nan")
        diff = diff[m]
    mse = float(diff.mean())
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def evaluate(scene: Scene, cameras: list, gt_images: list, masks: list | None = None) -> dict:
    """Per-frame and mean PSNR/SSIM, plus PSNR restricted to ``masks`` if given."""
    if len(cameras) != len(gt_images):
        raise ValueError("camera and image counts differ")
    rows = []
    for i, (cam, gt) in enumerate(zip(cameras, gt_images)):
        img = render(scene, cam, RenderOptions()).color
        if img.shape != np.shape(gt):
            raise ValueError(f"frame {i}: render {img.shape} vs ground truth {np.shape(gt)}")
        row = {"frame": cam.time_index, "psnr": psnr(img, gt), "ssim": ssim(img, gt)}
        if masks is not None and masks[i] is not None and np.any(masks[i]):
            row["masked_psnr"] = psnr(img, gt, masks[i])
            row["masked_l1"] = float(np.abs(img - gt)[np.asarray(masks[i], bool)].mean())
        rows.append(row)
    report = {"frames": rows, "psnr": float(np.mean([r["psnr"] for r in rows])),
              "ssim": float(np.mean([r["ssim"] for r in rows]))}
    mp = [r["masked_psnr"] for r in rows if "masked_psnr" in r]
    if mp:
        report["masked_psnr"] = float(np.mean(mp))
    return report


def semantic_accuracy(scene: Scene, cameras: list, gt_labels: list, alpha_min: float = 0.5) -> float:
    hit = tot = 0
    for cam, gt in zip(cameras, gt_labels):
        buf = render(scene, cam, RenderOptions(include_environment=False))
        cov = buf.alpha > alpha_min
        pred = buf.semantic.argmax(-1)
        hit += int((pred[cov] == np.asarray(gt)[cov]).sum())
        tot += int(cov.sum())
    return hit / tot if tot else float("nan")
