"""Training objectives. Each returns a scalar together with the upstream
gradients consumed by :func:`emptystreet.grad.backward`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .core import Scene
from .grad import PixelGrads, SplatGrads, backward
from .rasterizer import RenderBuffers, RenderOptions, render

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
NORMAL_ALPHA_GATE = 0.5
SEMANTIC_ALPHA_FLOOR = 1e-4
CE_PROB_FLOOR = 1e-6


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_d: float = 100.0
    lambda_n: float = 0.05
    lambda_ds: float = 100.0
    lambda_s: float = 0.1
    lambda_alpha: float = 0.001

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # zero padded 'same' filtering over the two image axes
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def ssim(x: np.ndarray, y: np.ndarray, window: int = 11, sigma: float = 1.5, grad: bool = False):
    """Mean SSIM over pixels and channels; optionally its gradient w.r.t. ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    win = gaussian_window(window, sigma)
    m1, m2 = _blur(x, win), _blur(y, win)
    e11, e22, e12 = _blur(x * x, win), _blur(y * y, win), _blur(x * y, win)
    A1 = 2 * m1 * m2 + SSIM_C1
    A2 = 2 * (e12 - m1 * m2) + SSIM_C2
    B1 = m1 * m1 + m2 * m2 + SSIM_C1
    B2 = (e11 - m1 * m1) + (e22 - m2 * m2) + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    value = float(S.mean())
    if not grad:
        return value
    scale = 1.0 / S.size
    g_m1 = scale * S * (2 * m2 / A1 - 2 * m2 / A2 - 2 * m1 / B1 + 2 * m1 / B2)
    g_e11 = scale * S * (-1.0 / B2)
    g_e12 = scale * S * (2.0 / A2)
    gx = _blur(g_m1, win) + 2 * x * _blur(g_e11, win) + y * _blur(g_e12, win)
    return value, gx


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def loss_l1(rendered, target):
    _check_shapes(rendered, target)
    diff = np.asarray(rendered, dtype=np.float64) - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss_rgb(rendered, target, lam: float = 0.2):
    """(1 - lam) * L1 + lam * (1 - SSIM) / 2, with its image gradient."""
    _check_shapes(rendered, target)
    l1, g1 = loss_l1(rendered, target)
    if lam == 0:
        return l1, (1 - lam) * g1
    s, gs = ssim(rendered, target, grad=True)
    value = (1 - lam) * l1 + lam * (1 - s) / 2
    return value, (1 - lam) * g1 - lam * gs / 2


def loss_depth_distortion(buffers: RenderBuffers):
    d = buffers.distortion
    return float(d.mean()), PixelGrads(distortion=np.full(d.shape, 1.0 / d.size))


def depth_normals(depth: np.ndarray, camera):
    """Camera-facing normals from central differences of back-projected depth.

    Returns (N, valid, cache); border pixels and degenerate crosses are invalid.
    """
    H, W = depth.shape
    rays = camera.pixel_rays()
    P = depth[..., None] * rays
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    c = np.cross(dy, dx)
    cn = np.linalg.norm(c, axis=-1)
    valid = np.zeros((H, W), dtype=bool)
    valid[1:-1, 1:-1] = cn > 1e-12
    N = np.zeros((H, W, 3))
    inner = c / np.maximum(cn, 1e-12)[..., None]
    N[1:-1, 1:-1] = inner
    return N, valid, (rays, dx, dy, cn, inner)


def _depth_normals_backward(g_N: np.ndarray, cache, shape):
    rays, dx, dy, cn, inner = cache
    g = g_N[1:-1, 1:-1]
    g_c = (g - inner * np.sum(inner * g, axis=-1, keepdims=True)) / np.maximum(cn, 1e-12)[..., None]
    g_dy = np.cross(dx, g_c)
    g_dx = np.cross(g_c, dy)
    H, W = shape
    g_P = np.zeros((H, W, 3))
    g_P[1:-1, 2:] += g_dx
    g_P[1:-1, :-2] -= g_dx
    g_P[2:, 1:-1] += g_dy
    g_P[:-2, 1:-1] -= g_dy
    return np.sum(g_P * rays, axis=-1)


def normal_gate(alpha: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Pixels (and their 4 neighbours) covered with alpha above the gate."""
    ok = alpha > NORMAL_ALPHA_GATE
    gate = valid.copy()
    gate[1:-1, 1:-1] &= ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1]
    return gate


def loss_normal_consistency(buffers: RenderBuffers, camera=None):
    """Mean over gated pixels of sum_i w_i (1 - n_i . N) = alpha - normal . N."""
    camera = camera or buffers.ctx["camera"]
    N, valid, cache = depth_normals(buffers.depth, camera)
    gate = normal_gate(buffers.alpha, valid)
    count = int(gate.sum())
    shape = buffers.alpha.shape
    if count == 0:
        return 0.0, PixelGrads()
    per_pixel = buffers.alpha - np.sum(buffers.normal * N, axis=-1)
    value = float(per_pixel[gate].sum() / count)
    gm = gate / count
    g_alpha = gm.astype(np.float64)
    g_normal = -N * gm[..., None]
    g_N = -buffers.normal * gm[..., None]
    g_depth = _depth_normals_backward(g_N, cache, shape)
    return value, PixelGrads(alpha=g_alpha, normal=g_normal, depth=g_depth)


def loss_semantic(rendered_semantic: np.ndarray, target_labels: np.ndarray,
                  ignore_label: int | None = None):
    """Mean cross-entropy of the alpha-normalized label distribution.

    Pixels with alpha below 1e-4 (and ``ignore_label`` targets) are excluded.
    """
    S = np.asarray(rendered_semantic, dtype=np.float64)
    t = np.asarray(target_labels)
    H, W, K = S.shape
    if t.shape != (H, W):
        raise ValueError(f"label map shape {t.shape} does not match {(H, W)}")
    if t.min(initial=0) < 0 or t.max(initial=0) >= K:
        raise ValueError(f"label id out of range [0, {K})")
    A = S.sum(-1)
    inc = A >= SEMANTIC_ALPHA_FLOOR
    if ignore_label is not None:
        inc &= t != ignore_label
    count = int(inc.sum())
    g = np.zeros_like(S)
    if count == 0:
        return 0.0, PixelGrads(semantic=g)
    St = np.take_along_axis(S, t[..., None], axis=-1)[..., 0]
    Asafe = np.where(inc, A, 1.0)
    p = St / Asafe
    floored = p < CE_PROB_FLOOR
    ce = -np.log(np.maximum(p, CE_PROB_FLOOR))
    value = float(ce[inc].sum() / count)
    live = inc & ~floored
    scale = live / count
    g += (scale / Asafe)[..., None]
    onehot = np.zeros_like(S)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    g -= onehot * (scale / np.where(live, St, 1.0))[..., None]
    return value, PixelGrads(semantic=g)


def loss_semantic_distortion(buffers: RenderBuffers | Scene, camera=None):
    """Sum over labels of the mean same-label distortion map."""
    if isinstance(buffers, Scene):
        buffers = render(buffers, camera, RenderOptions(include_environment=False, per_class=True))
    pc = buffers.per_class_distortion
    if pc is None:
        raise ValueError("buffers were rendered without per-class distortion")
    npix = pc.shape[1] * pc.shape[2]
    return float(pc.sum() / npix), PixelGrads(per_class_distortion=np.full(pc.shape, 1.0 / npix))


def loss_shrink(scene: Scene):
    """Mean splat opacity and its gradient w.r.t. the opacity logits."""
    n = len(scene)
    if n == 0:
        return 0.0, np.zeros(0)
    op = scene.opacities
    return float(op.mean()), op * (1.0 - op) / n


@dataclass
class FrameTargets:
    image: np.ndarray
    labels: np.ndarray | None = None


@dataclass
class LossResult:
    total: float
    components: dict
    upstream: PixelGrads
    shrink_grad: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def loss_total(scene: Scene, camera, buffers: RenderBuffers, targets: FrameTargets,
               weights: LossWeights | None = None, geometry: bool = True,
               ignore_label: int | None = None) -> LossResult:
    """Weighted objective; ``geometry`` toggles the depth/normal/semantic-depth terms."""
    w = weights or LossWeights()
    comps = {}
    l_rgb, g_img = loss_rgb(buffers.color, targets.image, w.lambda_ssim)
    comps["rgb"] = l_rgb
    up = PixelGrads(color=g_img)
    if geometry:
        l_d, g = loss_depth_distortion(buffers)
        comps["d"] = l_d
        up = up + g.scaled(w.lambda_d)
        l_n, g = loss_normal_consistency(buffers, camera)
        comps["n"] = l_n
        up = up + g.scaled(w.lambda_n)
        l_ds, g = loss_semantic_distortion(buffers)
        comps["ds"] = l_ds
        up = up + g.scaled(w.lambda_ds)
    else:
        comps["d"] = comps["n"] = comps["ds"] = 0.0
    if targets.labels is not None:
        l_s, g = loss_semantic(buffers.semantic, targets.labels, ignore_label)
        up = up + g.scaled(w.lambda_s)
    else:
        l_s = 0.0
    comps["s"] = l_s
    l_a, g_shrink = loss_shrink(scene)
    comps["alpha"] = l_a
    total = (l_rgb + w.lambda_d * comps["d"] + w.lambda_n * comps["n"] + w.lambda_ds * comps["ds"]
             + w.lambda_s * l_s + w.lambda_alpha * l_a)
    return LossResult(total, comps, up, w.lambda_alpha * g_shrink)


def loss_retrain(rendered, pseudo_label, buffers: RenderBuffers, weights: LossWeights | None = None,
                 camera=None) -> LossResult:
    """L1 to the pseudo-label plus weighted depth distortion and normal consistency."""
    w = weights or LossWeights()
    _check_shapes(rendered, pseudo_label)
    l1, g1 = loss_l1(rendered, pseudo_label)
    up = PixelGrads(color=g1)
    l_d, g = loss_depth_distortion(buffers)
    up = up + g.scaled(w.lambda_d)
    l_n, g = loss_normal_consistency(buffers, camera)
    up = up + g.scaled(w.lambda_n)
    total = l1 + w.lambda_d * l_d + w.lambda_n * l_n
    return LossResult(total, {"l1": l1, "d": l_d, "n": l_n}, up)


def splat_grads(scene: Scene, camera, buffers: RenderBuffers, result: LossResult) -> SplatGrads:
    grads = backward(scene, camera, buffers, result.upstream)
    if result.shrink_grad is not None and len(result.shrink_grad):
        grads.opacity_logits = grads.opacity_logits + result.shrink_grad
    return grads


def objective_and_grads(scene: Scene, camera, targets: FrameTargets,
                        weights: LossWeights | None = None, geometry: bool = True,
                        ignore_label: int | None = None, tile_size: int = 64,
                        distortion_depth: tuple | None = None):
    """Render, evaluate the full objective, and backpropagate in one call."""
    buffers = render(scene, camera, RenderOptions(per_class=geometry, tile_size=tile_size,
                                                  distortion_depth=distortion_depth))
    res = loss_total(scene, camera, buffers, targets, weights, geometry, ignore_label)
    return res, splat_grads(scene, camera, buffers, res), buffers
