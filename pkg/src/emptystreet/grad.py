"""Reverse-mode gradients of rendered buffers, the optimizer, and density control."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Scene, quat_matrix_backward
from .rasterizer import (DEPTH_EPS, RenderBuffers, _bincount, seg_exclusive_suffix,
                         world_ray_dirs)
from .sh import eval_colors_backward

PARAM_GROUPS = ("centers", "rotations", "log_scales", "opacity_logits", "sh")


@dataclass
class PixelGrads:
    """Upstream loss gradients w.r.t. each render buffer; None means zero."""

    color: np.ndarray | None = None
    alpha: np.ndarray | None = None
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None
    semantic: np.ndarray | None = None
    distortion: np.ndarray | None = None
    per_class_distortion: np.ndarray | None = None

    def __add__(self, other: "PixelGrads") -> "PixelGrads":
        out = {}
        for k in self.__dataclass_fields__:
            a, b = getattr(self, k), getattr(other, k)
            out[k] = b if a is None else (a if b is None else a + b)
        return PixelGrads(**out)

    def scaled(self, s: float) -> "PixelGrads":
        return PixelGrads(**{k: None if getattr(self, k) is None else s * getattr(self, k)
                             for k in self.__dataclass_fields__})


@dataclass
class SplatGrads:
    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    environment: np.ndarray
    screen: np.ndarray = None  # NDC-space center gradient norm, for densification
    visible: np.ndarray = None

    @classmethod
    def zeros(cls, scene: Scene) -> "SplatGrads":
        n = len(scene)
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros(n),
                   np.zeros(scene.sh.shape), np.zeros(scene.environment.grid.shape),
                   np.zeros(n), np.zeros(n, dtype=bool))

    def __add__(self, other: "SplatGrads") -> "SplatGrads":
        return SplatGrads(*(getattr(self, k) + getattr(other, k) for k in
                            ("centers", "rotations", "log_scales", "opacity_logits", "sh",
                             "environment", "screen")),
                          visible=self.visible | other.visible)

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, k)).all() for k in PARAM_GROUPS + ("environment",))


def _as(arr, shape, name):
    if arr is None:
        return None
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"upstream {name} has shape {arr.shape}, expected {shape}")
    return arr


def backward(scene: Scene, camera, buffers: RenderBuffers, upstream: PixelGrads) -> SplatGrads:
    """Exact gradients of the composited buffers w.r.t. all learnable parameters.

    Depth ordering, culling, and the 3-sigma / minimum-weight cutoffs are
    treated as constants of the forward pass.
    """
    ctx = buffers.ctx
    if ctx is None:
        raise ValueError("buffers carry no render context")
    if ctx["num_splats"] != len(scene):
        raise ValueError("buffers were rendered from a different scene")
    H, W = buffers.alpha.shape
    K = buffers.semantic.shape[2]
    npix = H * W
    gC = _as(upstream.color, (H, W, 3), "color")
    gA = _as(upstream.alpha, (H, W), "alpha")
    gZ = _as(upstream.depth, (H, W), "depth")
    gN = _as(upstream.normal, (H, W, 3), "normal")
    gS = _as(upstream.semantic, (H, W, K), "semantic")
    gD = _as(upstream.distortion, (H, W), "distortion")
    gPC = _as(upstream.per_class_distortion, (K, H, W), "per_class_distortion")
    if gPC is not None and "per_class" not in ctx:
        raise ValueError("per-class upstream given but buffers were rendered without per_class")

    out = SplatGrads.zeros(scene)
    geo, pairs = ctx["geo"], ctx["pairs"]
    sid, pix = pairs["sid"], pairs["pix"]
    a, tau, G = pairs["a"], pairs["tau"], pairs["G"]
    w, trans = ctx["w"], ctx["trans"]
    labels = ctx["labels"]
    alpha = buffers.alpha.reshape(npix)
    depth = buffers.depth.reshape(npix)
    nloc = len(geo["ids"])
    P = len(sid)

    env = ctx["env"]
    gA_eff = np.zeros(npix) if gA is None else gA.reshape(npix).copy()
    if gC is not None:
        gC = gC.reshape(npix, 3)
        if env is not None:
            gA_eff -= np.sum(gC * env, axis=1)
            g_env_pix = gC * (1.0 - alpha)[:, None]
            out.environment = scene.environment.query_backward(world_ray_dirs(camera), g_env_pix)

    g_w = gA_eff[pix].copy()
    g_tau = np.zeros(P)
    g_col = np.zeros((nloc, 3))
    g_nrm = np.zeros((nloc, 3))
    if gC is not None:
        gCp = gC[pix]
        g_w += np.einsum("ij,ij->i", gCp, geo["colors"][sid])
        for c in range(3):
            g_col[:, c] = _bincount(sid, gCp[:, c] * w, nloc)
    if gS is not None:
        g_w += gS.reshape(npix, K)[pix, labels]
    if gZ is not None:
        gZp = gZ.reshape(npix)[pix]
        Ap = alpha[pix]
        big = Ap > DEPTH_EPS
        Acl = np.where(big, Ap, DEPTH_EPS)
        g_w += gZp * np.where(big, tau - depth[pix], tau) / Acl
        g_tau += gZp * w / Acl
    if gN is not None:
        gNp = gN.reshape(npix, 3)[pix]
        nrm = geo["n"][sid] * geo["flip"][sid, None]
        g_w += np.einsum("ij,ij->i", gNp, nrm)
        for c in range(3):
            g_nrm[:, c] = _bincount(sid, gNp[:, c] * w, nloc)
    if gD is not None or gPC is not None:
        zd = ctx["zd"]
        g_zd = np.zeros(P)
        if gD is not None:
            _distortion_backward(gD.reshape(npix)[pix], w, zd, ctx["dist"], g_w, g_zd)
        if gPC is not None:
            key = ctx["per_class"]["key"]
            gk = gPC.reshape(K, npix).T.reshape(npix * K)[key]
            _distortion_backward(gk, w, zd, ctx["per_class"]["dist"], g_w, g_zd)
        g_tau += g_zd * ctx["dzd"]

    # blend weights -> per-hit alpha
    starts, lengths = ctx["starts"], ctx["lengths"]
    later = seg_exclusive_suffix(w * g_w, starts, lengths)
    g_a = trans * g_w - later / (1.0 - a)
    g_a[pairs["clamped"]] = 0.0

    opac = geo["opac"][sid]
    g_opac = _bincount(sid, g_a * G, nloc)
    g_G = g_a * opac
    u, v = pairs["u"], pairs["v"]
    g_u = -g_G * G * u
    g_v = -g_G * G * v

    # ray/plane intersection -> camera-space splat geometry
    d, m, r = pairs["d"], pairs["m"], pairs["r"]
    sc = geo["scales"][sid]
    tu, tv, n = geo["tu"][sid], geo["tv"][sid], geo["n"][sid]
    gus, gvs = g_u / sc[:, 0], g_v / sc[:, 1]
    g_tau_tot = gus * np.einsum("ij,ij->i", tu, d) + gvs * np.einsum("ij,ij->i", tv, d) + g_tau
    k = g_tau_tot / m
    g_pc = k[:, None] * n - gus[:, None] * tu - gvs[:, None] * tv
    g_n = -k[:, None] * r
    g_tu = gus[:, None] * r
    g_tv = gvs[:, None] * r

    acc = lambda x: np.stack([_bincount(sid, x[:, c], nloc) for c in range(3)], -1)  # noqa: E731
    g_pc_s = acc(g_pc)
    g_n_s = acc(g_n) + g_nrm * geo["flip"][:, None]
    g_tu_s = acc(g_tu)
    g_tv_s = acc(g_tv)
    g_ls = np.stack([_bincount(sid, -g_u * u, nloc), _bincount(sid, -g_v * v, nloc)], -1)

    Rc = camera.rotation
    ids = geo["ids"]
    dR = np.stack([g_tu_s @ Rc, g_tv_s @ Rc, g_n_s @ Rc], axis=-1)
    g_sh, g_center_col = eval_colors_backward(geo["color_cache"], g_col)
    out.centers[ids] = g_pc_s @ Rc + g_center_col
    out.rotations[ids] = quat_matrix_backward(scene.rotations[ids], dR)
    out.log_scales[ids] = g_ls
    out.opacity_logits[ids] = g_opac * geo["opac"] * (1.0 - geo["opac"])
    out.sh[ids] = g_sh

    z = geo["p_c"][:, 2]
    gx = g_pc_s[:, 0] * z / camera.fx * (W / 2)
    gy = g_pc_s[:, 1] * z / camera.fy * (H / 2)
    out.screen[ids] = np.hypot(gx, gy)
    seen = np.zeros(nloc, dtype=bool)
    seen[sid] = True
    out.visible[ids] = seen
    return out


def _distortion_backward(g_pair, w, tau, dist_ctx, g_w, g_tau):
    """Accumulate d(sum_{i<j} w_i w_j |z_i - z_j|) into g_w and g_tau (in place)."""
    order, starts, lengths, w_prev, wz_prev = dist_ctx
    if len(order) == 0:
        return
    ws, zs = w[order], tau[order]
    w_tot = np.repeat(np.add.reduceat(ws, starts), lengths)
    wz_tot = np.repeat(np.add.reduceat(ws * zs, starts), lengths)
    w_next = w_tot - w_prev - ws
    wz_next = wz_tot - wz_prev - ws * zs
    gp = g_pair[order]
    gw_sorted = gp * (zs * w_prev - wz_prev + wz_next - zs * w_next)
    gz_sorted = gp * ws * (w_prev - w_next)
    g_w[order] += gw_sorted
    g_tau[order] += gz_sorted


# ----------------------------------------------------------------- optimizer

DEFAULT_LR = {
    "centers": 1.6e-4,  # multiplied by the scene extent
    "sh": 2.5e-3,
    "opacity_logits": 5e-2,
    "log_scales": 5e-3,
    "rotations": 1e-3,
    "environment": 1e-2,
}


@dataclass
class OptimState:
    """Adam moments plus densification statistics for the live splat set."""

    moments: dict = field(default_factory=dict)
    step: int = 0
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def for_scene(cls, scene: Scene, lr: dict | None = None) -> "OptimState":
        st = cls()
        if lr:
            st.lr.update(lr)
        st.reset_stats(len(scene))
        return st

    def reset_stats(self, n: int):
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n)

    def accumulate(self, grads: SplatGrads):
        self.grad_accum[grads.visible] += grads.screen[grads.visible]
        self.grad_count[grads.visible] += 1

    def remap(self, keep_idx: np.ndarray, n_new: int):
        """Carry per-splat state to a new splat set.

        ``keep_idx`` lists the old indices occupying the first len(keep_idx)
        slots; the remaining ``n_new`` slots start from zero.
        """
        for name, (m, v) in list(self.moments.items()):
            if name == "environment":
                continue
            pad = np.zeros((n_new,) + m.shape[1:])
            self.moments[name] = (np.concatenate([m[keep_idx], pad]),
                                  np.concatenate([v[keep_idx], pad]))
        pad = np.zeros(n_new)
        self.grad_accum = np.concatenate([self.grad_accum[keep_idx], pad])
        self.grad_count = np.concatenate([self.grad_count[keep_idx], pad])


def adam_step(scene: Scene, grads: SplatGrads, state: OptimState, lr_table: dict | None = None,
              frozen: np.ndarray | None = None, update_environment: bool = True):
    """One Adam update in place. Frozen splats keep parameters and moments untouched."""
    lr = dict(state.lr)
    if lr_table:
        lr.update(lr_table)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    active = None if frozen is None else ~np.asarray(frozen, dtype=bool)

    def update(name, param, g, rate):
        if name not in state.moments or state.moments[name][0].shape != param.shape:
            state.moments[name] = (np.zeros(param.shape), np.zeros(param.shape))
        m, v = state.moments[name]
        if active is not None and name != "environment":
            g = g[active]
            mm, vv = m[active], v[active]
        else:
            mm, vv = m, v
        mm = b1 * mm + (1 - b1) * g
        vv = b2 * vv + (1 - b2) * g * g
        step = rate * (mm / bc1) / (np.sqrt(vv / bc2) + state.eps)
        if active is not None and name != "environment":
            m[active], v[active] = mm, vv
            new = param.astype(np.float64)
            new[active] -= step
        else:
            state.moments[name] = (mm, vv)
            new = param.astype(np.float64) - step
        return new.astype(param.dtype)

    scene.centers = update("centers", scene.centers, grads.centers, lr["centers"])
    scene.rotations = update("rotations", scene.rotations, grads.rotations, lr["rotations"])
    scene.log_scales = update("log_scales", scene.log_scales, grads.log_scales, lr["log_scales"])
    scene.opacity_logits = update("opacity_logits", scene.opacity_logits, grads.opacity_logits,
                                  lr["opacity_logits"])
    sh_rate = np.full(scene.sh.shape[1:], lr["sh"] / 20.0)
    sh_rate[0] = lr["sh"]
    scene.sh = update("sh", scene.sh, grads.sh, sh_rate)
    if update_environment:
        g = update("environment", scene.environment.grid, grads.environment, lr["environment"])
        scene.environment.grid = np.clip(g, 0.0, 1.0).astype(g.dtype)
    q = scene.rotations.astype(np.float64)
    qn = (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(scene.rotations.dtype)
    if active is None:
        scene.rotations = qn
    else:
        scene.rotations[active] = qn[active]
    return scene, state


# -------------------------------------------------------- density control

@dataclass
class DensifyThresholds:
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    scene_extent: float = 1.0
    min_opacity: float = 0.005
    split_factor: float = 1.6


def _append(scene: Scene, src: np.ndarray, centers=None, log_scales=None):
    return dict(
        centers=scene.centers[src] if centers is None else centers,
        rotations=scene.rotations[src], log_scales=scene.log_scales[src] if log_scales is None
        else log_scales, opacity_logits=scene.opacity_logits[src], sh=scene.sh[src],
        labels=scene.labels[src], lineage=scene.lineage[src])


def _apply(scene: Scene, keep_idx: np.ndarray, extra: list[dict], state: OptimState | None):
    names = ("centers", "rotations", "log_scales", "opacity_logits", "sh", "labels", "lineage")
    n_new = sum(len(e["labels"]) for e in extra)
    for name in names:
        cur = getattr(scene, name)
        parts = [cur[keep_idx]] + [np.asarray(e[name], dtype=cur.dtype) for e in extra]
        setattr(scene, name, np.concatenate(parts))
    if state is not None:
        state.remap(keep_idx, n_new)


def densify(scene: Scene, state: OptimState, thresholds: DensifyThresholds,
            rng: np.random.Generator | None = None) -> Scene:
    """Clone small / split large splats with high mean screen-space gradient.

    Children copy the parent's label and lineage. Splats below the opacity
    floor are removed afterwards, and the gradient statistics are reset.
    """
    rng = rng or np.random.default_rng(0)
    n = len(scene)
    mean = state.grad_accum / np.maximum(state.grad_count, 1)
    over = mean >= thresholds.grad_threshold
    big = scene.scales.max(axis=1) > thresholds.percent_dense * thresholds.scene_extent
    clone = np.flatnonzero(over & ~big)
    split = np.flatnonzero(over & big)

    extra = []
    if len(clone):
        extra.append(_append(scene, clone))
    if len(split):
        from .core import quat_to_matrix
        R = quat_to_matrix(scene.rotations[split])
        s = scene.scales[split]
        child_ls = np.log(s / thresholds.split_factor)
        for _ in range(2):
            eps = rng.standard_normal((len(split), 2)) * s
            pos = scene.centers[split].astype(np.float64) + R[:, :, 0] * eps[:, :1] \
                + R[:, :, 1] * eps[:, 1:]
            extra.append(_append(scene, split, centers=pos, log_scales=child_ls))
    keep = np.ones(n, dtype=bool)
    keep[split] = False
    _apply(scene, np.flatnonzero(keep), extra, state)

    low = scene.opacities < thresholds.min_opacity
    if low.any():
        _apply(scene, np.flatnonzero(~low), [], state)
    state.reset_stats(len(scene))
    return scene


def prune_low_opacity(scene: Scene, epsilon: float, state: OptimState | None = None) -> Scene:
    """Remove exactly the splats whose opacity is below ``epsilon``."""
    keep = ~(scene.opacities < epsilon)
    if not keep.all():
        _apply(scene, np.flatnonzero(keep), [], state)
    return scene
