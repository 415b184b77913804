"""Real spherical harmonics up to degree 3 (3DGS basis convention) and their
direction derivatives."""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_basis(dirs: np.ndarray, degree: int):
    """Basis values (N, M) and gradients w.r.t. the unit direction (N, M, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = len(dirs)
    m = (degree + 1) ** 2
    Y = np.zeros((n, m))
    dY = np.zeros((n, m, 3))
    zero = np.zeros(n)
    Y[:, 0] = C0
    if degree >= 1:
        Y[:, 1] = -C1 * y
        Y[:, 2] = C1 * z
        Y[:, 3] = -C1 * x
        dY[:, 1, 1] = -C1
        dY[:, 2, 2] = C1
        dY[:, 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        Y[:, 4] = C2[0] * x * y
        Y[:, 5] = C2[1] * y * z
        Y[:, 6] = C2[2] * (2 * zz - xx - yy)
        Y[:, 7] = C2[3] * x * z
        Y[:, 8] = C2[4] * (xx - yy)
        dY[:, 4] = np.stack([C2[0] * y, C2[0] * x, zero], -1)
        dY[:, 5] = np.stack([zero, C2[1] * z, C2[1] * y], -1)
        dY[:, 6] = np.stack([-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z], -1)
        dY[:, 7] = np.stack([C2[3] * z, zero, C2[3] * x], -1)
        dY[:, 8] = np.stack([2 * C2[4] * x, -2 * C2[4] * y, zero], -1)
    if degree >= 3:
        Y[:, 9] = C3[0] * y * (3 * xx - yy)
        Y[:, 10] = C3[1] * x * y * z
        Y[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        Y[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        Y[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        Y[:, 14] = C3[5] * z * (xx - yy)
        Y[:, 15] = C3[6] * x * (xx - 3 * yy)
        dY[:, 9] = np.stack([C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero], -1)
        dY[:, 10] = np.stack([C3[1] * y * z, C3[1] * x * z, C3[1] * x * y], -1)
        dY[:, 11] = np.stack([-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy),
                              8 * C3[2] * y * z], -1)
        dY[:, 12] = np.stack([-6 * C3[3] * x * z, -6 * C3[3] * y * z,
                              C3[3] * (6 * zz - 3 * xx - 3 * yy)], -1)
        dY[:, 13] = np.stack([C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y,
                              8 * C3[4] * x * z], -1)
        dY[:, 14] = np.stack([2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)], -1)
        dY[:, 15] = np.stack([C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero], -1)
    return Y, dY


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0


def eval_colors(sh: np.ndarray, centers: np.ndarray, cam_center: np.ndarray, degree: int):
    """View-dependent splat colors clipped to [0, 1].

    Returns (colors, cache) where cache carries what ``eval_colors_backward`` needs.
    """
    sh = sh.astype(np.float64)
    deg = min(degree, int(round(np.sqrt(sh.shape[1]))) - 1)
    m = (deg + 1) ** 2
    off = centers - cam_center
    dist = np.linalg.norm(off, axis=1, keepdims=True)
    dist = np.maximum(dist, 1e-12)
    dirs = off / dist
    Y, dY = sh_basis(dirs, deg)
    raw = np.einsum("nm,nmc->nc", Y, sh[:, :m]) + 0.5
    inside = (raw > 0.0) & (raw < 1.0)
    colors = np.clip(raw, 0.0, 1.0)
    return colors, (Y, dY, dirs, dist, inside, m, sh)


def eval_colors_backward(cache, grad_colors: np.ndarray):
    """Gradients w.r.t. SH coefficients (N, M_full, 3) and splat centers (N, 3)."""
    Y, dY, dirs, dist, inside, m, sh = cache
    g = grad_colors * inside
    g_sh = np.zeros_like(sh)
    g_sh[:, :m] = Y[:, :, None] * g[:, None, :]
    # d color_c / d dir = sum_m sh[m, c] * dY[m]
    g_dir = np.einsum("nmk,nmc,nc->nk", dY, sh[:, :m], g)
    radial = np.sum(g_dir * dirs, axis=1, keepdims=True)
    g_center = (g_dir - radial * dirs) / dist
    return g_sh, g_center
