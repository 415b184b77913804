"""Domain types and splat-local geometry shared across the package."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

STORAGE_DTYPE = np.float32


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    The input is normalized first, so any non-zero quaternion is accepted.
    Columns of the result are the tangent frame (t_u, t_v, n).
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_matrix_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. quat_to_matrix(q) back to the raw quaternion q."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    # d(q/|q|): project out the radial component
    radial = np.sum(gqn * qn, axis=-1, keepdims=True)
    return (gqn - radial * qn) / norm


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class Splat2D:
    """One planar Gaussian. Scales and opacity are kept in log / logit form."""

    center: np.ndarray
    rotation: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float
    color_sh: np.ndarray
    label: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=STORAGE_DTYPE).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=STORAGE_DTYPE).reshape(4)
        self.log_scales = np.asarray(self.log_scales, dtype=STORAGE_DTYPE).reshape(2)
        self.opacity_logit = STORAGE_DTYPE(self.opacity_logit)
        self.color_sh = np.asarray(self.color_sh, dtype=STORAGE_DTYPE).reshape(-1, 3)
        if int(self.label) < 0:
            raise ValueError("label must be non-negative")
        self.label = int(self.label)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    @property
    def opacity(self) -> float:
        return float(sigmoid(float(self.opacity_logit)))


def tangent_frame(splat: Splat2D):
    R = quat_to_matrix(splat.rotation)
    return R[:, 0], R[:, 1], R[:, 2]


def splat_point(splat: Splat2D, u: float, v: float) -> np.ndarray:
    tu, tv, _ = tangent_frame(splat)
    su, sv = splat.scales
    return splat.center.astype(np.float64) + su * tu * u + sv * tv * v


def gaussian_weight(u: float, v: float) -> float:
    return math.exp(-(u * u + v * v) / 2.0)


@dataclass
class CameraFrame:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int
    time_index: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        self.time_index = int(self.time_index)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"world_to_camera rotation is not orthonormal (err={err:.2e})")
        if self.time_index < 0:
            raise ValueError("time_index must be non-negative")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), *, fx, fy=None, width, height,
                cx=None, cy=None, time_index=0):
        """Camera at ``eye`` looking at ``target``; +x right, +y down, +z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx=fx, fy=fx if fy is None else fy,
                   cx=(width - 1) / 2 if cx is None else cx,
                   cy=(height - 1) / 2 if cy is None else cy,
                   rotation=R, translation=-R @ eye, width=width, height=height,
                   time_index=time_index)

    def pixel_rays(self) -> np.ndarray:
        """Camera-space ray directions (H, W, 3) with unit z; pixel centers at integers."""
        ys, xs = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy,
                         np.ones_like(xs)], axis=-1)

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, pts_cam: np.ndarray) -> np.ndarray:
        z = pts_cam[..., 2]
        return np.stack([self.fx * pts_cam[..., 0] / z + self.cx,
                         self.fy * pts_cam[..., 1] / z + self.cy], axis=-1)


@dataclass(frozen=True)
class PaletteEntry:
    label: int
    name: str
    removable: bool = False


@dataclass
class SemanticPalette:
    entries: list[PaletteEntry]

    def __post_init__(self):
        self.entries = [e if isinstance(e, PaletteEntry) else PaletteEntry(*e) for e in self.entries]
        ids = [e.label for e in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError(f"palette label ids must be dense 0..K-1, got {ids}")

    def __len__(self):
        return len(self.entries)

    @property
    def removable(self) -> set[int]:
        return {e.label for e in self.entries if e.removable}

    def id_of(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.label
        raise KeyError(name)


class EnvironmentModel:
    """Learnable equirectangular color grid queried by world-space ray direction.

    Rows span elevation from straight up (row 0) to straight down; columns span
    azimuth atan2(x, z) over [-pi, pi). World up is -y.
    """

    def __init__(self, grid=None, height: int = 64, width: int = 128, fill=0.5):
        if grid is None:
            grid = np.full((height, width, 3), fill, dtype=STORAGE_DTYPE)
        self.grid = np.asarray(grid, dtype=STORAGE_DTYPE)
        if self.grid.ndim != 3 or self.grid.shape[2] != 3:
            raise ValueError("environment grid must be H x W x 3")

    def copy(self) -> "EnvironmentModel":
        return EnvironmentModel(self.grid.copy())

    def _coords(self, dirs: np.ndarray):
        d = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        He, We = self.grid.shape[:2]
        elev = np.arcsin(np.clip(-d[..., 1], -1.0, 1.0))
        azim = np.arctan2(d[..., 0], d[..., 2])
        fy = np.clip((0.5 - elev / math.pi) * He - 0.5, 0.0, He - 1.0)
        fx = np.clip((azim + math.pi) / (2 * math.pi) * We - 0.5, 0.0, We - 1.0)
        y0 = np.minimum(np.floor(fy).astype(np.int64), He - 2 if He > 1 else 0)
        x0 = np.minimum(np.floor(fx).astype(np.int64), We - 2 if We > 1 else 0)
        y1 = np.minimum(y0 + 1, He - 1)
        x1 = np.minimum(x0 + 1, We - 1)
        wy = fy - y0
        wx = fx - x0
        return y0, y1, x0, x1, wy, wx

    def query(self, dirs: np.ndarray) -> np.ndarray:
        y0, y1, x0, x1, wy, wx = self._coords(dirs)
        g = self.grid.astype(np.float64)
        wy = wy[..., None]
        wx = wx[..., None]
        return ((1 - wy) * ((1 - wx) * g[y0, x0] + wx * g[y0, x1])
                + wy * ((1 - wx) * g[y1, x0] + wx * g[y1, x1]))

    def query_backward(self, dirs: np.ndarray, grad_color: np.ndarray) -> np.ndarray:
        y0, y1, x0, x1, wy, wx = self._coords(dirs)
        He, We = self.grid.shape[:2]
        out = np.zeros((He * We, 3))
        gc = grad_color.reshape(-1, 3)
        for yy, xx, wt in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                           (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
            idx = (yy * We + xx).ravel()
            for ch in range(3):
                out[:, ch] += np.bincount(idx, wt.ravel() * gc[:, ch], minlength=He * We)
        return out.reshape(He, We, 3)


@dataclass
class Scene:
    """Structure-of-arrays splat collection plus environment and palette.

    Parameters are stored in float32; all rendering math runs in float64.
    ``lineage`` records the index of the initial splat each splat descends
    from and is not part of the persisted format.
    """

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    labels: np.ndarray
    palette: SemanticPalette
    environment: EnvironmentModel = field(default_factory=EnvironmentModel)
    sh_degree: int = 3
    lineage: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.centers)
        f = STORAGE_DTYPE
        self.centers = np.asarray(self.centers, dtype=f).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=f).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=f).reshape(n, 2)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=f).reshape(n)
        self.sh = np.asarray(self.sh, dtype=f).reshape(n, sh_coeff_count(self.sh_degree), 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        if self.lineage is None:
            self.lineage = np.arange(n, dtype=np.int64)
        self.lineage = np.asarray(self.lineage, dtype=np.int64).reshape(n)
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.palette)):
            raise ValueError("splat label not present in palette")

    def __len__(self):
        return len(self.centers)

    @classmethod
    def empty(cls, palette: SemanticPalette, sh_degree: int = 3, environment=None) -> "Scene":
        m = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0),
                   np.zeros((0, m, 3)), np.zeros(0, dtype=np.int64), palette,
                   environment or EnvironmentModel(), sh_degree)

    @classmethod
    def from_splats(cls, splats: list[Splat2D], palette: SemanticPalette, sh_degree: int = 3,
                    environment=None) -> "Scene":
        if not splats:
            return cls.empty(palette, sh_degree, environment)
        m = sh_coeff_count(sh_degree)
        sh = np.zeros((len(splats), m, 3))
        for i, s in enumerate(splats):
            k = min(m, len(s.color_sh))
            sh[i, :k] = s.color_sh[:k]
        return cls(np.stack([s.center for s in splats]), np.stack([s.rotation for s in splats]),
                   np.stack([s.log_scales for s in splats]),
                   np.array([s.opacity_logit for s in splats]), sh,
                   np.array([s.label for s in splats]), palette,
                   environment or EnvironmentModel(), sh_degree)

    def splat(self, i: int) -> Splat2D:
        return Splat2D(self.centers[i], self.rotations[i], self.log_scales[i],
                       self.opacity_logits[i], self.sh[i], int(self.labels[i]))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits.astype(np.float64))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    def subset(self, keep) -> "Scene":
        """New scene holding the splats selected by an index array or boolean mask."""
        keep = np.asarray(keep)
        if keep.dtype != bool:
            mask = np.zeros(len(self), dtype=bool)
            mask[keep.astype(np.int64)] = True
            keep = mask
        return Scene(self.centers[keep], self.rotations[keep], self.log_scales[keep],
                     self.opacity_logits[keep], self.sh[keep], self.labels[keep],
                     self.palette, self.environment, self.sh_degree, self.lineage[keep])

    def copy(self) -> "Scene":
        return Scene(self.centers.copy(), self.rotations.copy(), self.log_scales.copy(),
                     self.opacity_logits.copy(), self.sh.copy(), self.labels.copy(),
                     self.palette, self.environment.copy(), self.sh_degree, self.lineage.copy())

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for a in (self.centers, self.rotations, self.log_scales, self.opacity_logits, self.sh,
                  self.labels, self.environment.grid):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def extent(self) -> float:
        """Bounding-box diagonal of splat centers."""
        if len(self) < 2:
            return 1.0
        c = self.centers.astype(np.float64)
        return float(np.linalg.norm(c.max(0) - c.min(0))) or 1.0
