"""Object removal and inpainting-mask generation from the post-removal alpha map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.spatial import cKDTree

from .core import CameraFrame, Scene
from .rasterizer import MIN_WEIGHT, RenderOptions, render

DEFAULT_ALPHA_THRESHOLD = 0.99
DEFAULT_RADIUS_FRACTION = 0.02

OBSERVED, PARTIAL, UNOBSERVABLE = 0, 1, 2


@dataclass
class RemovalSet:
    indices: np.ndarray
    radius: float = 0.0
    labels: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.indices = np.unique(np.asarray(self.indices, dtype=np.int64))

    def __len__(self):
        return len(self.indices)

    def keep_mask(self, n: int) -> np.ndarray:
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise IndexError("removal index out of range")
        keep = np.ones(n, dtype=bool)
        keep[self.indices] = False
        return keep


@dataclass
class InpaintMask:
    mask: np.ndarray
    threshold: float
    time_index: int

    def to_uint8(self) -> np.ndarray:
        return mask_to_uint8(self.mask)


def mask_to_uint8(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 255, 0).astype(np.uint8)


def select_removable(scene: Scene, labels) -> np.ndarray:
    labels = set(int(l) for l in labels)
    bad = labels - scene.palette.removable
    if bad:
        raise ValueError(f"labels {sorted(bad)} are not removable")
    if not labels:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(np.isin(scene.labels, sorted(labels)))


def expand_by_proximity(scene: Scene, seed, r: float) -> np.ndarray:
    """seed plus every splat whose center lies within r of a seed center."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    seed = np.unique(np.asarray(seed, dtype=np.int64))
    if len(seed) == 0 or r == 0 or len(scene) == 0:
        return seed
    pts = scene.centers.astype(np.float64)
    tree = cKDTree(pts)
    hits = tree.query_ball_point(pts[seed], r)
    near = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits])
    return np.union1d(seed, near)


def default_radius(scene: Scene) -> float:
    return DEFAULT_RADIUS_FRACTION * scene.extent()


def build_removal(scene: Scene, labels, radius: float | None = None) -> RemovalSet:
    if radius is None:
        radius = default_radius(scene)
    seed = select_removable(scene, labels)
    return RemovalSet(expand_by_proximity(scene, seed, radius), radius, frozenset(labels))


def _alpha(scene: Scene, camera: CameraFrame) -> np.ndarray:
    return render(scene, camera, RenderOptions(include_environment=False)).alpha


def object_projection_mask(scene: Scene, removal: RemovalSet, camera: CameraFrame) -> np.ndarray:
    """Footprint of the removed splats rendered on their own."""
    if len(removal) == 0:
        return np.zeros((camera.height, camera.width), dtype=bool)
    removed = scene.subset(~removal.keep_mask(len(scene)))
    return _alpha(removed, camera) > MIN_WEIGHT


def generate_inpaint_mask(scene: Scene, removal: RemovalSet, camera: CameraFrame,
                          threshold: float = DEFAULT_ALPHA_THRESHOLD, dilate: bool = False,
                          projection: np.ndarray | None = None) -> InpaintMask:
    """Pixels inside the object footprint whose post-removal alpha stays below threshold."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if projection is None:
        projection = object_projection_mask(scene, removal, camera)
    if not projection.any():
        return InpaintMask(projection.copy(), threshold, camera.time_index)
    remaining = scene.subset(removal.keep_mask(len(scene)))
    low = (_alpha(remaining, camera) < threshold) & projection
    if dilate and low.any():
        low = binary_dilation(low) & projection
    return InpaintMask(low, threshold, camera.time_index)


def classify_regions(scene: Scene, removal: RemovalSet, camera: CameraFrame,
                     threshold: float = DEFAULT_ALPHA_THRESHOLD, dilate: bool = False) -> np.ndarray:
    """0 observed, 1 partially observable, 2 completely unobservable."""
    proj = object_projection_mask(scene, removal, camera)
    mask = generate_inpaint_mask(scene, removal, camera, threshold, dilate, projection=proj).mask
    out = np.full(proj.shape, OBSERVED, dtype=np.uint8)
    out[proj] = PARTIAL
    out[mask] = UNOBSERVABLE
    return out
