"""End-to-end unveiling: removal, masks, time-reversal inpainting, re-optimization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import Scene
from .time_reversal import (DEFAULT_DELTA, MIN_REFERENCE_PIXELS, Schedule, ScheduleResult, build_schedule, render_frame_data, run_schedule,
                            select_keyframes)
from .training import ReoptResult, TrainConfig, reoptimize
from .unveil import RemovalSet, build_removal, generate_inpaint_mask, object_projection_mask

log = logging.getLogger(__name__)


@dataclass
class UnveilResult:
    removal: RemovalSet
    masks: dict
    projections: dict
    schedule: Schedule
    inpainted: ScheduleResult
    reopt: ReoptResult

    @property
    def scene(self) -> Scene:
        return self.reopt.scene


def unveil(scene: Scene, cameras: list, config: TrainConfig, backend, labels=None,
           persist_dir=None, delta: float = DEFAULT_DELTA,
           min_reference_pixels: int = MIN_REFERENCE_PIXELS) -> UnveilResult:
    """Remove every splat of ``labels`` (default: all removable labels) and refill."""
    if labels is None:
        labels = sorted(scene.palette.removable)
    removal = build_removal(scene, labels, config.proximity_radius)
    log.info("removing %d splats (radius %.3f)", len(removal), removal.radius)
    remaining = scene.subset(removal.keep_mask(len(scene)))
    masks, projections, frames = {}, {}, []
    for cam in cameras:
        proj = object_projection_mask(scene, removal, cam)
        masks[cam.time_index] = generate_inpaint_mask(scene, removal, cam, config.alpha_threshold,
                                                      projection=proj).mask
        projections[cam.time_index] = proj
        frames.append(render_frame_data(remaining, cam))
    keys = select_keyframes([c.time_index for c in cameras], config.keyframe_stride)
    schedule = build_schedule(frames, masks, keys, delta=delta, min_reference_pixels=min_reference_pixels,
                              stride=config.keyframe_stride)
    log.info("schedule: %d jobs over %d keyframes", len(schedule.jobs), len(keys))
    done = run_schedule(schedule, backend, {f.time_index: f.image for f in frames}, persist_dir)
    reopt = reoptimize(scene, removal, done.images, cameras, config, masks)
    return UnveilResult(removal, masks, projections, schedule, done, reopt)
