"""Shared builders and oracles for the test suite."""

import numpy as np

from emptystreet.core import CameraFrame, EnvironmentModel, Scene, SemanticPalette
from emptystreet.grad import PARAM_GROUPS
from emptystreet.losses import FrameTargets, depth_normals, normal_gate, objective_and_grads


def palette(K=3, removable=()):
    return SemanticPalette([(i, f"c{i}", i in removable) for i in range(K)])


def random_scene(rng, n=20, K=3, deg=1, env=True, depth=(3.0, 6.0), spread=1.0, scale=(0.3, 0.9),
                 opacity_mean=1.0):
    """Random splats in front of the default test camera."""
    env_model = EnvironmentModel(rng.uniform(0, 1, (4, 8, 3))) if env else EnvironmentModel(fill=0.0)
    return Scene(rng.uniform([-spread, -spread, depth[0]], [spread, spread, depth[1]], (n, 3)),
                 rng.normal(size=(n, 4)), np.log(rng.uniform(scale[0], scale[1], (n, 2))),
                 rng.normal(opacity_mean, 1.5, n), rng.normal(0, 0.3, (n, (deg + 1) ** 2, 3)),
                 rng.integers(0, K, n), palette(K), env_model, deg)


def make_camera(size=32, fx=30.0, eye=(0.1, 0.2, -0.3), target=(0.0, 0.0, 4.0), t=0):
    return CameraFrame.look_at(eye, target, fx=fx, width=size, height=size, time_index=t)


def pairwise_distortion(w, z):
    """Direct O(n^2) sum over i<j of w_i w_j |z_i - z_j|."""
    w = np.asarray(w, float)
    z = np.asarray(z, float)
    return float(0.5 * np.sum(np.outer(w, w) * np.abs(z[:, None] - z[None, :])))


def _signature(buf, cam, target):
    """Everything whose change marks a non-differentiable point between two evaluations."""
    p, g = buf.ctx["pairs"], buf.ctx["geo"]
    _, valid, _ = depth_normals(buf.depth, cam)
    parts = [p["sid"], p["pix"], p["clamped"], g["flip"], g["color_cache"][4], g["order"],
             normal_gate(buf.alpha, valid), np.sign(buf.color - target), buf.ctx["dist"][0]]
    if buf.ctx.get("per_class") is not None:
        parts.append(buf.ctx["per_class"]["dist"][0])
    return tuple(np.ascontiguousarray(a).tobytes() for a in parts)


def fd_check(scene, cam, targets: FrameTargets, h=1e-4, tol=1e-3, gmin=1e-6, groups=PARAM_GROUPS,
             **kw):
    """Central differences against analytic gradients on every coordinate.

    Coordinates whose +-h probes cross a kink (sorting, culling, clamps, |.|)
    are skipped. Returns (worst relative error, checked, skipped, failures).
    """
    def f(s):
        res, g, b = objective_and_grads(s, cam, targets, **kw)
        return res.total, g, b

    _, grads, buf = f(scene)
    sig0 = _signature(buf, cam, targets.image)
    worst, checked, skipped, failures = 0.0, 0, 0, []
    for name in groups:
        arr = scene.environment.grid if name == "environment" else getattr(scene, name)
        ga = getattr(grads, name)
        for idx in np.ndindex(arr.shape):
            an = float(ga[idx])
            if abs(an) <= gmin:
                continue
            old = arr[idx]
            arr[idx] = old + np.float32(h)
            xp = float(arr[idx])
            Lp, _, bp = f(scene)
            arr[idx] = old - np.float32(h)
            xm = float(arr[idx])
            Lm, _, bm = f(scene)
            arr[idx] = old
            if _signature(bp, cam, targets.image) != sig0 or _signature(bm, cam, targets.image) != sig0:
                skipped += 1
                continue
            fd = (Lp - Lm) / (xp - xm)
            rel = abs(fd - an) / max(abs(an), abs(fd))
            checked += 1
            worst = max(worst, rel)
            if rel > tol:
                failures.append((name, idx, an, fd, rel))
    return worst, checked, skipped, failures


def random_targets(rng, cam, K=3):
    return FrameTargets(rng.uniform(0, 1, (cam.height, cam.width, 3)),
                        rng.integers(0, K, (cam.height, cam.width)))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = []


def record(n, ok, detail):
    ACCEPTANCE.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok
