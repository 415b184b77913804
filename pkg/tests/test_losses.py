import numpy as np
import pytest
from hypothesis import given, strategies as st

from emptystreet.core import CameraFrame, Scene, logit
from emptystreet.losses import (CE_PROB_FLOOR, LossWeights, depth_normals, gaussian_window, loss_l1,
                                loss_normal_consistency, loss_rgb, loss_semantic, loss_semantic_distortion,
                                loss_shrink, ssim)
from emptystreet.rasterizer import RenderOptions, render
from helpers import make_camera, palette, random_scene

seeds = st.integers(0, 2**31 - 1)


def ssim_bruteforce(x, y, size=11, sigma=1.5):
    """Per-pixel windowed statistics with explicit zero padding."""
    g = gaussian_window(size, sigma)
    w2 = np.outer(g, g)
    r = size // 2
    H, W, C = x.shape
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    yp = np.pad(y, ((r, r), (r, r), (0, 0)))
    vals = []
    for i in range(H):
        for j in range(W):
            for c in range(C):
                a = xp[i:i + size, j:j + size, c]
                b = yp[i:i + size, j:j + size, c]
                mx, my = (w2 * a).sum(), (w2 * b).sum()
                vx = (w2 * a * a).sum() - mx * mx
                vy = (w2 * b * b).sum() - my * my
                cxy = (w2 * a * b).sum() - mx * my
                C1, C2 = 0.01 ** 2, 0.03 ** 2
                vals.append((2 * mx * my + C1) * (2 * cxy + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2)))
    return float(np.mean(vals))


def test_window_normalized():
    g = gaussian_window()
    assert g.sum() == pytest.approx(1.0) and len(g) == 11 and g[5] == g.max()


def test_ssim_matches_bruteforce():
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(14, 13, 2)), rng.uniform(size=(14, 13, 2))
    assert ssim(x, y) == pytest.approx(ssim_bruteforce(x, y), abs=1e-12)


def test_ssim_identity_and_gradient():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(12, 12, 3))
    assert ssim(x, x) == pytest.approx(1.0)
    y = rng.uniform(size=x.shape)
    _, g = ssim(x, y, grad=True)
    h = 1e-6
    for idx in [(0, 0, 0), (5, 6, 1), (11, 3, 2), (7, 11, 0)]:
        p, m = x.copy(), x.copy()
        p[idx] += h
        m[idx] -= h
        assert (ssim(p, y) - ssim(m, y)) / (2 * h) == pytest.approx(g[idx], rel=1e-5, abs=1e-10)


def test_rgb_loss_combination():
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    v, _ = loss_rgb(x, y, 0.2)
    assert v == pytest.approx(0.8 * np.abs(x - y).mean() + 0.2 * (1 - ssim(x, y)) / 2)
    assert loss_rgb(x, x)[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        loss_l1(x, y[:5])


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_d=-1)


def plane_depth(cam, n, d):
    """Depth map of the plane n.x = d in camera coordinates."""
    rays = cam.pixel_rays()
    return d / (rays @ n)


def test_depth_normals_recover_plane_normal():
    cam = CameraFrame.look_at([0, 0, 0], [0, 0, 1], fx=20, width=16, height=16)
    n = np.array([0.3, -0.2, -1.0])
    n /= np.linalg.norm(n)
    N, valid, _ = depth_normals(plane_depth(cam, n, -5.0), cam)
    assert valid[1:-1, 1:-1].all() and not valid[0].any()
    got = N[valid]
    # normals face the camera
    assert np.allclose(got, n, atol=1e-9) or np.allclose(got, -n, atol=1e-9)
    assert np.all(got[:, 2] < 0)


def test_normal_consistency_zero_on_flat_opaque_splat():
    cam = CameraFrame.look_at([0, 0, 0], [0, 0, 1], fx=10, width=12, height=12)
    sc = Scene([[0, 0, 4.0]], [[1, 0, 0, 0]], [[3.0, 3.0]], [logit(0.9)], np.zeros((1, 1, 3)), [0],
               palette(1), sh_degree=0)
    buf = render(sc, cam)
    v, g = loss_normal_consistency(buf, cam)
    assert v == pytest.approx(0.0, abs=1e-9)
    assert g.alpha is not None


def test_normal_consistency_empty_gate():
    sc = random_scene(np.random.default_rng(0), n=0)
    v, g = loss_normal_consistency(render(sc, make_camera(8)))
    assert v == 0.0 and g.depth is None


def ce_direct(S, t, ignore=None):
    tot, cnt = 0.0, 0
    for i in range(S.shape[0]):
        for j in range(S.shape[1]):
            A = S[i, j].sum()
            if A < 1e-4 or t[i, j] == ignore:
                continue
            tot += -np.log(max(S[i, j, t[i, j]] / A, CE_PROB_FLOOR))
            cnt += 1
    return tot / cnt if cnt else 0.0


@given(seeds)
def test_semantic_ce_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    S = rng.uniform(0, 1, (5, 6, 3)) * rng.uniform(0, 1, (5, 6, 1))
    S[0, 0] = 0.0
    S[1, 1, 2] = 0.0
    t = rng.integers(0, 3, (5, 6))
    t[1, 1] = 2
    for ign in (None, 1):
        v, g = loss_semantic(S, t, ign)
        assert v == pytest.approx(ce_direct(S, t, ign), rel=1e-12)
    # gradient by finite differences away from the floor
    v, g = loss_semantic(S, t)
    h = 1e-7
    for idx in [(2, 3, 0), (4, 5, 2), (3, 0, 1)]:
        p, m = S.copy(), S.copy()
        p[idx] += h
        m[idx] -= h
        assert (loss_semantic(p, t)[0] - loss_semantic(m, t)[0]) / (2 * h) == pytest.approx(
            g.semantic[idx], rel=1e-5, abs=1e-9)
    assert np.all(g.semantic[1, 1] == 0)  # floored probability carries no gradient


def test_semantic_validation():
    S = np.ones((2, 2, 2))
    with pytest.raises(ValueError):
        loss_semantic(S, np.full((2, 2), 2))
    with pytest.raises(ValueError):
        loss_semantic(S, np.zeros((3, 2), int))


def test_semantic_distortion_and_shrink():
    rng = np.random.default_rng(3)
    sc = random_scene(rng, n=15)
    cam = make_camera(12, fx=12)
    v_scene, _ = loss_semantic_distortion(sc, cam)
    buf = render(sc, cam, RenderOptions(include_environment=False, per_class=True))
    v, g = loss_semantic_distortion(buf)
    assert v == pytest.approx(v_scene) and v == pytest.approx(buf.per_class_distortion.sum(0).mean())
    with pytest.raises(ValueError):
        loss_semantic_distortion(render(sc, cam))
    s, gs = loss_shrink(sc)
    assert s == pytest.approx(sc.opacities.mean())
    h = 1e-4
    p = sc.copy()
    p.opacity_logits[0] += np.float32(h)
    assert (loss_shrink(p)[0] - s) / (float(p.opacity_logits[0]) - float(sc.opacity_logits[0])) == \
        pytest.approx(gs[0], rel=1e-3)
