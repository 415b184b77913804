import numpy as np
import pytest

from emptystreet.sh import eval_colors, eval_colors_backward, rgb_to_sh0, sh_basis


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)


def test_basis_is_orthonormal_on_the_sphere():
    d = fibonacci_sphere(200000)
    Y, _ = sh_basis(d, 3)
    gram = 4 * np.pi * (Y.T @ Y) / len(d)
    assert np.allclose(gram, np.eye(16), atol=2e-3)


@pytest.mark.parametrize("deg", [0, 1, 2, 3])
def test_basis_direction_gradient_fd(deg):
    rng = np.random.default_rng(deg)
    d = rng.normal(size=(20, 3))
    Y, dY = sh_basis(d, deg)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (sh_basis(d + e, deg)[0] - sh_basis(d - e, deg)[0]) / (2 * h)
        assert np.allclose(fd, dY[:, :, k], atol=1e-7)


def test_dc_roundtrip_and_clip():
    rgb = np.array([[0.1, 0.5, 0.9]])
    sh = np.zeros((1, 4, 3))
    sh[:, 0] = rgb_to_sh0(rgb)
    col, _ = eval_colors(sh, np.array([[0, 0, 5.0]]), np.zeros(3), 1)
    assert np.allclose(col, rgb)
    sh[:, 0] = 10
    col, _ = eval_colors(sh, np.array([[0, 0, 5.0]]), np.zeros(3), 1)
    assert np.allclose(col, 1.0)


def test_eval_colors_backward_fd():
    rng = np.random.default_rng(3)
    sh = rng.normal(0, 0.2, (6, 16, 3))
    cen = rng.normal(size=(6, 3)) + [0, 0, 4]
    cam = np.array([0.2, -0.1, 0.0])
    g = rng.normal(size=(6, 3))
    col, cache = eval_colors(sh, cen, cam, 3)
    gsh, gc = eval_colors_backward(cache, g)
    h = 1e-6
    for i in range(6):
        for k in range(3):
            p, m = cen.copy(), cen.copy()
            p[i, k] += h
            m[i, k] -= h
            fd = np.sum((eval_colors(sh, p, cam, 3)[0] - eval_colors(sh, m, cam, 3)[0]) * g) / (2 * h)
            assert fd == pytest.approx(gc[i, k], abs=1e-6)
    # colors are linear in the coefficients inside the clip range
    inside = cache[4]
    assert np.allclose(gsh[:, 0], cache[0][:, :1] * g * inside)
