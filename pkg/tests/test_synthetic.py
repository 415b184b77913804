import numpy as np
import pytest
from hypothesis import given, strategies as st

from emptystreet.synthetic import (SKY, VEHICLE, Box, build_observed_splats, cast, generate_synthetic_scene,
                                   segment_blocked, segment_blocked_march, unobservable_mask)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic_scene(seed=3, n_frames=6, width=24, height=24, supersample=1)


def test_generator_is_deterministic(small):
    again = generate_synthetic_scene(seed=3, n_frames=6, width=24, height=24, supersample=1)
    for a, b in zip(small.images_full, again.images_full):
        assert np.array_equal(a, b)
    assert np.array_equal(small.points, again.points)
    other = generate_synthetic_scene(seed=4, n_frames=6, width=24, height=24, supersample=1)
    assert not np.array_equal(small.points, other.points)


def test_dataset_contents(small):
    assert len(small) == 6
    for im, lab, emp, un in zip(small.images_full, small.labels_full, small.images_empty, small.unobservable):
        assert im.shape == (24, 24, 3) and lab.shape == (24, 24)
        assert im.min() >= 0 and im.max() <= 1
        # removing the vehicle only changes pixels that showed it
        changed = np.any(np.abs(im - emp) > 1e-12, axis=-1)
        assert not np.any(changed & (lab != VEHICLE) & (lab != SKY))
        # a hidden pixel must be covered by the vehicle in this very frame too
        assert not np.any(un & (lab != VEHICLE))
    assert small.palette.removable == {VEHICLE}
    assert set(np.unique(small.point_labels)) <= set(range(len(small.palette)))


@given(st.integers(0, 2**31 - 1))
def test_slab_blocking_matches_marching(seed):
    rng = np.random.default_rng(seed)
    box = Box(np.array([-1.0, -1.0, 2.0]), np.array([1.0, 0.0, 4.0]), np.zeros(3))
    a = rng.uniform(-3, 3, (200, 3))
    b = rng.uniform(-3, 6, (200, 3))
    fast = segment_blocked(a, b, [box])
    slow = segment_blocked_march(a, b, [box], samples=4000)
    # marching can only miss grazing chords; it never invents a hit
    assert np.all(fast | ~slow)
    assert (fast != slow).mean() < 0.02


def test_unobservable_mask_matches_bruteforce(small):
    for cam in small.cameras[::2]:
        fast = unobservable_mask(cam, small.cameras, small.boxes)
        slow = unobservable_mask(cam, small.cameras, small.boxes, march=True)
        assert (fast != slow).sum() <= 2


def test_cast_hits_box_face():
    box = Box(np.array([-1.0, -1.0, 4.0]), np.array([1.0, 1.0, 6.0]), np.array([1.0, 0, 0]))
    hit = cast(np.array([0.0, -0.5, 0.0]), np.array([[0.0, 0.0, 1.0]]), [box])
    assert hit.t[0] == pytest.approx(4.0) and hit.label[0] == VEHICLE
    assert np.allclose(hit.normal[0], [0, 0, -1])


def test_observed_splats_avoid_hidden_surfaces(small):
    scene, removal = build_observed_splats(small)
    assert np.all(scene.labels[removal] == VEHICLE)
    assert len(removal) and len(removal) < len(scene)
    assert np.all(scene.opacities > 0.9)
