import numpy as np
import pytest
from hypothesis import given, strategies as st

from emptystreet.rasterizer import RenderOptions, render
from emptystreet.unveil import (OBSERVED, PARTIAL, UNOBSERVABLE, RemovalSet, build_removal, classify_regions,
                                default_radius, expand_by_proximity, generate_inpaint_mask, mask_to_uint8,
                                object_projection_mask, select_removable)
from helpers import make_camera, palette, random_scene

seeds = st.integers(0, 2**31 - 1)


def removable_scene(rng, n=40):
    sc = random_scene(rng, n=n, K=3, opacity_mean=2.5)
    sc.palette = palette(3, removable=(2,))
    return sc


def test_select_removable():
    sc = removable_scene(np.random.default_rng(0))
    idx = select_removable(sc, [2])
    assert np.array_equal(idx, np.flatnonzero(sc.labels == 2))
    assert len(select_removable(sc, [])) == 0
    with pytest.raises(ValueError):
        select_removable(sc, [0])


@given(seeds, st.floats(0.0, 2.0))
def test_proximity_expansion_matches_bruteforce(seed, r):
    rng = np.random.default_rng(seed)
    sc = removable_scene(rng, n=30)
    seed_idx = np.flatnonzero(sc.labels == 2)
    got = expand_by_proximity(sc, seed_idx, r)
    c = sc.centers.astype(float)
    if len(seed_idx) and r > 0:
        d = np.linalg.norm(c[:, None] - c[None, seed_idx], axis=-1).min(axis=1)
        expect = np.union1d(seed_idx, np.flatnonzero(d <= r))
    else:
        expect = seed_idx
    assert np.array_equal(got, expect)


def test_expansion_rejects_negative_radius():
    sc = removable_scene(np.random.default_rng(0))
    with pytest.raises(ValueError):
        expand_by_proximity(sc, [0], -1.0)


def test_removal_set_and_default_radius():
    sc = removable_scene(np.random.default_rng(1))
    rem = build_removal(sc, [2])
    assert rem.radius == pytest.approx(0.02 * sc.extent())
    assert rem.radius == pytest.approx(default_radius(sc))
    keep = rem.keep_mask(len(sc))
    assert keep.sum() == len(sc) - len(rem)
    with pytest.raises(IndexError):
        RemovalSet([len(sc)]).keep_mask(len(sc))


@given(seeds, st.floats(0.3, 1.0))
def test_mask_is_low_alpha_inside_projection(seed, thr):
    rng = np.random.default_rng(seed)
    sc = removable_scene(rng)
    cam = make_camera(16, fx=16)
    rem = build_removal(sc, [2], 0.0)
    proj = object_projection_mask(sc, rem, cam)
    m = generate_inpaint_mask(sc, rem, cam, thr).mask
    alpha = render(sc.subset(rem.keep_mask(len(sc))), cam, RenderOptions(include_environment=False)).alpha
    assert np.array_equal(m, proj & (alpha < thr))
    dil = generate_inpaint_mask(sc, rem, cam, thr, dilate=True).mask
    assert np.all(dil <= proj) and np.all(m <= dil)


def test_mask_threshold_validation_and_empty_removal():
    sc = removable_scene(np.random.default_rng(2))
    cam = make_camera(8)
    with pytest.raises(ValueError):
        generate_inpaint_mask(sc, RemovalSet([0]), cam, 1.5)
    m = generate_inpaint_mask(sc, RemovalSet([]), cam)
    assert not m.mask.any() and m.to_uint8().dtype == np.uint8


def test_classify_regions_partition():
    sc = removable_scene(np.random.default_rng(3), n=60)
    cam = make_camera(16, fx=16)
    rem = build_removal(sc, [2], 0.0)
    cls = classify_regions(sc, rem, cam)
    proj = object_projection_mask(sc, rem, cam)
    assert set(np.unique(cls)) <= {OBSERVED, PARTIAL, UNOBSERVABLE}
    assert np.array_equal(cls != OBSERVED, proj)


def test_mask_to_uint8():
    assert np.array_equal(mask_to_uint8(np.array([[True, False]])), [[255, 0]])
