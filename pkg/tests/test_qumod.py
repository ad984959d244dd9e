import numpy as np
import pytest

from leqmod.errors import ConfigError, DimensionError
from leqmod.qumod import ParcellationPlan, build_parcellation, make_scale, qu_loss, qu_loss_bruteforce


def single_cover_plan(p):
    return ParcellationPlan(p, (make_scale(1, p, p, max(1, p // 2), 1.0),))


def test_plan_patch_80():
    plan = build_parcellation(80)
    assert [(s.sub_size, s.stride) for s in plan.scales] == [(40, 20), (20, 10), (10, 5), (5, 2)]
    assert plan.scales[0].origins == (0, 20, 40)
    assert plan.scales[0].count == 27
    o4 = plan.scales[3].origins
    assert len(o4) == 39 and o4[-2:] == (74, 75)
    assert plan.scales[3].count == 59319
    assert sum(s.weight for s in plan.scales) == pytest.approx(1.0)


def test_plan_patch_32():
    plan = build_parcellation(32)
    assert [(s.sub_size, s.stride) for s in plan.scales] == [(16, 8), (8, 4), (4, 2), (2, 1)]


def test_plan_drops_small_scales():
    plan = build_parcellation(8)
    assert [s.sub_size for s in plan.scales] == [4, 2]
    assert [s.weight for s in plan.scales] == pytest.approx([0.3, 0.7])
    with pytest.raises(ConfigError):
        build_parcellation(3)


def test_loss_zero_on_identical():
    x = np.random.default_rng(0).normal(size=(16, 16, 16))
    r = qu_loss(x, x, build_parcellation(16))
    assert r.value == 0.0 and not r.grad.any()
    assert qu_loss_bruteforce(x, x, build_parcellation(16)) == 0.0


@pytest.mark.parametrize("c", [0.7, -1.3])
def test_constant_shift_single_cover(c):
    hc = np.random.default_rng(1).normal(size=(6, 6, 6))
    plan = single_cover_plan(6)
    assert qu_loss(hc + c, hc, plan).value == pytest.approx(2 * abs(c), rel=1e-12)
    assert qu_loss_bruteforce(hc + c, hc, plan) == pytest.approx(2 * abs(c), rel=1e-12)


def test_per_scale_sum_and_shape():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 16, 16, 16))
    r = qu_loss(a, b, build_parcellation(16))
    assert r.value == pytest.approx(sum(r.per_scale), rel=1e-15)
    assert r.grad.shape == a.shape and len(r.per_scale) == 3


def test_matches_bruteforce_default_8():
    rng = np.random.default_rng(3)
    plan = build_parcellation(8)
    for _ in range(10):
        a, b = rng.normal(size=(2, 8, 8, 8))
        assert qu_loss(a, b, plan).value == pytest.approx(qu_loss_bruteforce(a, b, plan), rel=1e-10)


def test_max_gradient_goes_to_first_argmax():
    hc = np.zeros((4, 4, 4))
    den = np.zeros((4, 4, 4))
    den[1, 0, 0] = den[0, 1, 0] = 2.0  # tie: x-fastest scan order visits (1,0,0) first
    plan = single_cover_plan(4)
    g = qu_loss(den, hc, plan).grad
    mean_part = 1.0 / 64
    assert g[1, 0, 0] == pytest.approx(1.0 + mean_part)
    assert g[0, 1, 0] == pytest.approx(mean_part)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        qu_loss(np.zeros((8, 8, 8)), np.zeros((8, 8, 8)), build_parcellation(16))


def test_finite_differences():
    rng = np.random.default_rng(5)
    plan = build_parcellation(8)
    h = 1e-6
    den, hc = rng.normal(size=(2, 8, 8, 8))
    grad = qu_loss(den, hc, plan).grad
    fd = np.empty_like(den)
    for idx in np.ndindex(den.shape):
        e = np.zeros_like(den)
        e[idx] = h
        fd[idx] = (qu_loss(den + e, hc, plan).value - qu_loss(den - e, hc, plan).value) / (2 * h)
    assert np.max(np.abs(fd - grad)) / np.max(np.abs(grad)) < 1e-5
