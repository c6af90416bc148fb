import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from splatreorg import toysplat as ts
from splatreorg.model import logit, sigmoid
from splatreorg.resample import ResamplePlan

from oracles import composite

SATURATED = 40.0  # sigmoid(40) == 1.0 in float64


def depth_scene(alphas, colors, target, depths=None):
    n = len(alphas)
    depths = np.arange(n, dtype=float) if depths is None else depths
    return ts.make_scene(depths, logit(np.asarray(alphas, float)) if n else [], np.asarray(colors, float).reshape(n, -1),
                         np.zeros((1, 0)), np.atleast_2d(target))


# ---- render

def test_single_opaque_primitive():
    sc = ts.make_scene([1.0], [SATURATED], [[0.7]], np.zeros((1, 0)), [[0.0]])
    assert ts.render(sc)[0, 0] == 0.7


def test_two_half_primitives():
    assert ts.render(depth_scene([0.5, 0.5], [1.0, 0.0], [[0.0]]))[0, 0] == 0.5


def test_empty_scene_renders_black():
    sc = ts.make_scene([], [], np.zeros((0, 1)), np.zeros((3, 0)), np.zeros((3, 1)))
    np.testing.assert_array_equal(ts.render(sc), np.zeros((3, 1)))


@given(st.integers(0, 2 ** 32 - 1))
def test_render_matches_loop_compositing(seed):
    rng = np.random.default_rng(seed)
    sc = ts.random_scene(rng)
    g = np.ones((len(sc.pixels), len(sc.depths))) if sc.dim == 0 else np.exp(
        -0.5 * ((sc.pixels[:, None] - sc.centers[None]) ** 2).sum(-1) / np.exp(2 * sc.log_widths))
    order = np.lexsort((np.arange(len(sc.depths)), sc.depths))
    for r in range(len(sc.pixels)):
        a = sigmoid(sc.logits[order]) * g[r, order]
        C, _ = composite(a, sc.colors[order])
        np.testing.assert_allclose(ts.render(sc)[r], C, rtol=1e-13, atol=1e-15)


def test_tie_break_is_by_index():
    sc = depth_scene([0.5, 0.5], [1.0, 0.0], [[0.0]], depths=np.array([2.0, 2.0]))
    assert ts.render(sc)[0, 0] == 0.5
    swapped = depth_scene([0.5, 0.5], [0.0, 1.0], [[0.0]], depths=np.array([2.0, 2.0]))
    assert ts.render(swapped)[0, 0] == 0.25


# ---- gradients

def test_zero_residual_zero_gradient():
    sc = depth_scene([0.5, 0.5], [1.0, 0.0], [[0.5]])
    L, g = ts.gradients(sc)
    assert L == 0.0 and np.all(g == 0.0)


def test_color_gradient_closed_form(rng):
    sc = ts.random_scene(rng, n=5, rays=1, dim=0, channels=1)
    L, g = ts.gradients(sc)
    C = ts.render(sc)[0, 0]
    order = sc.order
    a = sigmoid(sc.logits[order])
    T = np.concatenate([[1.0], np.cumprod(1 - a)[:-1]])
    expected = np.empty(5)
    expected[order] = 2 * (C - sc.target[0, 0]) * T * a
    np.testing.assert_allclose(g[5:10], expected, rtol=1e-13)


def test_hidden_color_gradient_scaled_by_transmittance():
    target = [[0.2]]
    alone = ts.make_scene([5.0], [logit(0.9)], [[0.8]], np.zeros((1, 0)), target)
    hidden = ts.make_scene([2.0, 5.0], [logit(0.99), logit(0.9)], [[0.2], [0.8]], np.zeros((1, 0)), target)
    g_alone = ts.gradients(alone)[1][1]
    g_hidden = ts.gradients(hidden)[1][3]
    assert abs(g_hidden) <= 0.01 * abs(g_alone) * (1 + 1e-12)
    # finite differences agree
    assert ts.finite_difference_error(hidden) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_fd_agreement_small_batch(seed):
    rng = np.random.default_rng(seed)
    worst = max(ts.finite_difference_error(ts.random_scene(rng)) for _ in range(20))
    assert worst < 1e-4


def test_gradient_near_opaque_uses_stable_path():
    sc = ts.make_scene([1.0, 2.0, 3.0], [SATURATED, 0.3, -0.2], [[0.1], [0.9], [0.4]], np.zeros((1, 0)), [[0.5]])
    _, g = ts.gradients(sc)
    assert np.all(np.isfinite(g))
    # primitives behind a fully opaque one receive no gradient
    np.testing.assert_array_equal(g[[1, 2, 4, 5]], 0.0)


# ---- optimize

def test_optimal_scene_stays_at_zero():
    sc = depth_scene([0.5, 0.5], [1.0, 0.0], [[0.5]])
    st_ = ts.optimize(sc, 20, 0.1)
    assert st_.loss_history == [0.0] * 21


def test_single_free_color_converges_to_least_squares():
    # saturated opacity -> only the color moves; footprints give per-ray weights g_r
    u = np.array([[0.0], [0.3], [0.6]])
    target = np.array([[0.2], [0.5], [0.1]])
    sc = ts.make_scene([1.0], [SATURATED], [[0.0]], u, target, centers=[[0.1]], log_widths=[np.log(0.4)])
    g = np.exp(-0.5 * (u[:, 0] - 0.1) ** 2 / 0.16)
    c_star = (g @ target[:, 0]) / (g @ g)
    st_ = ts.optimize(sc, 500, 0.2, fit_geometry=False)
    assert abs(st_.scene.colors[0, 0] - c_star) < 1e-6
    floor = float(((g * c_star - target[:, 0]) ** 2).sum())
    assert st_.loss_history[-1] == pytest.approx(floor, abs=1e-10)
    assert len(st_.loss_history) == 501


def test_deadlock_plateau_above_floor():
    sc = ts.deadlock_scene(0)
    st_ = ts.optimize(sc, 1000, 0.01, ts.DEADLOCK_TARGET_DEPTH, fit_geometry=False)
    L = st_.loss_history
    # direct descent is stuck: < 5% progress in 1000 steps ...
    assert L[-1] > 0.95 * L[0]
    # ... although the same parameterization admits a far lower loss: given 4x the budget
    # descent eventually escapes, so the floor lies below 0.05
    escaped = ts.optimize(sc, 4000, 0.01, fit_geometry=False).loss_history[-1]
    assert escaped < 0.05 < 0.95 * L[0]
    assert min(st_.min_transmittance) <= 0.01 + 1e-12


def test_optimize_is_deterministic_and_records_history():
    sc = ts.deadlock_scene(3)
    a, b = ts.optimize(sc, 30, 0.01, 4.9), ts.optimize(sc, 30, 0.01, 4.9)
    assert a.loss_history == b.loss_history and len(a.loss_history) == 31 == len(a.min_transmittance)
    np.testing.assert_array_equal(a.scene.params(), b.scene.params())


def test_frozen_geometry_keeps_centres():
    sc = ts.deadlock_scene(1)
    st_ = ts.optimize(sc, 10, 0.01, fit_geometry=False)
    np.testing.assert_array_equal(st_.scene.centers, sc.centers)
    np.testing.assert_array_equal(st_.scene.log_widths, sc.log_widths)
    moved = ts.optimize(sc, 10, 0.01, fit_geometry=True)
    assert not np.array_equal(moved.scene.centers, sc.centers)


def test_divergence_reported():
    sc = ts.make_scene([1.0], [0.0], [[0.5]], np.zeros((1, 0)), [[1.0]])
    st_ = ts.optimize(sc, 100, 1e308)
    assert st_.diverged and st_.iterations < 100
    with pytest.raises(ValueError):
        ts.optimize(sc, -1, 0.1)


# ---- toy reorganize

def test_all_mass_in_one_primitive():
    sc = ts.make_scene([3.0, 9.0], [logit(0.9), -200.0], [[0.1], [0.9]], np.zeros((1, 0)), [[0.0]],
                       log_widths=[np.log(0.05), 0.0])
    out = ts.toy_reorganize(sc, ResamplePlan(samples=200, k=5, seed=1))
    assert np.all(np.abs(out.depths - 3.0) < 6 * 0.05)
    assert np.all(sigmoid(out.logits) == 0.01)
    assert np.all(out.colors == 0.1)


def test_two_cluster_histogram_within_binomial_bound():
    sc = ts.make_scene([1.0, 10.0], [logit(0.3), logit(0.6)], [[0.2], [0.7]], np.zeros((1, 0)), [[0.0]],
                       log_widths=[np.log(0.2), np.log(0.2)])
    m = 20_000
    out = ts.toy_reorganize(sc, ResamplePlan(samples=m, k=20, seed=2))
    n_first = int(np.count_nonzero(out.depths < 5.5))
    p = 1 / 3
    assert abs(n_first - m * p) <= 4 * np.sqrt(m * p * (1 - p))
    np.testing.assert_array_equal(out.colors[out.depths < 5.5], 0.2)


def test_toy_reorganize_deterministic_2d():
    sc = ts.deadlock_scene(0)
    a, b = ts.toy_reorganize(sc, ResamplePlan(seed=5)), ts.toy_reorganize(sc, ResamplePlan(seed=5))
    np.testing.assert_array_equal(a.params(), b.params())
    np.testing.assert_array_equal(a.depths, b.depths)
    with pytest.raises(ValueError):
        ts.toy_reorganize(ts.cluster_scene(10), ResamplePlan(k=20))


# ---- deadlock experiment

def test_deadlock_transmittance_before_and_after():
    sc = ts.deadlock_scene(0)
    assert ts.transmittance_to(sc, ts.DEADLOCK_TARGET_DEPTH).min() <= 0.01 + 1e-12
    fresh = ts.toy_reorganize(sc, ResamplePlan(k=20, alpha0=0.01, seed=0))
    assert ts.transmittance_to(fresh, ts.DEADLOCK_TARGET_DEPTH).min() >= 0.99 ** 40


def test_single_seed_experiment_record():
    rec = ts.deadlock_experiment(seed=0, iters=300)
    d = rec.to_dict()
    assert d["seed"] == 0 and rec.transmittance_before <= 0.01 + 1e-12
    assert rec.transmittance_after >= 0.99 ** 40
    assert rec.reorg_wins == (rec.reorg_loss < rec.direct_loss)
    json.dumps(d)


# ---- serialization

def test_scene_dict_roundtrip_and_validation():
    sc = ts.deadlock_scene(2)
    back = ts.scene_from_dict(json.loads(json.dumps(ts.scene_to_dict(sc))))
    np.testing.assert_array_equal(back.params(), sc.params())
    alt = ts.scene_from_dict({"depths": [1.0], "opacities": [0.5], "widths": [0.1], "colors": [[0.3]],
                              "centers": [[0.0]], "pixels": [[0.0]], "target": [[0.2]]})
    assert alt.logits[0] == 0.0
    with pytest.raises(ValueError):
        ts.scene_from_dict({**ts.scene_to_dict(sc), "colors": [[2.0]] * len(sc.depths)})
    with pytest.raises(ValueError):
        ts.scene_from_dict({"depths": [1.0], "opacities": [0.5], "widths": [0.0], "colors": [[0.3]],
                            "centers": [[0.0]], "pixels": [[0.0]], "target": [[0.2]]})
