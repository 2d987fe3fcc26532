import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthalign.deformation import (DEFAULT_LONG_COUNTS, DeformationGrid, apply_deformation,
                                    eval_spline, grid_schedule, subdivide)
from depthalign.raster import pixel_grid

W, H = 64, 40


def random_grid(rng, n_long=5, width=W, height=H):
    shape = grid_schedule(width, height)[DEFAULT_LONG_COUNTS.index(n_long)]
    return DeformationGrid(rng.uniform(0.5, 2.0, (shape[1], shape[0])), width, height)


def test_schedule_full_hd():
    s = grid_schedule(1920, 1080)
    assert s[0] == (1, 1)
    assert s[-1] == (17, 10)
    assert [c for c, _ in s] == [1, 2, 3, 5, 9, 17]


def test_schedule_square_and_degenerate():
    assert grid_schedule(512, 512)[-1] == (17, 17)
    s = grid_schedule(300, 1)
    assert s[-1] == (17, 2)
    assert all(r >= 2 for _, r in s[1:])


def test_schedule_portrait_puts_long_count_on_rows():
    assert grid_schedule(1080, 1920)[-1] == (10, 17)


def test_eval_constant_grid_is_one(rng):
    g = DeformationGrid.constant(5, 4, W, H)
    for p in rng.uniform([0, 0], [W - 1, H - 1], (20, 2)):
        assert eval_spline(g, p) == pytest.approx(1.0, abs=1e-15)


def test_eval_at_handles_returns_handle(rng):
    g = random_grid(rng)
    pos = g.handle_positions().reshape(-1, 2)
    np.testing.assert_allclose(g.evaluate(pos), g.handles.ravel(), rtol=1e-12)


def test_eval_two_handle_midpoint():
    g = DeformationGrid(np.array([[1.0, 3.0], [1.0, 3.0]]), W, H)
    # handles span [0, W-1] horizontally
    assert eval_spline(g, ((W - 1) / 2, 0.0)) == pytest.approx(2.0)
    assert eval_spline(g, ((W - 1) / 2, H - 1)) == pytest.approx(2.0)


def test_partition_of_unity_and_bounds(rng):
    g = random_grid(rng, 9)
    xy = rng.uniform([0, 0], [W - 1, H - 1], (1000, 2))
    idx, w = g.basis(xy)
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-12
    assert np.all((w >= 0) & ((w > 0).sum(axis=1)[:, None] <= 4))
    v = g.evaluate(xy)
    assert np.all(v >= g.handles.min() - 1e-12) and np.all(v <= g.handles.max() + 1e-12)


def test_outside_points_clamp_to_border(rng):
    g = random_grid(rng)
    inside = g.evaluate(np.array([[0.0, 5.0], [W - 1, 7.0]]))
    outside = g.evaluate(np.array([[-10.0, 5.0], [W + 20, 7.0]]))
    np.testing.assert_allclose(outside, inside, rtol=1e-12)


def test_field_matches_pointwise_evaluation(rng):
    g = random_grid(rng, 9)
    np.testing.assert_allclose(g.field().ravel(), g.evaluate(pixel_grid(W, H)), rtol=1e-12)


def test_subdivide_constant():
    g = DeformationGrid.constant(1, 1, W, H, 2.0)
    fine = subdivide(g, grid_schedule(W, H)[1])
    np.testing.assert_array_equal(fine.handles, 2.0)


def test_subdivide_linear_ramp(rng):
    sched = grid_schedule(W, H)
    g = DeformationGrid.constant(*sched[1], W, H)
    pos = g.handle_positions()
    g = g.with_handles(1.0 + 0.01 * pos[..., 0] + 0.02 * pos[..., 1])
    fine = subdivide(g, sched[2])
    xy = rng.uniform([0, 0], [W - 1, H - 1], (100, 2))
    np.testing.assert_allclose(fine.evaluate(xy), 1.0 + 0.01 * xy[:, 0] + 0.02 * xy[:, 1], rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 3, 5, 9]))
def test_subdivide_preserves_field(seed, n_long):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, n_long)
    sched = grid_schedule(W, H)
    fine = subdivide(g, sched[sched.index(g.shape) + 1])
    assert np.abs(fine.field() - g.field()).max() < 1e-12


def test_subdivide_rejects_wrong_successor(rng):
    g = random_grid(rng, 3)
    with pytest.raises(ValueError):
        subdivide(g, (9, 6))
    with pytest.raises(ValueError):
        subdivide(DeformationGrid.constant(17, 11, W, H), (33, 21))


def test_grid_rejects_bad_handles():
    with pytest.raises(ValueError):
        DeformationGrid(np.array([[1.0, -1.0], [1.0, 1.0]]), W, H)
    with pytest.raises(ValueError):
        DeformationGrid(np.ones((3, 7)), W, H)


def test_apply_deformation_examples(rng):
    d = rng.uniform(1, 5, (H, W))
    out = apply_deformation(d, DeformationGrid.constant(5, 4, W, H))
    np.testing.assert_array_equal(out, d)
    out = apply_deformation(np.full((H, W), 3.0), DeformationGrid.constant(1, 1, W, H, 2.0))
    np.testing.assert_array_equal(out, 6.0)
    g = random_grid(rng, 9)
    out = apply_deformation(d, g)
    brute = np.array([[eval_spline(g, (x, y)) * d[y, x] for x in range(W)] for y in range(H)])
    np.testing.assert_allclose(out, brute, rtol=1e-12)
    with pytest.raises(ValueError):
        apply_deformation(d[:-1], g)


def test_one_by_one_grid_is_scalar_scale(rng):
    d = rng.uniform(1, 5, (H, W))
    np.testing.assert_array_equal(apply_deformation(d, DeformationGrid.constant(1, 1, W, H, 0.7)), d * 0.7)
