import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import convolve

from depthalign.depthfilter import FilterConfig, filter_depth, filter_video, filter_weight
from depthalign.geometry import Pose
from depthalign.solver import CameraParamBlock
from depthalign.synthgen import GroundTruth, SceneSpec, render_depth, render_flow


def gt_params(gt):
    n = len(gt.poses)
    return CameraParamBlock(np.stack([p.rotation for p in gt.poses]),
                            np.stack([p.translation for p in gt.poses]),
                            np.full(n, gt.focal), np.ones((n, 1, 1)), gt.width, gt.height)


def sliding(boxes, n=4, step=0.1, W=40, H=24):
    spec = SceneSpec(width=W, height=H, n_frames=n)
    poses = [Pose(np.eye(3), np.array([step * k, 0.0, 0.0])) for k in range(n)]
    gt = GroundTruth(spec, poses, 2.0, boxes)
    depths = [render_depth(gt, k)[0] for k in range(n)]
    flows = {}
    for k in range(n - 1):
        flows[(k, k + 1)] = render_flow(gt, k, k + 1)[0]
        flows[(k + 1, k)] = render_flow(gt, k + 1, k)[0]
    return gt, depths, flows


def plane(z):
    return (np.array([-100.0, -100.0, z]), np.array([100.0, 100.0, z + 1]), False)


def single(d):
    return CameraParamBlock(np.eye(3)[None], np.zeros((1, 3)), np.ones(1), np.ones((1, 1, 1)),
                            d.shape[1], d.shape[0])


# -- weights ------------------------------------------------------------------

def test_weight_examples():
    assert filter_weight(2.0, 2.0) == 1.0
    assert filter_weight(1.0, 2.0, 3.0) == pytest.approx(np.exp(-3.0))
    assert filter_weight(4.0, 2.0, 3.0) == pytest.approx(np.exp(-3.0))
    assert filter_weight(1.0, 7.0, 0.0) == 1.0
    assert filter_weight(1.0, -1.0) == 0.0
    assert np.array_equal(filter_weight([1.0, 0.0], [1.0, 1.0]), [1.0, 0.0])


def test_config_validation():
    for kw in ({"tau": -1}, {"radius": -1}, {"lambda_f": -0.5}):
        with pytest.raises(ValueError):
            FilterConfig(**kw)


# -- exact cases --------------------------------------------------------------

def test_constant_plane_is_fixed_point():
    gt, depths, flows = sliding([plane(5.0)])
    assert np.all(np.concatenate([d.ravel() for d in depths]) == 5.0)
    out, fallback = filter_video(depths, gt_params(gt), flows, FilterConfig(tau=3))
    assert max(np.abs(d - 5.0).max() for d in out) < 1e-6
    assert fallback == [0] * 4


def test_single_frame_box_blur(rng):
    d = rng.uniform(1, 2, (9, 11))
    out, _ = filter_depth(0, [d], single(d), {}, FilterConfig(tau=0, radius=1, lambda_f=0))
    k = np.ones((3, 3))
    expected = convolve(d, k, mode="constant") / convolve(np.ones_like(d), k, mode="constant")
    np.testing.assert_allclose(out, expected, rtol=1e-14)


def test_unnormalized_sum(rng):
    d = rng.uniform(1, 2, (6, 7))
    cfg = FilterConfig(tau=0, radius=1, lambda_f=0, normalize=False)
    out, _ = filter_depth(0, [d], single(d), {}, cfg)
    np.testing.assert_allclose(out, convolve(d, np.ones((3, 3)), mode="constant"), rtol=1e-14)


def test_zero_window_is_identity(rng):
    d = rng.uniform(0.5, 30, (7, 8))
    out, _ = filter_depth(0, [d], single(d), {}, FilterConfig(tau=0, radius=0))
    assert np.array_equal(out, d)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 10.0), st.integers(1, 2))
def test_output_is_convex_combination(seed, lam, radius):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.5, 5, (8, 9))
    out, _ = filter_depth(0, [d], single(d), {}, FilterConfig(tau=0, radius=radius, lambda_f=lam))
    p = np.pad(d, radius, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(p, (2 * radius + 1,) * 2)
    assert np.all(out >= win.min(axis=(-1, -2)) - 1e-12)
    assert np.all(out <= win.max(axis=(-1, -2)) + 1e-12)


def test_fallback_for_invalid_pixel():
    d = np.full((5, 5), 2.0)
    d[2, 3] = np.nan
    out, n = filter_depth(0, [d], single(d), {}, FilterConfig(tau=0, radius=1))
    assert n == 1 and np.isnan(out[2, 3])
    assert np.all(out[np.isfinite(d)] == 2.0)


# -- behavior on rendered video -----------------------------------------------

def test_edge_preserved_between_planes():
    near = (np.array([-100.0, -100.0, 1.0]), np.array([0.0, 100.0, 1.5]), False)
    gt, depths, flows = sliding([near, plane(10.0)], n=3, step=0.02)
    out, _ = filter_video(depths, gt_params(gt), flows, FilterConfig(tau=1, lambda_f=3.0))
    for d, o in zip(depths, out):
        for z in (1.0, 10.0):
            m = d == z
            assert m.sum() > 100
            # any pull across the edge must stay below 1% of the depth step
            assert np.abs(o[m] - z).max() < 0.01 * 9.0


def test_noise_reduction(arc6):
    o = arc6
    rng = np.random.default_rng(11)
    depths = [d.copy() for d in o.depths]
    depths[2] = depths[2] * (1 + rng.uniform(-0.05, 0.05, depths[2].shape))
    flows = {p: o.flow(*p)[0] for p in o.pairs if abs(p[0] - p[1]) == 1}
    masks = {p: o.fb[p] for p in flows}
    params = CameraParamBlock(np.stack([p.rotation for p in o.gt.poses]),
                              np.stack([p.translation for p in o.gt.poses]),
                              np.full(o.n, o.gt.focal), np.ones((o.n, 1, 1)), o.gt.width, o.gt.height)
    out, _ = filter_depth(2, depths, params, flows, FilterConfig(tau=2), masks)
    rel = lambda d: np.sqrt(np.mean(((d - o.depths[2]) / o.depths[2]) ** 2))
    assert rel(out) < 0.6 * rel(depths[2])


def test_threads_bitwise_equal(arc6):
    o = arc6
    flows = {p: o.flow(*p)[0] for p in o.pairs if abs(p[0] - p[1]) == 1}
    params = CameraParamBlock(np.stack([p.rotation for p in o.gt.poses]),
                              np.stack([p.translation for p in o.gt.poses]),
                              np.full(o.n, o.gt.focal), np.ones((o.n, 1, 1)), o.gt.width, o.gt.height)
    cfg = FilterConfig(tau=2)
    a, _ = filter_video(o.depths, params, flows, cfg, threads=1)
    b, _ = filter_video(o.depths, params, flows, cfg, threads=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
