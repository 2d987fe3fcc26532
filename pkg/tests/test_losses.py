import numpy as np
import pytest
from hypothesis import given, strategies as st

from depthalign.deformation import DeformationGrid, grid_schedule
from depthalign.geometry import InvalidInput, so3_exp
from depthalign.losses import (LossKind, RegWeights, ReproBatch, handle_weights, loss_deform,
                               loss_disparity, loss_euclidean, loss_focal, loss_ratio, loss_sim,
                               loss_spatial, loss_value, kink_model_residual, ratio_residual,
                               repro_residuals)

pos = st.floats(0.1, 100)
coord = st.floats(-10, 10)
point = st.tuples(coord, coord, pos).map(np.array)


def test_euclidean_examples():
    assert loss_euclidean((1, 2, 3), (1, 2, 3)) == 0
    assert loss_euclidean((0, 0, 0), (1, 2, 2)) == 9


def test_spatial_examples():
    assert loss_spatial((2, 0, 2), (0, 0, 2)) == 1
    assert loss_spatial((1, 2, 4), (2, 4, 8)) == 0
    with pytest.raises(InvalidInput):
        loss_spatial((1, 1, 0), (1, 1, 1))


def test_disparity_examples():
    assert loss_disparity((0, 0, 3), (5, 5, 3)) == 0
    assert loss_disparity((0, 0, 1), (0, 0, 2)) == 0.25
    with pytest.raises(InvalidInput):
        loss_disparity((0, 0, -1), (0, 0, 1))


def test_ratio_examples():
    assert loss_ratio((0, 0, 5), (0, 0, 5)) == 0
    assert loss_ratio((0, 0, 2), (0, 0, 1)) == 1
    assert loss_ratio((0, 0, 1), (0, 0, 2)) == 1
    assert loss_ratio((0, 0, 2), (0, 0, 1)) == loss_ratio((0, 0, 20), (0, 0, 10))


def test_sim_examples():
    a = np.array([1.0, 2.0, 4.0])
    assert loss_sim(a, a) == 0
    assert loss_sim(2 * a, a) == pytest.approx(1.0)


@given(point, point)
def test_sim_is_sum_and_symmetric(a, b):
    assert loss_sim(a, b) == pytest.approx(loss_spatial(a, b) + loss_ratio(a, b))
    assert loss_sim(a, b) == pytest.approx(loss_sim(b, a), rel=1e-12, abs=1e-12)
    for kind in LossKind:
        assert loss_value(a, b, kind) >= 0


@given(point, point, st.sampled_from([0.1, 10.0]))
def test_homogeneity_exponents(a, b, s):
    # cancellation error scales with the operands, not with their difference
    mag_e = 1e-12 * s**2 * (a @ a + b @ b)
    mag_d = 1e-12 * s**-2 * (a[2] ** -2 + b[2] ** -2)
    assert loss_euclidean(s * a, s * b) == pytest.approx(s**2 * loss_euclidean(a, b), rel=1e-9, abs=mag_e)
    assert loss_disparity(s * a, s * b) == pytest.approx(s**-2 * loss_disparity(a, b), rel=1e-9, abs=mag_d)
    assert loss_ratio(s * a, s * b) == pytest.approx(loss_ratio(a, b), rel=1e-9, abs=1e-15)
    assert loss_spatial(s * a, s * b) == pytest.approx(loss_spatial(a, b), rel=1e-9, abs=1e-15)


def test_disparity_decreases_when_scene_grows(rng):
    for _ in range(20):
        a, b = rng.uniform(0.5, 5, (2, 3))
        if a[2] != b[2]:
            assert loss_disparity(3 * a, 3 * b) < loss_disparity(a, b)


def test_ratio_residual_squares_to_loss(rng):
    x = rng.normal(size=100)
    r, dr = ratio_residual(x)
    np.testing.assert_allclose(r**2, np.expm1(np.abs(x)), rtol=1e-12)
    assert np.all(np.sign(r) == np.sign(x))
    _, dr0 = ratio_residual(np.array([0.0]), kink_eps=1e-3)
    assert np.isfinite(dr0).all()


def test_ratio_residual_derivatives():
    x = np.array([-0.3, -1e-4, 2e-5, 0.02, 0.7])
    r, dr = ratio_residual(x)
    h = 1e-8
    fd = (ratio_residual(x + h)[0] - ratio_residual(x - h)[0]) / (2 * h)
    np.testing.assert_allclose(dr, fd, rtol=1e-4)
    # secant slope: one Gauss-Newton step r + dr * dx = 0 lands exactly on x = 0
    _, ds = ratio_residual(x, secant=True)
    np.testing.assert_allclose(r / ds, x, rtol=1e-12)


@pytest.mark.parametrize("secant", [False, True])
def test_kink_model_residual(secant):
    eps = 1e-3
    x = np.array([-0.2, -5e-4, 1e-6, 2e-4, 0.05])
    r, _ = ratio_residual(x)
    _, dr = ratio_residual(x, eps, secant)
    m = kink_model_residual(r, eps, secant)
    inside = np.abs(x) < eps
    assert np.array_equal(m[~inside], r[~inside])
    # inside the zone model and clamped slope agree: one step lands on x = 0
    np.testing.assert_allclose(m[inside] / dr[inside], x[inside], rtol=1e-9)


def make_batch(rng, n=3, G=6, N=60):
    fi = rng.integers(0, n, N)
    fj = (fi + 1 + rng.integers(0, n - 1, N)) % n
    return ReproBatch(fi, fj, rng.uniform(-0.5, 0.5, (N, 2)), rng.uniform(-0.5, 0.5, (N, 2)),
                      rng.uniform(2, 5, N), rng.uniform(2, 5, N),
                      rng.integers(0, G, (N, 4)), rng.dirichlet(np.ones(4), N),
                      rng.integers(0, G, (N, 4)), rng.dirichlet(np.ones(4), N))


def random_params(rng, n=3, G=6):
    rot = np.stack([so3_exp(rng.normal(scale=0.1, size=3)) for _ in range(n)])
    return rot, rng.normal(scale=0.2, size=(n, 3)), rng.uniform(1.5, 3, n), rng.uniform(0.5, 1.5, (n, G))


@pytest.mark.parametrize("kind", list(LossKind))
def test_residual_squares_match_point_losses(rng, kind):
    b = make_batch(rng)
    rot, tr, foc, H = random_params(rng)
    r, _, valid = repro_residuals(b, rot, tr, foc, H, kind, with_jacobian=False)
    for m in np.nonzero(valid)[0][:20]:
        i, j = b.frame_i[m], b.frame_j[m]
        phi_p = H[i, b.idx_p[m]] @ b.w_p[m]
        phi_q = H[j, b.idx_q[m]] @ b.w_q[m]
        zp, zq = phi_p * b.depth_p[m], phi_q * b.depth_q[m]
        X = np.array([*b.p[m] * zp / foc[i], zp])
        Xj = rot[j].T @ (rot[i] @ X + tr[i] - tr[j])
        a = Xj * [foc[j], foc[j], 1]
        bq = np.array([*b.q[m] * zq, zq])
        assert np.sum(r[m] ** 2) == pytest.approx(loss_value(a, bq, kind), rel=1e-10, abs=1e-14)


def test_behind_camera_rows_dropped(rng):
    b = make_batch(rng, N=20)
    rot, tr, foc, H = random_params(rng)
    tr = tr.copy()
    tr[:, 2] = [0.0, 100.0, 200.0]     # later frames far in front along +z look past earlier ones
    r, J, valid = repro_residuals(b, rot, tr, foc, H)
    assert not valid.all()
    assert np.all(r[~valid] == 0) and np.all(J[~valid] == 0)


def test_first_order_taylor_in_tj(rng):
    b = make_batch(rng)
    rot, tr, foc, H = random_params(rng)
    r0, J, _ = repro_residuals(b, rot, tr, foc, H, LossKind.SPATIAL_DISPARITY)
    eps = 1e-6
    for j in range(3):
        t2 = tr.copy()
        t2[j, 2] += eps
        r1, _, _ = repro_residuals(b, rot, t2, foc, H, LossKind.SPATIAL_DISPARITY, with_jacobian=False)
        pred = np.zeros_like(r0)
        pred += np.where((b.frame_i == j)[:, None], J[:, :, 5], 0) * eps
        pred += np.where((b.frame_j == j)[:, None], J[:, :, 16], 0) * eps
        np.testing.assert_allclose(r1 - r0, pred, atol=1e-11)


def test_handle_weights_examples():
    W, H = 64, 40
    g = DeformationGrid.constant(*grid_schedule(W, H)[3], W, H)
    np.testing.assert_allclose(handle_weights(np.zeros((H, W), bool), g), 0.1)
    np.testing.assert_allclose(handle_weights(np.ones((H, W), bool), g), 10.1)


def test_handle_weights_half_mask_brute_force():
    W, H = 64, 40
    g = DeformationGrid.constant(*grid_schedule(W, H)[2], W, H)
    m = np.zeros((H, W), bool)
    m[:, : W // 2] = True
    w = handle_weights(m, g)
    ys, xs = np.mgrid[0:H, 0:W]
    idx, b = g.basis(np.stack([xs.ravel(), ys.ravel()], 1).astype(float))
    num = np.zeros(g.nx * g.ny)
    den = np.zeros(g.nx * g.ny)
    np.add.at(num, idx, b * m.ravel()[:, None])
    np.add.at(den, idx, b)
    np.testing.assert_allclose(w.ravel(), 0.1 + 10 * num / den, rtol=1e-12)
    # the middle column of a 3-wide grid sees half of its support masked
    np.testing.assert_allclose(w[:, 1], 0.1 + 10 / 2, rtol=1e-12)


def test_handle_weights_unnormalized_switch():
    W, H = 64, 40
    g = DeformationGrid.constant(*grid_schedule(W, H)[2], W, H)
    w = handle_weights(np.ones((H, W), bool), g, RegWeights(normalize_dynamic_fraction=False))
    assert np.all(w > 10.1)


def test_loss_deform_examples(rng):
    W, H = 64, 40
    g = DeformationGrid.constant(3, 3, W, H, 1.7)
    assert loss_deform([g], [np.full((3, 3), 0.1)])[0] == 0
    g = DeformationGrid(np.array([[1.0, 3.0], [1.0, 3.0]]), W, H)
    # two horizontal pairs with difference 2, two vertical pairs with 0
    assert loss_deform([g], [np.full((2, 2), 0.1)])[0] == pytest.approx(2 * 4 * 0.1)
    assert loss_deform([g], [np.full((2, 2), 0.1)], count_pairs_twice=True)[0] == pytest.approx(4 * 4 * 0.1)


def test_loss_deform_brute_force_and_gradient(rng):
    W, H = 64, 40
    shape = grid_schedule(W, H)[3]
    grids = [DeformationGrid(rng.uniform(0.5, 2, shape[::-1]), W, H) for _ in range(2)]
    wts = [rng.uniform(0.1, 10, shape[::-1]) for _ in range(2)]
    val, grad = loss_deform(grids, wts)
    brute = 0.0
    for g, w in zip(grids, wts):
        s = g.handles
        for y in range(g.ny):
            for x in range(g.nx):
                for dy, dx in ((0, 1), (1, 0)):
                    if y + dy < g.ny and x + dx < g.nx:
                        brute += (s[y, x] - s[y + dy, x + dx]) ** 2 * max(w[y, x], w[y + dy, x + dx])
    assert val == pytest.approx(brute, rel=1e-12)
    eps = 1e-6
    for f in range(2):
        for k in rng.choice(shape[0] * shape[1], 5, replace=False):
            def at(e):
                h = grids[f].handles.copy().ravel()
                h[k] += e
                gs = list(grids)
                gs[f] = grids[f].with_handles(h)
                return loss_deform(gs, wts)[0]
            fd = (at(eps) - at(-eps)) / (2 * eps)
            assert grad[f].ravel()[k] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_loss_focal_examples():
    u_hat = 1 / np.tan(np.deg2rad(20))
    assert loss_focal([u_hat] * 4, u_hat)[0] == 0
    assert loss_focal([u_hat + 1], u_hat)[0] == pytest.approx(1.0)
    u = np.array([1.0, 2.5, 4.0])
    val, grad = loss_focal(u, u_hat)
    np.testing.assert_allclose(grad, 2 * (u - u_hat))
    eps = 1e-6
    for i in range(3):
        d = np.zeros(3)
        d[i] = eps
        fd = (loss_focal(u + d, u_hat)[0] - loss_focal(u - d, u_hat)[0]) / (2 * eps)
        assert grad[i] == pytest.approx(fd, rel=1e-6)


def test_reg_weights_defaults_and_validation():
    w = RegWeights()
    assert (w.lambda1, w.lambda2, w.lambda_deform, w.lambda_focal) == (0.1, 10.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        RegWeights(lambda1=-1)
