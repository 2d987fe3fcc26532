"""Similarity losses, reprojection residuals and regularizers.

Every loss the solver consumes is written as a residual vector whose squared
norm equals the loss, together with its analytic Jacobian.  Pose increments
are right-multiplied axis-angle rotations plus additive translations; grid
handles are parameterized by their logarithm.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geometry import InvalidInput, hat_batch

# local parameter layout of one frame inside a reprojection residual
N_POSE = 6
N_LOCAL = N_POSE + 1 + 4          # rotation, translation, focal, 4 handles
N_COLS = 2 * N_LOCAL


class LossKind(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    SPATIAL_DISPARITY = "spatial+disparity"
    SPATIAL_RATIO = "spatial+ratio"


@dataclass(frozen=True)
class RegWeights:
    lambda1: float = 0.1
    lambda2: float = 10.0
    lambda_deform: float = 1.0
    lambda_focal: float = 1.0
    focal_prior: float = 1.0 / np.tan(np.deg2rad(20.0))
    normalize_dynamic_fraction: bool = True
    count_pairs_twice: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda_deform", "lambda_focal", "focal_prior"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _check_z(*points):
    for c in points:
        if not c[2] > 0:
            raise InvalidInput(f"point {tuple(c)} must have positive depth")


def loss_euclidean(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(d @ d)


def loss_spatial(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_z(a, b)
    d = a[:2] / a[2] - b[:2] / b[2]
    return float(d @ d)


def loss_disparity(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_z(a, b)
    return float((1.0 / a[2] - 1.0 / b[2]) ** 2)


def ratio(za, zb):
    """``max/min - 1`` of two positive depths; works on arrays."""
    za = np.asarray(za, dtype=float)
    zb = np.asarray(zb, dtype=float)
    return np.maximum(za, zb) / np.minimum(za, zb) - 1.0


def loss_ratio(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_z(a, b)
    return float(ratio(a[2], b[2]))


def loss_sim(a, b):
    return loss_spatial(a, b) + loss_ratio(a, b)


def loss_value(a, b, kind):
    kind = LossKind(kind)
    if kind is LossKind.EUCLIDEAN:
        return loss_euclidean(a, b)
    if kind is LossKind.SPATIAL_DISPARITY:
        return loss_spatial(a, b) + loss_disparity(a, b)
    return loss_sim(a, b)


def ratio_residual(x, kink_eps=1e-10, secant=False):
    """Signed residual for a log depth ratio ``x`` and its derivative.

    ``r**2 == exp(|x|) - 1``, the ratio loss.  The derivative is unbounded at
    ``x == 0``; it is evaluated at ``max(|x|, kink_eps)`` there.  With
    ``secant`` the slope ``r / x`` is returned instead: a Gauss-Newton step
    then drives ``x`` (not the square-root residual) to zero, which avoids
    the overshoot of the tangent model near the kink.
    """
    ax = np.abs(x)
    r = np.sign(x) * np.sqrt(np.expm1(ax))
    axc = np.maximum(ax, kink_eps)
    if secant:
        dr = np.sqrt(np.expm1(axc)) / axc
    else:
        dr = np.exp(axc) / (2.0 * np.sqrt(np.expm1(axc)))
    return r, dr


def kink_model_residual(r, kink_eps, secant=False):
    """Gauss-Newton model residual for ratio residuals ``r`` near the kink.

    Inside ``|x| < kink_eps`` the derivative of :func:`ratio_residual` is
    clamped, so the model uses the linear ``k * x`` with ``k`` the clamped
    slope: residual and Jacobian then agree and a Gauss-Newton step on an
    isolated term lands on ``x = 0`` instead of overshooting.  Outside the
    zone this is ``r`` itself.  The loss value is unaffected.
    """
    r = np.asarray(r, dtype=float)
    x = np.sign(r) * np.log1p(r**2)
    _, k = ratio_residual(np.array([kink_eps]), kink_eps, secant)
    return np.where(np.abs(x) < kink_eps, k[0] * x, r)


@dataclass
class ReproBatch:
    """Per-match data needed to evaluate reprojection residuals.

    ``p``/``q`` are image coordinates of the match endpoints in frames i and
    j, ``depth_p``/``depth_q`` the sampled input depths, and ``idx_*`` /
    ``w_*`` the bilinear handle bases of the two endpoints.
    """

    frame_i: np.ndarray
    frame_j: np.ndarray
    p: np.ndarray
    q: np.ndarray
    depth_p: np.ndarray
    depth_q: np.ndarray
    idx_p: np.ndarray
    w_p: np.ndarray
    idx_q: np.ndarray
    w_q: np.ndarray

    def __len__(self):
        return len(self.frame_i)

    def subset(self, sl):
        return ReproBatch(*(getattr(self, f)[sl] for f in self.__dataclass_fields__))


def _mv(M, v):
    """Batched matrix-vector product."""
    return (M @ v[:, :, None])[:, :, 0]


def repro_residuals(batch, rotations, translations, focals, handles, kind=LossKind.SPATIAL_RATIO,
                    kink_eps=1e-10, with_jacobian=True, secant=False):
    """Vectorized reprojection residuals.

    ``handles`` is ``(n_frames, G)`` of raw (positive) scale values.
    Returns ``(r, J, valid)`` with ``r`` of shape ``(N, 3)``, ``J`` of shape
    ``(N, 3, 22)`` in the column layout ``[w_i, t_i, u_i, h_i(4), w_j, t_j,
    u_j, h_j(4)]`` (handle columns are derivatives w.r.t. log handles), and
    ``valid`` marking matches that stay in front of camera j.  Invalid rows
    are zeroed.
    """
    kind = LossKind(kind)
    fi, fj = batch.frame_i, batch.frame_j
    Ri, Rj = rotations[fi], rotations[fj]
    ti, tj = translations[fi], translations[fj]
    ui, uj = focals[fi], focals[fj]

    hp = handles[fi[:, None], batch.idx_p] * batch.w_p
    hq = handles[fj[:, None], batch.idx_q] * batch.w_q
    phi_p = hp.sum(axis=1)
    phi_q = hq.sum(axis=1)

    zp = phi_p * batch.depth_p
    Xi = np.empty((len(batch), 3))
    Xi[:, :2] = batch.p * (zp / ui)[:, None]
    Xi[:, 2] = zp
    RjT = Rj.transpose(0, 2, 1)
    world = _mv(Ri, Xi) + ti
    Xj = _mv(RjT, world - tj)
    a = Xj.copy()
    a[:, :2] *= uj[:, None]
    zq = phi_q * batch.depth_q
    b = np.empty_like(a)
    b[:, :2] = batch.q * zq[:, None]
    b[:, 2] = zq

    valid = a[:, 2] > 0
    az = np.where(valid, a[:, 2], 1.0)

    r = np.empty((len(batch), 3))
    if kind is LossKind.EUCLIDEAN:
        r[:] = a - b
    else:
        r[:, :2] = a[:, :2] / az[:, None] - batch.q
        if kind is LossKind.SPATIAL_DISPARITY:
            r[:, 2] = 1.0 / az - 1.0 / zq
        else:
            x = np.log(az) - np.log(zq)
            r[:, 2], dr_dx = ratio_residual(x, kink_eps, secant)
    r[~valid] = 0.0
    if not with_jacobian:
        return r, None, valid

    # dr/da and dr/db, (N, 3, 3)
    n = len(batch)
    dr_da = np.zeros((n, 3, 3))
    dr_db = np.zeros((n, 3, 3))
    if kind is LossKind.EUCLIDEAN:
        dr_da[:] = np.eye(3)
        dr_db[:] = -np.eye(3)
    else:
        inv = 1.0 / az
        dr_da[:, 0, 0] = inv
        dr_da[:, 1, 1] = inv
        dr_da[:, 0, 2] = -a[:, 0] * inv**2
        dr_da[:, 1, 2] = -a[:, 1] * inv**2
        # b_xy / b_z == q is parameter free
        if kind is LossKind.SPATIAL_DISPARITY:
            dr_da[:, 2, 2] = -inv**2
            dr_db[:, 2, 2] = 1.0 / zq**2
        else:
            dr_da[:, 2, 2] = dr_dx * inv
            dr_db[:, 2, 2] = -dr_dx / zq

    D = np.ones((n, 3))
    D[:, 0] = uj
    D[:, 1] = uj
    dr_dXj = dr_da * D[:, None, :]
    dr_dXi = dr_dXj @ (RjT @ Ri)

    J = np.zeros((n, 3, N_COLS))
    # frame i
    J[:, :, 0:3] = -(dr_dXi @ hat_batch(Xi))
    J[:, :, 3:6] = dr_dXj @ RjT
    dXi_du = np.zeros((n, 3))
    dXi_du[:, :2] = -batch.p * (zp / ui**2)[:, None]
    J[:, :, 6] = _mv(dr_dXi, dXi_du)
    dXi_dlog = Xi[:, :, None] * (hp / phi_p[:, None])[:, None, :]   # (n, 3, 4)
    J[:, :, 7:11] = dr_dXi @ dXi_dlog
    # frame j
    o = N_LOCAL
    J[:, :, o:o + 3] = dr_dXj @ hat_batch(Xj)
    J[:, :, o + 3:o + 6] = -J[:, :, 3:6]
    da_du = np.zeros((n, 3))
    da_du[:, :2] = Xj[:, :2]
    J[:, :, o + 6] = _mv(dr_da, da_du)
    db_dlog = b[:, :, None] * (hq / phi_q[:, None])[:, None, :]
    J[:, :, o + 7:o + 11] = dr_db @ db_dlog
    J[~valid] = 0.0
    return r, J, valid


def handle_weights(dyn_mask, grid, weights=RegWeights()):
    """Per-handle smoothness weights ``lambda1 + lambda2 * dynamic fraction``.

    The dynamic fraction of a handle is its bilinear influence over masked
    pixels, normalized by its total influence (unless
    ``weights.normalize_dynamic_fraction`` is off, in which case the raw
    influence sum is used).
    """
    from .deformation import _axis_matrix

    m = np.asarray(dyn_mask, dtype=float)
    if m.shape != (grid.height, grid.width):
        raise ValueError("mask shape does not match the grid image")
    s = grid.spacing
    Bx = _axis_matrix(grid.width, grid.nx, s)
    By = _axis_matrix(grid.height, grid.ny, s)
    dyn = By.T @ m @ Bx
    if weights.normalize_dynamic_fraction:
        support = np.outer(By.sum(axis=0), Bx.sum(axis=0))
        frac = np.divide(dyn, support, out=np.zeros_like(dyn), where=support > 0)
    else:
        frac = dyn
    return weights.lambda1 + weights.lambda2 * frac


def neighbor_pairs(nx, ny):
    """Flat index pairs of horizontally and vertically adjacent handles."""
    ids = np.arange(nx * ny).reshape(ny, nx)
    h = np.stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()], axis=1)
    v = np.stack([ids[:-1, :].ravel(), ids[1:, :].ravel()], axis=1)
    return np.concatenate([h, v]).reshape(-1, 2)


def deform_residuals(handles, weights, nx, ny, lambda_deform=1.0, count_pairs_twice=False):
    """Smoothness residuals for ``(n_frames, G)`` handles.

    Returns ``(r, k, l, coef)``: residual ``r = coef * (s_k - s_l)`` per
    frame and neighbor pair, each array shaped ``(n_frames, n_pairs)``.
    """
    pairs = neighbor_pairs(nx, ny)
    handles = np.asarray(handles, dtype=float)
    weights = np.asarray(weights, dtype=float).reshape(handles.shape)
    k, l = pairs[:, 0], pairs[:, 1]
    mult = 2.0 if count_pairs_twice else 1.0
    coef = np.sqrt(mult * lambda_deform * np.maximum(weights[:, k], weights[:, l]))
    r = coef * (handles[:, k] - handles[:, l])
    return r, k, l, coef


def loss_deform(grids, weights, lambda_deform=1.0, count_pairs_twice=False):
    """Deformation smoothness loss and its gradient w.r.t. raw handles.

    ``grids`` is a sequence of :class:`DeformationGrid` sharing one shape and
    ``weights`` the matching sequence of per-handle weights.
    """
    if len(grids) == 0:
        return 0.0, []
    nx, ny = grids[0].shape
    H = np.stack([g.handles.ravel() for g in grids])
    Wt = np.stack([np.asarray(w, dtype=float).ravel() for w in weights])
    r, k, l, coef = deform_residuals(H, Wt, nx, ny, lambda_deform, count_pairs_twice)
    grad = np.zeros_like(H)
    g = 2.0 * r * coef
    for f in range(H.shape[0]):
        np.add.at(grad[f], k, g[f])
        np.add.at(grad[f], l, -g[f])
    return float(np.sum(r**2)), [gr.reshape(ny, nx) for gr in grad]


def loss_focal(focals, target):
    """Focal prior ``sum (u_i - target)^2`` and its gradient."""
    u = np.asarray(focals, dtype=float)
    d = u - target
    return float(d @ d), 2.0 * d
