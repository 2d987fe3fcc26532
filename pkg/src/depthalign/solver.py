"""Joint pose / focal / deformation optimization (Levenberg-Marquardt)."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .deformation import DeformationGrid, grid_schedule, subdivide, DEFAULT_LONG_COUNTS
from .geometry import Intrinsics, Pose, orthonormalize, so3_exp
from .losses import (N_LOCAL, LossKind, RegWeights, ReproBatch, deform_residuals,
                     handle_weights, repro_residuals, kink_model_residual)
from .raster import sample_depth

try:  # optional CHOLMOD bindings; SuperLU is the fallback
    import sksparse.cholmod as _cholmod
except ImportError:  # pragma: no cover
    _cholmod = None

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass
class CameraParamBlock:
    """All optimization variables of a video.

    ``rotations``/``translations`` are camera-to-world, ``focals`` are in
    long-side half-widths and ``handles`` is ``(n_frames, ny, nx)`` of raw
    positive scale values.
    """

    rotations: np.ndarray
    translations: np.ndarray
    focals: np.ndarray
    handles: np.ndarray
    width: int
    height: int

    @property
    def n_frames(self):
        return len(self.focals)

    @property
    def grid_shape(self):
        return self.handles.shape[2], self.handles.shape[1]

    def pose(self, i):
        return Pose(self.rotations[i], self.translations[i])

    def poses(self):
        return [self.pose(i) for i in range(self.n_frames)]

    def intrinsics(self, i):
        return Intrinsics(float(self.focals[i]), self.width, self.height)

    def grid(self, i):
        return DeformationGrid(self.handles[i], self.width, self.height)

    def grids(self):
        return [self.grid(i) for i in range(self.n_frames)]

    def copy(self):
        return CameraParamBlock(self.rotations.copy(), self.translations.copy(),
                                self.focals.copy(), self.handles.copy(), self.width, self.height)

    def subdivided(self, next_shape, long_counts=DEFAULT_LONG_COUNTS):
        grids = [subdivide(g, next_shape, long_counts).handles for g in self.grids()]
        out = self.copy()
        out.handles = np.stack(grids)
        return out


@dataclass(frozen=True)
class SolveOptions:
    max_iterations: int = 200
    function_tolerance: float = 1e-8
    gradient_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-12
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    damping_max: float = 1e16
    linear_solver: str = "auto"        # auto | sparse | dense | cg
    dense_threshold: int = 1000
    loss_kind: LossKind = LossKind.SPATIAL_RATIO
    kink_eps: float = 1e-3
    ratio_secant: bool = False         # secant instead of tangent slope for the ratio residual
    huber_delta: float | None = None
    fix_scale_gauge: bool = True
    shared_focal: bool = False
    optimize_focal: bool = True
    edge_ratio: float | None = 1.1
    planar_tol: float | None = None
    threads: int = 1
    chunk_size: int = 2048
    seed: int = 0

    def __post_init__(self):
        for name in ("function_tolerance", "gradient_tolerance", "parameter_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.linear_solver not in ("auto", "sparse", "dense", "cg"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))


@dataclass
class LevelReport:
    grid_shape: tuple
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    n_residuals: int
    n_dropped: int
    wall_time: float
    cost_history: list = field(default_factory=list)

    @property
    def converged(self):
        return self.termination in ("function_tolerance", "gradient_tolerance",
                                    "parameter_tolerance")


@dataclass
class SolveReport:
    levels: list = field(default_factory=list)
    n_matches: int = 0
    n_rejected_matches: int = 0
    empty_pairs: list = field(default_factory=list)

    @property
    def initial_cost(self):
        return self.levels[0].initial_cost if self.levels else float("nan")

    @property
    def final_cost(self):
        return self.levels[-1].final_cost if self.levels else float("nan")

    @property
    def converged(self):
        return all(lv.converged for lv in self.levels)

    def as_dict(self):
        return {
            "n_matches": self.n_matches,
            "n_rejected_matches": self.n_rejected_matches,
            "empty_pairs": [list(p) for p in self.empty_pairs],
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "levels": [{
                "grid": list(lv.grid_shape),
                "iterations": lv.iterations,
                "initial_cost": lv.initial_cost,
                "final_cost": lv.final_cost,
                "termination": lv.termination,
                "residuals_used": lv.n_residuals - lv.n_dropped,
                "residuals_dropped_behind_camera": lv.n_dropped,
                "wall_time": lv.wall_time,
            } for lv in self.levels],
        }


def median_depth(depth):
    d = np.asarray(depth, dtype=float).ravel()
    d = d[np.isfinite(d) & (d > 0)]
    if d.size == 0:
        raise ValueError("depth map has no valid pixels")
    return float(np.median(d))


def init_params(depths, n_frames=None, focal=RegWeights().focal_prior, grid_shape=(1, 1)):
    """Identity poses, prior focals and constant grids at ``1 / median(depth_0)``."""
    if n_frames is None:
        n_frames = len(depths)
    H, W = np.asarray(depths[0]).shape
    scale = 1.0 / median_depth(depths[0])
    nx, ny = grid_shape
    return CameraParamBlock(
        rotations=np.repeat(np.eye(3)[None], n_frames, axis=0),
        translations=np.zeros((n_frames, 3)),
        focals=np.full(n_frames, float(focal)),
        handles=np.full((n_frames, ny, nx), scale),
        width=W, height=H,
    )


def local_update(pose, delta):
    """Retract a 6-vector ``(d_rotation, d_translation)`` onto a pose."""
    delta = np.asarray(delta, dtype=float)
    R = pose.rotation @ so3_exp(delta[:3])
    return Pose(orthonormalize(R), pose.translation + delta[3:6])


def prepare_matches(matches, depths, params, edge_ratio=1.1, planar_tol=None):
    """Sample input depths at match endpoints and build a :class:`ReproBatch`.

    Matches whose depth cannot be sampled (out of bounds, across depth
    discontinuities) are removed; returns ``(batch, n_rejected)``.
    """
    W, H = params.width, params.height
    n = len(matches)
    dp = np.empty(n)
    dq = np.empty(n)
    ok = np.ones(n, dtype=bool)
    for f in np.unique(np.concatenate([matches.frame_i, matches.frame_j])):
        d = np.asarray(depths[f], dtype=float)
        sel = matches.frame_i == f
        if sel.any():
            px = np.rint(matches.p[sel]).astype(np.int64)
            dp[sel] = d[px[:, 1], px[:, 0]]
        sel = matches.frame_j == f
        if sel.any():
            dq[sel], valid = sample_depth(d, matches.q[sel], edge_ratio, planar_tol)
            ok[sel] &= valid
    ok &= np.isfinite(dp) & (dp > 0) & np.isfinite(dq) & (dq > 0)
    K = Intrinsics(1.0, W, H)
    keep = np.nonzero(ok)[0]
    batch = ReproBatch(
        frame_i=matches.frame_i[keep].astype(np.int64),
        frame_j=matches.frame_j[keep].astype(np.int64),
        p=K.to_image(matches.p[keep]), q=K.to_image(matches.q[keep]),
        depth_p=dp[keep], depth_q=dq[keep],
        idx_p=np.zeros((len(keep), 4), np.int64), w_p=np.zeros((len(keep), 4)),
        idx_q=np.zeros((len(keep), 4), np.int64), w_q=np.zeros((len(keep), 4)),
    )
    batch.raster_p = matches.p[keep]
    batch.raster_q = matches.q[keep]
    return batch, int(n - len(keep))


def set_basis(batch, grid_shape, width, height):
    nx, ny = grid_shape
    g = DeformationGrid.constant(nx, ny, width, height)
    batch.idx_p, batch.w_p = g.basis(batch.raster_p)
    batch.idx_q, batch.w_q = g.basis(batch.raster_q)
    return batch


_TRI = np.triu_indices(2 * N_LOCAL)
_MASK_LIMIT = 64_000_000
_TRI_FLAT = _TRI[0] * (2 * N_LOCAL) + _TRI[1]


class Linearization:
    """Jacobian of one evaluation: dense per-match blocks plus sparse regularizer rows.

    Match blocks are ``(m, 3, 22)`` with global column indices ``(m, 22)``;
    frozen columns carry zeros.  ``cache`` holds scatter keys that depend
    only on the column indices and is shared across evaluations of a level.
    """

    def __init__(self, blocks, block_cols, r_repro, extra, r_extra, n_vars, cache=None):
        self.blocks = blocks
        self.block_cols = block_cols
        self.r_repro = r_repro
        self.extra = extra
        self.r_extra = r_extra
        self.n_vars = n_vars
        self.cache = cache if cache is not None else {}

    def gradient(self):
        """``J^T r``."""
        nv = self.n_vars
        g = self.extra.T @ self.r_extra
        row0 = 0
        for J, c in zip(self.blocks, self.block_cols):
            r = self.r_repro[row0:row0 + 3 * len(J)].reshape(-1, 3)
            g += np.bincount(c.ravel(), (J * r[:, :, None]).sum(axis=1).ravel(), minlength=nv)
            row0 += 3 * len(J)
        return g

    def _keys(self):
        """Flat upper-triangle positions of every block entry, and a doubling mask.

        Two distinct local columns mapped to one global variable land on the
        diagonal and must count twice (``H_ab + H_ba``).
        """
        if "keys" not in self.cache:
            nv = self.n_vars
            keys, twice = [], []
            for c in self.block_cols:
                ci, cj = c[:, _TRI[0]], c[:, _TRI[1]]
                keys.append(np.minimum(ci, cj) * nv + np.maximum(ci, cj))
                twice.append((ci == cj) & (_TRI[0] != _TRI[1]))
            self.cache["keys"] = keys
            self.cache["twice"] = twice
        return self.cache["keys"], self.cache["twice"]

    def _upper_values(self):
        for J, keys, twice in zip(self.blocks, *self._keys()):
            HB = np.take((J.transpose(0, 2, 1) @ J).reshape(len(J), -1), _TRI_FLAT, axis=1)
            if twice.any():
                HB[twice] *= 2.0
            yield keys, HB

    def hessian(self, dense):
        """Gauss-Newton matrix ``J^T J``, dense ndarray or CSR."""
        nv = self.n_vars
        E = (self.extra.T @ self.extra).tocsr()
        if "pattern" not in self.cache:
            chunks = self._keys()[0]
            if nv * nv <= _MASK_LIMIT:
                # lookup table over all nv^2 slots; much faster than sorting the keys
                mask = np.zeros(nv * nv, dtype=bool)
                for k in chunks:
                    mask[k.ravel()] = True
                pattern = np.flatnonzero(mask)
                slot = np.cumsum(mask, dtype=np.int32) - 1
                inverse = [slot[k.ravel()] for k in chunks]
            else:
                keys = np.concatenate([k.ravel() for k in chunks])
                pattern, flat = np.unique(keys, return_inverse=True)
                inverse = np.split(flat, np.cumsum([k.size for k in chunks])[:-1])
            self.cache["pattern"] = pattern
            self.cache["inverse"] = inverse
        pattern = self.cache["pattern"]
        data = np.zeros(len(pattern))
        for inv, (_, vals) in zip(self.cache["inverse"], self._upper_values()):
            data += np.bincount(inv, vals.ravel(), minlength=len(pattern))
        rows, cols = np.divmod(pattern, nv)
        indptr = np.searchsorted(rows, np.arange(nv + 1))
        U = sp.csr_matrix((data, cols, indptr), shape=(nv, nv))
        A = (U + U.T - sp.diags(U.diagonal()) + E).tocsr()
        return A.toarray() if dense else A

    def to_sparse(self):
        """Full stacked Jacobian as CSR (rows: matches then regularizers)."""
        nv = self.n_vars
        rows, cols, vals = [], [], []
        row0 = 0
        for J, c in zip(self.blocks, self.block_cols):
            m = len(J)
            rr = row0 + np.arange(3 * m).reshape(m, 3)
            rows.append(np.broadcast_to(rr[:, :, None], J.shape).ravel())
            cols.append(np.broadcast_to(c[:, None, :], J.shape).ravel())
            vals.append(J.ravel())
            row0 += 3 * m
        E = self.extra.tocoo()
        rows.append(E.row + row0)
        cols.append(E.col)
        vals.append(E.data)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(row0 + E.shape[0], nv))


class Problem:
    """Residual/Jacobian assembly for one grid level."""

    def __init__(self, batch, params, opts, reg, dyn_weights=None):
        self.batch = batch
        self.opts = opts
        self.reg = reg
        self.n = params.n_frames
        self.nx, self.ny = params.grid_shape
        self.G = self.nx * self.ny
        self.block = N_POSE_U + self.G
        if dyn_weights is None:
            dyn_weights = np.full((self.n, self.G), reg.lambda1)
        self.dyn_weights = np.asarray(dyn_weights, dtype=float).reshape(self.n, self.G)
        self._build_index(params)
        self._lin_cache = {}

    def _build_index(self, params):
        idx = np.full((self.n, self.block), -1, dtype=np.int64)
        free = np.ones((self.n, self.block), dtype=bool)
        free[0, :6] = False
        if not self.opts.optimize_focal:
            free[:, 6] = False
        if self.opts.fix_scale_gauge:
            free[0, N_POSE_U + self.frozen_handle()] = False
        counter = 0
        shared_u = None
        for f in range(self.n):
            for c in range(self.block):
                if not free[f, c]:
                    continue
                if c == 6 and self.opts.shared_focal:
                    if shared_u is None:
                        shared_u = counter
                        counter += 1
                    idx[f, c] = shared_u
                    continue
                idx[f, c] = counter
                counter += 1
        self.index = idx
        self.n_vars = counter

    def frozen_handle(self):
        """Handle of frame 0 closest to the image center."""
        nx, ny = self.nx, self.ny
        return (ny // 2) * nx + nx // 2

    # -- evaluation -----------------------------------------------------
    def _repro_chunk(self, state, sl, jac):
        b = self.batch.subset(sl)
        rot, trans, foc, logh = state
        r, J, valid = repro_residuals(b, rot, trans, foc, np.exp(logh), self.opts.loss_kind,
                                      self.opts.kink_eps, with_jacobian=jac,
                                      secant=self.opts.ratio_secant)
        model = r
        if jac and self.opts.loss_kind is LossKind.SPATIAL_RATIO:
            model = r.copy()
            model[:, 2] = kink_model_residual(r[:, 2], self.opts.kink_eps, self.opts.ratio_secant)
        return r, model, J, valid, b

    def evaluate(self, state, jac=True):
        """Returns ``(cost, r, lin, n_dropped)``; ``lin`` is a :class:`Linearization` or None."""
        rot, trans, foc, logh = state
        N = len(self.batch)
        cs = self.opts.chunk_size
        slices = [slice(s, min(s + cs, N)) for s in range(0, N, cs)]
        if self.opts.threads > 1 and len(slices) > 1:
            with ThreadPoolExecutor(self.opts.threads) as ex:
                parts = list(ex.map(lambda s: self._repro_chunk(state, s, jac), slices))
        else:
            parts = [self._repro_chunk(state, s, jac) for s in slices]

        res, model_res = [], []
        blocks, block_cols = [], []
        rows, cols, vals = [], [], []
        n_dropped = 0
        for r, rm, J, valid, b in parts:
            n_dropped += int(np.count_nonzero(~valid))
            if self.opts.huber_delta is not None:
                s = np.sqrt(np.sum(r**2, axis=1))
                w = np.sqrt(np.minimum(1.0, self.opts.huber_delta / np.maximum(s, 1e-300)))
                r = r * w[:, None]
                rm = rm * w[:, None]
                if J is not None:
                    J = J * w[:, None, None]
            res.append(r.ravel())
            model_res.append(rm.ravel())
            if jac:
                c = np.empty((len(b), 2 * N_LOCAL), dtype=np.int64)
                c[:, 0:7] = self.index[b.frame_i, 0:7]
                c[:, 7:11] = self.index[b.frame_i[:, None], N_POSE_U + b.idx_p]
                c[:, 11:18] = self.index[b.frame_j, 0:7]
                c[:, 18:22] = self.index[b.frame_j[:, None], N_POSE_U + b.idx_q]
                frozen = c < 0
                blocks.append(np.where(frozen[:, None, :], 0.0, J))
                block_cols.append(np.where(frozen, 0, c))
        n_repro = sum(len(x) for x in res)
        row0 = 0

        # deformation smoothness
        H = np.exp(logh).reshape(self.n, self.G)
        if self.G > 1:
            rd, k, l, coef = deform_residuals(H, self.dyn_weights, self.nx, self.ny,
                                              self.reg.lambda_deform, self.reg.count_pairs_twice)
            res.append(rd.ravel())
            if jac:
                npairs = len(k)
                rr = row0 + np.arange(self.n * npairs).reshape(self.n, npairs)
                ck = self.index[:, N_POSE_U + k]
                cl = self.index[:, N_POSE_U + l]
                vk = coef * H[:, k]
                vl = -coef * H[:, l]
                for cc, vv in ((ck, vk), (cl, vl)):
                    keep = cc >= 0
                    rows.append(rr[keep])
                    cols.append(cc[keep])
                    vals.append(vv[keep])
            row0 += rd.size

        # focal prior
        sq = np.sqrt(self.reg.lambda_focal)
        rf = sq * (foc - self.reg.focal_prior)
        res.append(rf)
        if jac:
            cf = self.index[:, 6]
            keep = cf >= 0
            rows.append(row0 + np.arange(self.n)[keep])
            cols.append(cf[keep])
            vals.append(np.full(np.count_nonzero(keep), sq))
        row0 += self.n

        r = np.concatenate(res)
        cost = float(r @ r)
        if not jac:
            return cost, r, None, n_dropped
        extra = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(row0, self.n_vars))
        # the linear model uses the model residuals; the cost above uses the loss itself
        lin = Linearization(blocks, block_cols, np.concatenate(model_res), extra, r[n_repro:],
                            self.n_vars, self._lin_cache)
        return cost, r, lin, n_dropped

    # -- state <-> parameters ------------------------------------------
    def state_of(self, params):
        return (params.rotations.copy(), params.translations.copy(), params.focals.copy(),
                np.log(params.handles.reshape(self.n, self.G)))

    def params_of(self, state, template):
        rot, trans, foc, logh = state
        return CameraParamBlock(rot.copy(), trans.copy(), foc.copy(),
                                np.exp(logh).reshape(self.n, self.ny, self.nx),
                                template.width, template.height)

    def retract(self, state, delta):
        rot, trans, foc, logh = state
        full = np.zeros((self.n, self.block))
        m = self.index >= 0
        full[m] = delta[self.index[m]]
        rot = rot.copy()
        for f in range(self.n):
            if np.any(full[f, :3]):
                rot[f] = orthonormalize(rot[f] @ so3_exp(full[f, :3]))
        # handles pinned against the boundary would otherwise underflow to zero
        logh = np.clip(logh + full[:, N_POSE_U:], -LOG_HANDLE_LIMIT, LOG_HANDLE_LIMIT)
        return rot, trans + full[:, 3:6], foc + full[:, 6], logh


N_POSE_U = 7
LOG_HANDLE_LIMIT = 30.0


def _solve_linear(A, g, opts):
    n = A.shape[0]
    method = opts.linear_solver
    if method == "auto":
        method = "dense" if n <= opts.dense_threshold else "sparse"
    if method == "dense":
        Ad = A.toarray() if sp.issparse(A) else A
        c = scipy.linalg.cho_factor(Ad, lower=False, check_finite=True)
        return scipy.linalg.cho_solve(c, -g)
    if method == "sparse":
        if _cholmod is not None:
            try:
                factor = _cholmod.cholesky(sp.csc_matrix(A), mode="simplicial")
            except _cholmod.CholmodNotPositiveDefiniteError as exc:
                raise np.linalg.LinAlgError(str(exc)) from None
            return factor(-g)
        lu = spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A",
                       options={"SymmetricMode": True})
        x = lu.solve(-g)
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError("sparse factorization produced non-finite values")
        return x
    A = sp.csr_matrix(A)
    d = A.diagonal()
    M = sp.diags(1.0 / np.where(d > 0, d, 1.0))
    x, info = spla.cg(A, -g, rtol=1e-12, maxiter=10 * n, M=M)
    if info != 0:
        raise np.linalg.LinAlgError(f"conjugate gradient did not converge (info={info})")
    return x


def _damped(A, mu, diag):
    if sp.issparse(A):
        return A + sp.diags(mu * diag)
    out = A.copy()
    out[np.diag_indices_from(out)] += mu * diag
    return out


def solve_level(batch, params, opts=SolveOptions(), reg=RegWeights(), dyn_weights=None):
    """Levenberg-Marquardt at the current grid resolution of ``params``."""
    if len(batch) == 0:
        raise SolverError("no matches to optimize (all pixels masked or invalid)")
    t0 = time.perf_counter()
    set_basis(batch, params.grid_shape, params.width, params.height)
    prob = Problem(batch, params, opts, reg, dyn_weights)
    state = prob.state_of(params)
    cost, r, lin, n_dropped = prob.evaluate(state)
    initial = cost
    history = [cost]
    mu = opts.damping_init
    termination = "max_iterations"
    it = 0
    x_norm = lambda s: np.sqrt(np.sum(s[1] ** 2) + np.sum(s[2] ** 2) + np.sum(s[3] ** 2))
    while it < opts.max_iterations:
        g = lin.gradient()
        if g.size == 0 or np.max(np.abs(g)) < opts.gradient_tolerance:
            termination = "gradient_tolerance"
            break
        dense = opts.linear_solver == "dense" or (opts.linear_solver == "auto"
                                                  and prob.n_vars <= opts.dense_threshold)
        A = lin.hessian(dense)
        diag = np.clip(A.diagonal(), 1e-6, 1e32)
        it += 1
        accepted = False
        while not accepted:
            try:
                delta = _solve_linear(_damped(A, mu, diag), g, opts)
            except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
                log.debug("factorization failed (%s); raising damping", exc)
                mu *= opts.damping_up
                if mu > opts.damping_max:
                    termination = "linear_solver_failure"
                    break
                continue
            if np.linalg.norm(delta) < opts.parameter_tolerance * (x_norm(state) + opts.parameter_tolerance):
                termination = "parameter_tolerance"
                break
            new_state = prob.retract(state, delta)
            if np.all(new_state[2] > 0):
                new_cost = prob.evaluate(new_state, jac=False)[0]
            else:
                new_cost = np.inf
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                rel = (cost - new_cost) / max(cost, 1e-300)
                state = new_state
                cost, r, lin, n_dropped = prob.evaluate(state)
                history.append(cost)
                mu = max(mu * opts.damping_down, 1e-16)
                if rel < opts.function_tolerance:
                    termination = "function_tolerance"
            else:
                mu *= opts.damping_up
                if mu > opts.damping_max:
                    termination = "damping_limit"
                    break
        if not accepted or termination == "function_tolerance":
            break
    out = prob.params_of(state, params)
    report = LevelReport(params.grid_shape, it, initial, cost, termination, len(batch),
                         n_dropped, time.perf_counter() - t0, history)
    log.info("level %dx%d: %d iterations, cost %.6g -> %.6g (%s)", *params.grid_shape, it,
             initial, cost, termination)
    return out, report


def level_weights(dyn_masks, params, reg):
    if dyn_masks is None:
        return None
    out = []
    for i in range(params.n_frames):
        m = dyn_masks[i]
        if m is None:
            m = np.zeros((params.height, params.width), dtype=bool)
        out.append(handle_weights(m, params.grid(i), reg).ravel())
    return np.stack(out)


def chain_init_poses(batch, params, iters=3):
    """Initialize poses and per-frame scales by chaining consecutive similarity fits.

    For each frame ``j > 0`` the matches ``j-1 <-> j`` are lifted with the
    current scales and focals and a robust closed-form similarity is fit;
    frame ``j`` inherits the composed pose and the relative scale.
    """
    from .evaluation import umeyama

    out = params.copy()
    set_basis(batch, (1, 1), params.width, params.height)
    for j in range(1, params.n_frames):
        i = j - 1
        fwd = (batch.frame_i == i) & (batch.frame_j == j)
        bwd = (batch.frame_i == j) & (batch.frame_j == i)
        if np.count_nonzero(fwd) + np.count_nonzero(bwd) < 3:
            out.rotations[j] = out.rotations[i]
            out.translations[j] = out.translations[i]
            out.handles[j] = out.handles[i]
            continue
        si, sj = out.handles[i].mean(), out.handles[j].mean()
        ui, uj = out.focals[i], out.focals[j]
        # points of frame i and their correspondents in frame j
        Pi = np.concatenate([_lift(batch.p[fwd], batch.depth_p[fwd] * si, ui),
                             _lift(batch.q[bwd], batch.depth_q[bwd] * si, ui)])
        Pj = np.concatenate([_lift(batch.q[fwd], batch.depth_q[fwd] * sj, uj),
                             _lift(batch.p[bwd], batch.depth_p[bwd] * sj, uj)])
        w = np.ones(len(Pi))
        for _ in range(iters):
            c, R, t = umeyama(Pj, Pi, weights=w)
            err = np.linalg.norm(c * Pj @ R.T + t - Pi, axis=1)
            scale = np.median(err) + 1e-12
            w = 1.0 / np.maximum(1.0, err / (2.0 * scale))
        rel = Pose(R, t)
        pose_j = out.pose(i).compose(rel)
        out.rotations[j] = pose_j.rotation
        out.translations[j] = pose_j.translation
        out.handles[j] = out.handles[j] * c
    return out


def _lift(xy, z, u):
    return np.concatenate([xy * (z / u)[:, None], z[:, None]], axis=1)


def coarse_to_fine_solve(matches, depths, opts=SolveOptions(), reg=RegWeights(), dyn_masks=None,
                         long_counts=DEFAULT_LONG_COUNTS, init="chain", params=None):
    """Run :func:`solve_level` over the grid schedule, subdividing between levels."""
    depths = [np.asarray(d, dtype=float) for d in depths]
    H, W = depths[0].shape
    if params is None:
        params = init_params(depths, len(depths), reg.focal_prior)
    report = SolveReport(n_matches=len(matches), empty_pairs=list(matches.empty_pairs))
    batch, rejected = prepare_matches(matches, depths, params, opts.edge_ratio, opts.planar_tol)
    report.n_rejected_matches = rejected
    if len(batch) == 0:
        raise SolverError("no usable matches after depth sampling")
    if init == "chain":
        params = chain_init_poses(batch, params)
    schedule = grid_schedule(W, H, long_counts)
    if params.grid_shape != schedule[0]:
        raise ValueError(f"initial grid {params.grid_shape} is not the schedule start")
    for level, shape in enumerate(schedule):
        if level > 0:
            params = params.subdivided(shape, long_counts)
        weights = level_weights(dyn_masks, params, reg)
        params, lrep = solve_level(batch, params, opts, reg, weights)
        report.levels.append(lrep)
    return params, report
