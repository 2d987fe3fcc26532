"""Edge-preserving spatio-temporal depth filter along flow trajectories."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .correspondence import chain_flow
from .geometry import lift_points, reproject_points
from .losses import ratio
from .raster import in_bounds, nearest, pixel_grid, sample_depth

log = logging.getLogger(__name__)

EDGE_RATIO = 1.1


@dataclass(frozen=True)
class FilterConfig:
    tau: int = 4            # temporal radius in frames
    radius: int = 1         # spatial half-window; 1 gives 3x3
    lambda_f: float = 3.0
    normalize: bool = True  # unnormalized sums kept only for auditing

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if not self.lambda_f >= 0:
            raise ValueError(f"lambda_f must be >= 0, got {self.lambda_f}")


def filter_weight(z_p, z_q, lambda_f=3.0):
    """``exp(-lambda_f * ratio)`` between a pixel depth and a reprojected sample depth.

    Non-positive depths (behind the camera) get weight 0.
    """
    z_p = np.asarray(z_p, dtype=float)
    z_q = np.asarray(z_q, dtype=float)
    ok = (z_p > 0) & (z_q > 0)
    r = ratio(np.where(ok, z_p, 1.0), np.where(ok, z_q, 1.0))
    w = np.where(ok, np.exp(-lambda_f * r), 0.0)
    return w if w.ndim else float(w)


def reprojected_samples(i, j, depths, params, flows, masks=None, edge_ratio=EDGE_RATIO):
    """Depth of frame j seen along the chained flow of every frame-i pixel, in frame i's camera.

    Returns ``(z, valid)`` rasters of frame i's shape.  For ``j == i`` this is
    the frame's own depth.  Samples whose bilinear support spans a depth
    ratio above ``edge_ratio`` use the nearest pixel's depth.
    """
    d_i = np.asarray(depths[i], dtype=float)
    H, W = d_i.shape
    if j == i:
        ok = np.isfinite(d_i) & (d_i > 0)
        return np.where(ok, d_i, 0.0), ok
    flow, valid = chain_flow(flows, i, j, masks)
    x = pixel_grid(W, H) + flow.reshape(-1, 2)
    z_j, smooth = sample_depth(depths[j], x, edge_ratio=edge_ratio)
    # across depth edges interpolation invents depths; take the nearest pixel instead
    z_j = np.where(smooth, z_j, nearest(depths[j], x))
    inside = in_bounds(x, W, H)
    valid = valid.ravel() & inside & np.isfinite(z_j) & (z_j > 0)
    K_j = params.intrinsics(j)
    c_j = lift_points(K_j.to_image(x), np.where(valid, z_j, 1.0))
    c_i = reproject_points(c_j, params.pose(j), params.pose(i), params.focals[j], params.focals[i])
    z = c_i[:, 2]
    valid &= z > 0
    return np.where(valid, z, 0.0).reshape(H, W), valid.reshape(H, W)


def _shift(a, dy, dx, fill):
    """``out[y, x] = a[y + dy, x + dx]`` with ``fill`` outside."""
    H, W = a.shape
    out = np.full_like(a, fill)
    ys, yd = (slice(dy, H), slice(0, H - dy)) if dy >= 0 else (slice(0, H + dy), slice(-dy, H))
    xs, xd = (slice(dx, W), slice(0, W - dx)) if dx >= 0 else (slice(0, W + dx), slice(-dx, W))
    out[yd, xd] = a[ys, xs]
    return out


def filter_depth(i, depths, params, flows, cfg=FilterConfig(), masks=None):
    """Filtered depth of frame ``i``.

    ``depths`` are deformation-applied depths, ``flows`` maps consecutive
    directed pairs to flows (chained for longer gaps) and ``masks``
    optionally maps the same pairs to consistency masks.  Every sample from
    frames ``i - tau .. i + tau`` within the spatial window is weighted by
    :func:`filter_weight` against the pixel's own depth; weights are
    normalized over valid samples.  Returns ``(depth, n_fallback)`` where
    ``n_fallback`` counts pixels without valid samples (copied from input).
    """
    n = len(depths)
    d_i = np.asarray(depths[i], dtype=float)
    own_ok = np.isfinite(d_i) & (d_i > 0)
    num = np.zeros_like(d_i)
    den = np.zeros_like(d_i)
    for j in range(max(0, i - cfg.tau), min(n, i + cfg.tau + 1)):
        z, valid = reprojected_samples(i, j, depths, params, flows, masks)
        for dy in range(-cfg.radius, cfg.radius + 1):
            for dx in range(-cfg.radius, cfg.radius + 1):
                zs = _shift(z, dy, dx, 0.0)
                vs = _shift(valid, dy, dx, False) & own_ok
                w = np.where(vs, filter_weight(np.where(own_ok, d_i, 1.0), np.where(vs, zs, 1.0),
                                               cfg.lambda_f), 0.0)
                num += w * zs
                den += w
    has = den > 0
    if cfg.normalize:
        out = np.where(has, num / np.where(has, den, 1.0), d_i)
    else:
        out = np.where(has, num, d_i)
    n_fallback = int(np.count_nonzero(~has))
    if n_fallback:
        log.info("frame %d: %d pixels without valid filter samples", i, n_fallback)
    return out, n_fallback


def filter_video(depths, params, flows, cfg=FilterConfig(), masks=None, threads=1):
    """Filter every frame; returns ``(depths, fallback counts)``."""
    frames = range(len(depths))
    run = lambda i: filter_depth(i, depths, params, flows, cfg, masks)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, frames))
    else:
        results = [run(i) for i in frames]
    return [r[0] for r in results], [r[1] for r in results]
