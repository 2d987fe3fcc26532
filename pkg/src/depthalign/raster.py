"""Sub-pixel sampling of rasters."""

import numpy as np


def pixel_grid(width, height):
    """Raster coordinates of every pixel center, ``(H*W, 2)`` in row-major order."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


def in_bounds(xy, width, height):
    xy = np.asarray(xy, dtype=float)
    return ((xy[..., 0] >= 0) & (xy[..., 0] <= width - 1)
            & (xy[..., 1] >= 0) & (xy[..., 1] <= height - 1))


def _corners(xy, width, height):
    x = np.clip(xy[:, 0], 0, width - 1)
    y = np.clip(xy[:, 1], 0, height - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return x0, x1, y0, y1, x - x0, y - y0


def bilinear(img, xy):
    """Bilinearly sample ``img`` (``(H, W)`` or ``(H, W, C)``) at raster points.

    Returns ``(values, valid)``; points outside ``[0, W-1] x [0, H-1]`` are
    flagged invalid and sampled at the clamped location.
    """
    img = np.asarray(img)
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    H, W = img.shape[:2]
    x0, x1, y0, y1, fx, fy = _corners(xy, W, H)
    if img.ndim == 3:
        fx = fx[:, None]
        fy = fy[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, in_bounds(xy, W, H)


def sample_depth(depth, xy, edge_ratio=None, planar_tol=None):
    """Sample a depth raster at sub-pixel points.

    Interpolation is bilinear in inverse depth, which is exact on planar
    surfaces.  With ``edge_ratio`` set, samples whose four support pixels
    span a depth ratio above it are flagged invalid (depth discontinuities).
    With ``planar_tol`` set, samples are also rejected unless inverse depth
    is affine (relative second differences below the tolerance) over the 4x4
    stencil around the support, i.e. unless the interpolation is exact.
    """
    depth = np.asarray(depth, dtype=float)
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    H, W = depth.shape
    inv_depth = 1.0 / depth
    inv, valid = bilinear(inv_depth, xy)
    x0, x1, y0, y1, _, _ = _corners(xy, W, H)
    if edge_ratio is not None:
        c = np.stack([depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]])
        valid &= c.max(axis=0) <= edge_ratio * c.min(axis=0)
    if planar_tol is not None:
        scale = np.abs(_stencil(inv_depth, x0, y0)).max(axis=(1, 2))
        valid &= _interior(x0, y0, W, H) & (curvature(inv_depth, x0, y0) <= planar_tol * scale)
    return 1.0 / inv, valid


def _stencil(img, x0, y0):
    """4x4 neighborhoods around the bilinear support cells, ``(N, 4, 4[, C])``."""
    H, W = img.shape[:2]
    xs = np.clip(x0[:, None] + np.arange(-1, 3), 0, W - 1)
    ys = np.clip(y0[:, None] + np.arange(-1, 3), 0, H - 1)
    return img[ys[:, :, None], xs[:, None, :]]


def _interior(x0, y0, width, height):
    return (x0 >= 1) & (x0 + 2 <= width - 1) & (y0 >= 1) & (y0 + 2 <= height - 1)


def curvature(img, x0, y0):
    """Largest absolute second difference (xx, yy, xy) over each 4x4 stencil.

    Zero exactly where the raster is affine around the support, which is
    where bilinear interpolation is exact.
    """
    p = _stencil(img, x0, y0)
    dxx = np.abs(p[:, :, :-2] - 2 * p[:, :, 1:-1] + p[:, :, 2:])
    dyy = np.abs(p[:, :-2, :] - 2 * p[:, 1:-1, :] + p[:, 2:, :])
    dxy = np.abs(p[:, :-1, :-1] - p[:, :-1, 1:] - p[:, 1:, :-1] + p[:, 1:, 1:])
    axes = tuple(range(1, p.ndim))
    return np.maximum(np.maximum(dxx.max(axis=axes), dyy.max(axis=axes)), dxy.max(axis=axes))


def smooth_support(img, xy, tol):
    """Points whose 4x4 neighborhood is affine to within ``tol`` (absolute units of ``img``)."""
    img = np.asarray(img, dtype=float)
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    H, W = img.shape[:2]
    x0, _, y0, _, _, _ = _corners(xy, W, H)
    return _interior(x0, y0, W, H) & (curvature(img, x0, y0) <= tol)


def nearest(img, xy):
    img = np.asarray(img)
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    H, W = img.shape[:2]
    x = np.clip(np.rint(xy[:, 0]).astype(np.int64), 0, W - 1)
    y = np.clip(np.rint(xy[:, 1]).astype(np.int64), 0, H - 1)
    return img[y, x]
