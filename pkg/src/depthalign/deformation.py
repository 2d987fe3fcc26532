"""Bilinear-spline depth scale fields and their coarse-to-fine schedule.

Handles sit on a square lattice anchored at the top-left pixel center.  The
lattice spacing is set by the handle count along the long image side (the
long side is spanned exactly); the short side gets as many rows as needed to
cover it, so the last row may lie slightly outside the image.  Halving the
spacing therefore always produces a lattice that contains the previous one,
which makes subdivision exactly value preserving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_LONG_COUNTS = (1, 2, 3, 5, 9, 17)


def lattice_spacing(n_long, width, height):
    if n_long <= 1:
        return math.inf
    return max(max(width, height) - 1, 1) / (n_long - 1)


def short_count(n_long, width, height):
    """Handle count along the short side for a given long-side count."""
    if n_long <= 1:
        return 1
    spacing = lattice_spacing(n_long, width, height)
    intervals = math.ceil((min(width, height) - 1) / spacing - 1e-9)
    return max(intervals + 1, 2)


def grid_shape(n_long, width, height):
    """``(nx, ny)`` for a lattice with ``n_long`` handles on the long side."""
    n_short = short_count(n_long, width, height)
    if width >= height:
        return n_long, n_short
    return n_short, n_long


def grid_schedule(width, height, long_counts=DEFAULT_LONG_COUNTS):
    """Coarse-to-fine list of ``(nx, ny)`` grid resolutions.

    The default runs 1x1 and then doubles the number of lattice intervals
    along the long side until 17 handles are reached.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    long_counts = list(long_counts)
    if long_counts[0] != 1:
        raise ValueError("schedule must start at a 1x1 grid")
    for a, b in zip(long_counts[1:], long_counts[2:]):
        if b - 1 != 2 * (a - 1):
            raise ValueError(f"long-side counts {a} -> {b} do not halve the spacing")
    return [grid_shape(n, width, height) for n in long_counts]


def _axis_basis(coords, n, spacing):
    """Linear interpolation indices/weights along one lattice axis."""
    coords = np.asarray(coords, dtype=float)
    if n == 1:
        zeros = np.zeros(coords.shape, dtype=np.int64)
        return zeros, zeros, np.zeros(coords.shape)
    g = np.clip(coords / spacing, 0.0, n - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), n - 2)
    return i0, i0 + 1, g - i0


def _axis_matrix(n_pixels, n, spacing):
    """Dense ``(n_pixels, n)`` interpolation matrix for one axis."""
    i0, i1, f = _axis_basis(np.arange(n_pixels), n, spacing)
    B = np.zeros((n_pixels, n))
    rows = np.arange(n_pixels)
    np.add.at(B, (rows, i0), 1.0 - f)
    np.add.at(B, (rows, i1), f)
    return B


@dataclass(frozen=True)
class DeformationGrid:
    """Per-frame lattice of positive scale handles, stored ``(ny, nx)``."""

    handles: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        h = np.array(self.handles, dtype=float)
        if h.ndim != 2 or h.size == 0:
            raise ValueError("handles must be a non-empty 2D array")
        if not np.all(np.isfinite(h)) or np.any(h <= 0):
            raise ValueError("handles must be finite and positive")
        n_long = h.shape[1] if self.width >= self.height else h.shape[0]
        if (h.shape[1], h.shape[0]) != grid_shape(n_long, self.width, self.height):
            raise ValueError(f"grid shape {h.shape[::-1]} does not fit a "
                             f"{self.width}x{self.height} image")
        h.setflags(write=False)
        object.__setattr__(self, "handles", h)

    @classmethod
    def constant(cls, nx, ny, width, height, value=1.0):
        return cls(np.full((ny, nx), float(value)), width, height)

    @property
    def nx(self):
        return self.handles.shape[1]

    @property
    def ny(self):
        return self.handles.shape[0]

    @property
    def shape(self):
        return self.nx, self.ny

    @property
    def n_long(self):
        return self.nx if self.width >= self.height else self.ny

    @property
    def spacing(self):
        return lattice_spacing(self.n_long, self.width, self.height)

    def handle_positions(self):
        """Raster coordinates ``(ny, nx, 2)`` of all handles."""
        s = 0.0 if self.n_long == 1 else self.spacing
        xs = np.arange(self.nx) * s
        ys = np.arange(self.ny) * s
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X, Y], axis=-1)

    def basis(self, xy):
        """Flat handle indices and bilinear weights, each ``(N, 4)``."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        s = self.spacing
        x0, x1, fx = _axis_basis(xy[:, 0], self.nx, s)
        y0, y1, fy = _axis_basis(xy[:, 1], self.ny, s)
        idx = np.stack([y0 * self.nx + x0, y0 * self.nx + x1,
                        y1 * self.nx + x0, y1 * self.nx + x1], axis=1)
        w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy),
                      (1 - fx) * fy, fx * fy], axis=1)
        return idx, w

    def evaluate(self, xy):
        """Vectorized spline value at raster points ``(N, 2)``."""
        idx, w = self.basis(xy)
        return np.sum(self.handles.ravel()[idx] * w, axis=1)

    def field(self):
        """Spline value at every pixel, ``(height, width)``."""
        s = self.spacing
        Bx = _axis_matrix(self.width, self.nx, s)
        By = _axis_matrix(self.height, self.ny, s)
        return By @ self.handles @ Bx.T

    def with_handles(self, handles):
        return DeformationGrid(np.asarray(handles, dtype=float).reshape(self.ny, self.nx),
                               self.width, self.height)


def eval_spline(grid, p):
    """Spline value at a single raster point; outside points clamp to the border cell."""
    return float(grid.evaluate(np.asarray(p, dtype=float)[None])[0])


def subdivide(grid, next_shape, long_counts=DEFAULT_LONG_COUNTS):
    """Resample ``grid`` onto the next, finer lattice of the schedule."""
    schedule = grid_schedule(grid.width, grid.height, long_counts)
    next_shape = tuple(next_shape)
    try:
        level = schedule.index(grid.shape)
    except ValueError:
        raise ValueError(f"grid shape {grid.shape} is not on the schedule") from None
    if level + 1 >= len(schedule) or schedule[level + 1] != next_shape:
        raise ValueError(f"{next_shape} is not the successor of {grid.shape}")
    nx, ny = next_shape
    fine = DeformationGrid.constant(nx, ny, grid.width, grid.height)
    values = grid.evaluate(fine.handle_positions().reshape(-1, 2))
    return fine.with_handles(values)


def apply_deformation(depth, grid):
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (grid.height, grid.width):
        raise ValueError(f"depth shape {depth.shape} does not match grid image "
                         f"{grid.height}x{grid.width}")
    if grid.nx == 1 and grid.ny == 1:
        return depth * grid.handles[0, 0]
    return depth * grid.field()
