"""Pinhole camera model, SO(3) helpers, lifting and cross-frame reprojection.

Coordinates
-----------
Raster pixels have their centers at integer coordinates with the origin at
the center of the top-left pixel.  The principal point is the image center
``((W-1)/2, (H-1)/2)``.  All camera math happens in *image coordinates*: the
raster coordinate minus the principal point, divided by half the long image
side.  In these units the intrinsic matrix is ``diag(u, u, 1)`` and ``u`` is
the focal length measured in long-side half-widths, so ``u = 1/tan(fov/2)``.

A camera point ``c`` lives in a frame's intrinsics-applied camera space:
``c = K X`` where ``X`` is the metric point in camera coordinates.  Poses are
camera-to-world: ``world = R X + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidInput(ValueError):
    pass


class BehindCamera(ValueError):
    pass


def hat(w):
    """Skew-symmetric matrix with ``hat(w) @ v == cross(w, v)``."""
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def hat_batch(w):
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w):
    """Rodrigues' formula, with the series expansion below 1e-8 rad."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_log(R):
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(max(M[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, v) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * v


def rotation_angle(R):
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.linalg.norm(so3_log(R)))


def orthonormalize(R):
    """Nearest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def quat_from_matrix(R):
    """Unit quaternion ``(x, y, z, w)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
                      0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    return q if q[3] >= 0 else -q


def matrix_from_quat(q):
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self * other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def transform(self, X):
        return np.asarray(X, dtype=float) @ self.rotation.T + self.translation

    @property
    def center(self):
        return self.translation


@dataclass(frozen=True)
class Intrinsics:
    """Square-pixel pinhole intrinsics with a fixed, centered principal point.

    ``focal`` is in units of half the long image side.
    """

    focal: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise InvalidInput(f"focal must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInput("image dimensions must be positive")

    @property
    def principal_point(self):
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    @property
    def half_extent(self):
        return max(self.width, self.height) / 2.0

    @property
    def focal_pixels(self):
        return self.focal * self.half_extent

    def matrix(self):
        return np.diag([self.focal, self.focal, 1.0])

    def to_image(self, raster_xy):
        """Raster pixel coordinates to image coordinates."""
        return (np.asarray(raster_xy, dtype=float) - self.principal_point) / self.half_extent

    def to_raster(self, image_xy):
        return np.asarray(image_xy, dtype=float) * self.half_extent + self.principal_point

    def with_focal(self, focal):
        return Intrinsics(focal, self.width, self.height)


def image_to_raster(image_xy, width, height):
    return Intrinsics(1.0, width, height).to_raster(image_xy)


def raster_to_image(raster_xy, width, height):
    return Intrinsics(1.0, width, height).to_image(raster_xy)


def lift(p, depth, scale=1.0):
    """Lift image point ``p`` to ``scale * depth * [p_x, p_y, 1]``."""
    if not (depth > 0 and scale > 0):
        raise InvalidInput(f"depth and scale must be positive (depth={depth}, scale={scale})")
    p = np.asarray(p, dtype=float)
    return scale * depth * np.array([p[0], p[1], 1.0])


def lift_points(p, depth, scale=1.0):
    """Vectorized :func:`lift` for ``(N, 2)`` points; no validation."""
    p = np.asarray(p, dtype=float)
    z = np.asarray(scale, dtype=float) * np.asarray(depth, dtype=float)
    return np.concatenate([p * z[..., None], z[..., None]], axis=-1)


def reproject(c, pose_i, pose_j, K_i, K_j):
    """Map camera point ``c`` of frame i into frame j's camera space.

    Evaluates ``K_j R_j^T (R_i K_i^-1 c + t_i - t_j)``.  Raises
    :class:`BehindCamera` when the result has non-positive depth.
    """
    c = np.asarray(c, dtype=float)
    if not c[2] > 0:
        raise InvalidInput("reprojected point must have positive depth")
    out = reproject_points(c[None], pose_i, pose_j, _focal(K_i), _focal(K_j))[0]
    if not out[2] > 0:
        raise BehindCamera(f"point lands behind camera j (z={out[2]:.6g})")
    return out


def reproject_points(c, pose_i, pose_j, focal_i, focal_j):
    """Vectorized reprojection of ``(N, 3)`` camera points; no z checks."""
    c = np.asarray(c, dtype=float)
    X = c / np.array([focal_i, focal_i, 1.0])
    world = X @ pose_i.rotation.T + pose_i.translation
    Xj = (world - pose_j.translation) @ pose_j.rotation
    return Xj * np.array([focal_j, focal_j, 1.0])


def to_pixel(c):
    """Perspective divide ``(c_x / c_z, c_y / c_z)``."""
    c = np.asarray(c, dtype=float)
    if not c[2] > 0:
        raise BehindCamera(f"cannot project point with z={c[2]:.6g}")
    return c[:2] / c[2]


def _focal(K):
    if isinstance(K, Intrinsics):
        return K.focal
    K = np.asarray(K, dtype=float)
    if K.ndim == 2:
        return float(K[0, 0])
    return float(K)
