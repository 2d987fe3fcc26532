"""Synthetic static scenes with exact depth, flow and visibility.

Every scene lives inside an axis-aligned room (so every camera ray hits
something).  Camera axes follow the usual vision convention: x right, y down,
z forward; world "up" is ``-y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .deformation import DeformationGrid, grid_shape
from .geometry import Intrinsics, Pose, so3_exp
from .raster import in_bounds, pixel_grid

SCENE_KINDS = ("multi-plane", "heightfield", "point-cloud")
TRAJECTORY_KINDS = ("orbit", "arc", "forward", "handheld")

ROOM_LO = np.array([-8.0, -3.0, -8.0])
ROOM_HI = np.array([8.0, 2.0, 8.0])
CAMERA_HEIGHT = -0.5
UNKNOWN_FLOW = 1e10   # .flo convention: components above 1e9 are unknown


@dataclass(frozen=True)
class SceneSpec:
    scene: str = "multi-plane"
    n_primitives: int = 6
    extent: float = 2.0
    trajectory: str = "orbit"
    n_frames: int = 12
    radius: float = 4.5
    focal: float = 1.0 / np.tan(np.deg2rad(20.0))
    width: int = 160
    height: int = 96
    arc_degrees: float = 60.0
    jitter: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.scene not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.scene!r}")
        if self.trajectory not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.trajectory!r}")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if not self.extent > 0:
            raise ValueError("extent must be positive")


@dataclass(frozen=True)
class DynamicBox:
    """A box that translates by ``velocity`` world units per frame."""

    center: tuple = (0.0, 1.4, 0.0)
    size: tuple = (0.8, 1.2, 0.8)
    velocity: tuple = (0.15, 0.0, 0.0)

    def bounds(self, frame):
        c = np.asarray(self.center, float) + frame * np.asarray(self.velocity, float)
        h = np.asarray(self.size, float) / 2
        return c - h, c + h


@dataclass(frozen=True)
class CorruptionSpec:
    """Controlled depth corruption.

    The multiplicative field is the reciprocal of a random bilinear spline
    with ``field_long`` handles on the long side, bounded to
    ``[1 - amplitude, 1 + amplitude]``; its reciprocal is therefore exactly
    representable by any finer grid of the solver's schedule.
    """

    amplitude: float = 0.0
    field_long: int = 5
    noise_sigma: float = 0.0
    scale_drift: float = 0.0
    dynamic: DynamicBox | None = None

    def __post_init__(self):
        if not 0 <= self.amplitude < 1:
            raise ValueError("amplitude must lie in [0, 1)")
        if self.noise_sigma < 0 or self.scale_drift < 0:
            raise ValueError("noise and drift must be non-negative")


@dataclass
class GroundTruth:
    spec: SceneSpec
    poses: list
    focal: float
    boxes: list
    heightfield: tuple | None = None
    points: np.ndarray | None = None
    dynamic: DynamicBox | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def width(self):
        return self.spec.width

    @property
    def height(self):
        return self.spec.height

    @property
    def n_frames(self):
        return self.spec.n_frames

    def intrinsics(self):
        return Intrinsics(self.focal, self.width, self.height)


def look_at(center, target):
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, -1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), center)


def make_trajectory(spec, rng):
    n = spec.n_frames
    target = np.array([0.0, 0.6, 0.0])
    if spec.trajectory in ("orbit", "arc"):
        if spec.radius <= 0:
            raise ValueError("orbit radius must be positive (zero baseline)")
        if spec.trajectory == "orbit":
            angles = 2 * np.pi * np.arange(n) / n
        else:
            angles = np.deg2rad(spec.arc_degrees) * (np.arange(n) / (n - 1) - 0.5)
        return [look_at([spec.radius * np.sin(a), CAMERA_HEIGHT, -spec.radius * np.cos(a)], target)
                for a in angles]
    if spec.trajectory == "forward":
        R = look_at([0.0, 0.0, 0.0], [0.0, 0.25, 1.0]).rotation
        zs = np.linspace(-spec.radius, -spec.radius + 0.15 * (n - 1), n)
        return [Pose(R, [0.0, CAMERA_HEIGHT, z]) for z in zs]
    # handheld: smooth lateral sweep with seeded SE(3) shake
    poses = []
    s = np.linspace(0.0, 1.0, n)
    for k in range(n):
        c = np.array([1.5 * (s[k] - 0.5), CAMERA_HEIGHT + 0.2 * np.sin(np.pi * s[k]),
                      -spec.radius + 0.5 * s[k]])
        base = look_at(c, target)
        dw = rng.normal(scale=spec.jitter, size=3)
        dt = rng.normal(scale=spec.jitter, size=3)
        poses.append(Pose(base.rotation @ so3_exp(dw), c + dt))
    return poses


def gen_scene(spec, dynamic=None):
    """Ground-truth bundle for ``spec``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    poses = make_trajectory(spec, rng)
    boxes = [(ROOM_LO.copy(), ROOM_HI.copy(), True)]
    heightfield = None
    points = None
    e = spec.extent
    if spec.scene == "multi-plane":
        for _ in range(spec.n_primitives):
            c = rng.uniform([-e, 0, -e], [e, 0, e])
            size = rng.uniform([0.4, 0.5, 0.4], [1.2, 2.5, 1.2])
            lo = np.array([c[0] - size[0] / 2, ROOM_HI[1] - size[1], c[2] - size[2] / 2])
            hi = np.array([c[0] + size[0] / 2, ROOM_HI[1], c[2] + size[2] / 2])
            boxes.append((lo, hi, False))
    elif spec.scene == "heightfield":
        n = max(spec.n_primitives, 1)
        amps = rng.uniform(0.1, 0.35, n) / np.sqrt(n)
        freqs = rng.uniform(0.3, 1.2, (n, 2))
        phases = rng.uniform(0, 2 * np.pi, n)
        heightfield = (amps, freqs, phases)
    else:
        n = max(spec.n_primitives, 1) * 400
        pts = rng.uniform([-e, ROOM_HI[1] - 2.5, -e], [e, ROOM_HI[1] - 0.2, e], (n, 3))
        points = pts
    gt = GroundTruth(spec, poses, spec.focal, boxes, heightfield, points, dynamic)
    for k, pose in enumerate(poses):
        if render_depth(gt, k)[1].mean() < 0.5:
            raise ValueError(f"frame {k} sees less than half of the scene surface")
    return gt


def _heights(hf, x, z):
    amps, freqs, phases = hf
    h = np.full(np.shape(x), ROOM_HI[1] - 0.4)
    for a, (fx, fz), ph in zip(amps, freqs, phases):
        h = h + a * np.sin(fx * x + ph) * np.cos(fz * z + 0.5 * ph)
    return h


def _ray_box(o, d, lo, hi, interior):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    if interior:
        return np.where(tmax > 1e-9, tmax, np.inf)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(hit, tmin, np.inf)


def _ray_heightfield(o, d, t_far, hf, steps=64, iters=50):
    f = lambda t: o[:, 1] + t * d[:, 1] - _heights(hf, o[:, 0] + t * d[:, 0], o[:, 2] + t * d[:, 2])
    ts = np.linspace(0.0, 1.0, steps + 1)[:, None] * np.minimum(t_far, 50.0)[None, :]
    vals = np.stack([f(t) for t in ts])
    crossed = vals >= 0
    first = np.argmax(crossed, axis=0)
    hit = crossed.any(axis=0) & (first > 0)
    idx = np.arange(len(o))
    lo = ts[np.maximum(first - 1, 0), idx]
    hi = ts[first, idx]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = f(mid) >= 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return np.where(hit, 0.5 * (lo + hi), np.inf)


def _rays(gt, frame, raster_xy):
    K = gt.intrinsics()
    img = K.to_image(raster_xy)
    dirs_cam = np.concatenate([img / gt.focal, np.ones((len(img), 1))], axis=1)
    pose = gt.poses[frame]
    return np.broadcast_to(pose.translation, dirs_cam.shape).copy(), dirs_cam @ pose.rotation.T


def cast(gt, frame, raster_xy):
    """Exact z-depth and surface id along rays through raster points.

    Surface ids: 0 room, 1.. static boxes, -1 heightfield, -2 dynamic box.
    """
    o, d = _rays(gt, frame, np.atleast_2d(raster_xy))
    best = np.full(len(o), np.inf)
    ids = np.zeros(len(o), dtype=np.int64)
    for k, (lo, hi, interior) in enumerate(gt.boxes):
        t = _ray_box(o, d, lo, hi, interior)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = k
    if gt.heightfield is not None:
        t = _ray_heightfield(o, d, best, gt.heightfield)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = -1
    if gt.dynamic is not None:
        lo, hi = gt.dynamic.bounds(frame)
        t = _ray_box(o, d, lo, hi, False)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = -2
    return best, ids


def _splat(gt, frame, base_depth):
    """Z-buffered nearest-pixel splats of the point cloud over a base raster."""
    pose = gt.poses[frame]
    K = gt.intrinsics()
    X = (gt.points - pose.translation) @ pose.rotation
    front = X[:, 2] > 1e-6
    X = X[front]
    raster = K.to_raster(gt.focal * X[:, :2] / X[:, 2:3])
    px = np.rint(raster).astype(np.int64)
    inside = in_bounds(px, gt.width, gt.height)
    px, z = px[inside], X[inside, 2]
    depth = base_depth.copy()
    flat = depth.ravel()
    lin = px[:, 1] * gt.width + px[:, 0]
    zbuf = np.full(flat.shape, np.inf)
    np.minimum.at(zbuf, lin, z)
    hit = zbuf < flat
    flat[hit] = zbuf[hit]
    return flat.reshape(depth.shape), hit.reshape(depth.shape)


def render_depth(gt, frame):
    """Exact depth raster of ``frame`` and the fraction-of-surface coverage mask."""
    key = ("depth", frame)
    if key not in gt._cache:
        z, ids = cast(gt, frame, pixel_grid(gt.width, gt.height))
        depth = z.reshape(gt.height, gt.width)
        ids = ids.reshape(gt.height, gt.width)
        if gt.points is not None:
            depth, splat = _splat(gt, frame, depth)
            ids = np.where(splat, -3, ids)
        gt._cache[key] = (depth, np.isfinite(depth), ids)
    depth, finite, _ = gt._cache[key]
    return depth, finite


def surface_ids(gt, frame):
    render_depth(gt, frame)
    return gt._cache[("depth", frame)][2]


def dynamic_mask(gt, frame):
    return surface_ids(gt, frame) == -2


def world_points(gt, frame):
    """World-space surface point seen by every pixel of ``frame``, ``(H*W, 3)``."""
    depth, _ = render_depth(gt, frame)
    K = gt.intrinsics()
    img = K.to_image(pixel_grid(gt.width, gt.height))
    z = depth.ravel()
    X = np.concatenate([img * (z / gt.focal)[:, None], z[:, None]], axis=1)
    return gt.poses[frame].transform(X)


def render_flow(gt, i, j, vis_tol=1e-6):
    """Exact flow ``i -> j`` and the visibility of each frame-i pixel in frame j.

    Pixels whose surface point lies behind camera j get ``UNKNOWN_FLOW``.
    """
    W, H = gt.width, gt.height
    P = world_points(gt, i)
    if gt.dynamic is not None:
        moving = dynamic_mask(gt, i).ravel()
        P = P + moving[:, None] * (j - i) * np.asarray(gt.dynamic.velocity, float)
    pose_j = gt.poses[j]
    Xj = (P - pose_j.translation) @ pose_j.rotation
    K = gt.intrinsics()
    front = Xj[:, 2] > 1e-9
    zsafe = np.where(front, Xj[:, 2], 1.0)
    q = K.to_raster(gt.focal * Xj[:, :2] / zsafe[:, None])
    p = pixel_grid(W, H)
    flow = q - p
    visible = front & in_bounds(q, W, H)
    if gt.points is None:
        zq, _ = cast(gt, j, np.where(visible[:, None], q, 0.0))
        visible &= np.abs(zq - Xj[:, 2]) <= vis_tol * Xj[:, 2]
    else:
        from .raster import nearest
        depth_j, _ = render_depth(gt, j)
        zq = nearest(depth_j, q)
        visible &= np.abs(zq - Xj[:, 2]) <= 0.01 * Xj[:, 2]
    flow[~front] = UNKNOWN_FLOW
    return flow.reshape(H, W, 2), visible.reshape(H, W)


def corruption_field(spec, width, height, rng):
    """Multiplicative field ``1 / spline`` and the spline's grid."""
    nx, ny = grid_shape(spec.field_long, width, height)
    a = spec.amplitude
    handles = rng.uniform(1.0 / (1.0 + a), 1.0 / (1.0 - a), size=(ny, nx)) if a > 0 \
        else np.ones((ny, nx))
    grid = DeformationGrid(handles, width, height)
    return 1.0 / grid.field(), grid


def corrupt_depth(depth, spec, seed=0, frame=0):
    """Apply ``depth * field * drift * (1 + noise)``.

    Returns ``(corrupted, field)`` where ``field`` includes the per-frame
    drift factor but not the pixel noise.
    """
    depth = np.asarray(depth, dtype=float)
    rng = np.random.default_rng([seed, frame])
    H, W = depth.shape
    if spec.amplitude > 0:
        fld, _ = corruption_field(spec, W, H, rng)
    else:
        fld = np.ones_like(depth)
    if spec.scale_drift > 0:
        fld = fld * np.exp(rng.normal(scale=spec.scale_drift))
    noise = 1.0 + spec.noise_sigma * rng.standard_normal(depth.shape) if spec.noise_sigma > 0 \
        else 1.0
    out = depth * fld * noise
    if not np.all(out > 0):
        raise ValueError("corruption produced non-positive depth")
    return out, fld


def with_dynamic(gt, dynamic):
    return replace(gt, dynamic=dynamic, _cache={})
