"""File formats and project layout.

Depth maps are PFM (single channel), flows are Middlebury ``.flo``, masks are
binary PGM (P5) and trajectories are TUM-style text.  Every writer/reader
pair round-trips bit for bit on valid data.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import matrix_from_quat, quat_from_matrix

FLO_MAGIC = 202021.25


class FormatError(ValueError):
    """A file does not follow its format or holds invalid values."""


# -- PFM depth ----------------------------------------------------------------

def write_depth(path, depth):
    """Write a single-channel little-endian PFM (rows stored bottom-up)."""
    d = np.asarray(depth, dtype=np.float32)
    if d.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {d.shape}")
    H, W = d.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(d[::-1]).astype("<f4").tobytes())


def _read_tokens(f, count):
    """Read ``count`` whitespace-separated header tokens (``#`` comments allowed)."""
    tokens = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise FormatError("truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    if len(tokens) != count:
        raise FormatError("malformed header")
    return [t.decode("ascii", "replace") for t in tokens]


def read_depth(path):
    """Read a single-channel PFM; the scale sign selects byte order."""
    with open(path, "rb") as f:
        magic, w, h, scale = _read_tokens(f, 4)
        if magic != "Pf":
            raise FormatError(f"{path}: not a single-channel PFM (magic {magic!r})")
        try:
            W, H, scale = int(w), int(h), float(scale)
        except ValueError:
            raise FormatError(f"{path}: malformed PFM header") from None
        if W <= 0 or H <= 0 or scale == 0 or not np.isfinite(scale):
            raise FormatError(f"{path}: invalid PFM dimensions or scale")
        raw = f.read()
    if len(raw) != 4 * W * H:
        raise FormatError(f"{path}: expected {4 * W * H} data bytes, found {len(raw)}")
    dtype = "<f4" if scale < 0 else ">f4"
    d = np.frombuffer(raw, dtype=dtype).reshape(H, W)[::-1].astype(np.float32)
    bad = ~np.isfinite(d) | (d < 0)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise FormatError(f"{path}: invalid depth {d[y, x]} at pixel (x={x}, y={y})")
    return d


# -- Middlebury flow ----------------------------------------------------------

def write_flow(path, flow):
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got shape {flow.shape}")
    H, W = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(np.array([FLO_MAGIC], "<f4").tobytes())
        f.write(np.array([W, H], "<i4").tobytes())
        f.write(np.ascontiguousarray(flow).astype("<f4").tobytes())


def read_flow(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or np.frombuffer(raw[:4], "<f4")[0] != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: not a flow file (bad magic)")
    W, H = (int(v) for v in np.frombuffer(raw[4:12], "<i4"))
    if W <= 0 or H <= 0:
        raise FormatError(f"{path}: invalid flow dimensions {W}x{H}")
    n = 8 * W * H
    if len(raw) - 12 != n:
        raise FormatError(f"{path}: expected {n} data bytes, found {len(raw) - 12}")
    return np.frombuffer(raw[12:], "<f4").reshape(H, W, 2).astype(np.float32)


# -- binary PGM masks ---------------------------------------------------------

def write_mask(path, mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    H, W = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(np.where(m.astype(bool), 255, 0).astype(np.uint8).tobytes())


def read_mask(path):
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_tokens(f, 4)
        if magic != "P5":
            raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
        try:
            W, H, maxval = int(w), int(h), int(maxval)
        except ValueError:
            raise FormatError(f"{path}: malformed PGM header") from None
        if maxval != 255 or W <= 0 or H <= 0:
            raise FormatError(f"{path}: expected 8-bit PGM with maxval 255")
        raw = f.read()
    if len(raw) != W * H:
        raise FormatError(f"{path}: expected {W * H} data bytes, found {len(raw)}")
    m = np.frombuffer(raw, np.uint8).reshape(H, W)
    bad = (m != 0) & (m != 255)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise FormatError(f"{path}: mask value {m[y, x]} at (x={x}, y={y}); only 0 and 255 allowed")
    return m == 255


# -- text formats -------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def write_trajectory(path, poses):
    """TUM-style lines ``frame tx ty tz qx qy qz qw`` (camera-to-world)."""
    lines = ["# frame tx ty tz qx qy qz qw"]
    for i, p in enumerate(poses):
        q = quat_from_matrix(p.rotation)
        lines.append(" ".join([str(i)] + [_fmt(v) for v in (*p.translation, *q)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path):
    """Returns a list of :class:`Pose` ordered by frame index."""
    from .geometry import Pose
    rows = {}
    for k, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{k}: expected 8 fields, found {len(parts)}")
        try:
            i = int(parts[0])
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            raise FormatError(f"{path}:{k}: non-numeric field") from None
        q = np.array(vals[3:])
        if not np.isclose(np.linalg.norm(q), 1.0, atol=1e-6):
            raise FormatError(f"{path}:{k}: quaternion is not unit length")
        rows[i] = Pose(matrix_from_quat(q), np.array(vals[:3]))
    if sorted(rows) != list(range(len(rows))):
        raise FormatError(f"{path}: frame indices are not 0..n-1")
    return [rows[i] for i in range(len(rows))]


def write_focals(path, focals):
    lines = ["# frame focal"] + [f"{i} {_fmt(u)}" for i, u in enumerate(focals)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_focals(path):
    vals = []
    for k, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or int(parts[0]) != len(vals):
            raise FormatError(f"{path}:{k}: expected 'frame focal' in frame order")
        vals.append(float(parts[1]))
    return np.array(vals)


def write_grid(path, handles, width, height):
    """Header ``width height nx ny`` then one line per handle row."""
    h = np.asarray(handles, dtype=float)
    ny, nx = h.shape
    lines = [f"{width} {height} {nx} {ny}"] + [" ".join(_fmt(v) for v in row) for row in h]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path):
    """Returns ``(handles, width, height)``."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        width, height, nx, ny = (int(v) for v in lines[0].split())
        h = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed grid file") from None
    if h.shape != (ny, nx):
        raise FormatError(f"{path}: expected {ny}x{nx} handles, found {h.shape}")
    return h, width, height


def write_floats(path, values):
    """Flat little-endian float32 array (no header), e.g. sorted error curves."""
    Path(path).write_bytes(np.asarray(values, dtype="<f4").tobytes())


def read_floats(path):
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 4")
    return np.frombuffer(raw, "<f4").astype(np.float32)


def write_json(path, obj):
    """Deterministic JSON (sorted keys, fixed indentation)."""
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


# -- project layout -----------------------------------------------------------

_FRAME_RE = re.compile(r"^(\d{6})\.(pfm|pgm|txt)$")
_PAIR_RE = re.compile(r"^(\d+)_(\d+)\.(flo|pgm)$")


@dataclass(frozen=True)
class ProjectLayout:
    """Directory layout of a pipeline project.

    ``depth/000000.pfm`` input depth, ``flow/{i}_{j}.flo`` flows,
    ``masks/000000.pgm`` dynamic masks, ``masks/fb/{i}_{j}.pgm`` flow
    consistency masks, ``out/`` results, ``gt/`` optional ground truth and
    ``config.txt`` at the root.
    """

    root: Path

    def __init__(self, root):
        object.__setattr__(self, "root", Path(root))

    depth_dir = property(lambda self: self.root / "depth")
    flow_dir = property(lambda self: self.root / "flow")
    mask_dir = property(lambda self: self.root / "masks")
    fb_dir = property(lambda self: self.root / "masks" / "fb")
    out_dir = property(lambda self: self.root / "out")
    gt_dir = property(lambda self: self.root / "gt")
    config_path = property(lambda self: self.root / "config.txt")

    @staticmethod
    def frame_name(i, ext):
        return f"{i:06d}.{ext}"

    def depth_path(self, i):
        return self.depth_dir / self.frame_name(i, "pfm")

    def flow_path(self, i, j):
        return self.flow_dir / f"{i}_{j}.flo"

    def fb_path(self, i, j):
        return self.fb_dir / f"{i}_{j}.pgm"

    def dyn_path(self, i):
        return self.mask_dir / self.frame_name(i, "pgm")

    def frames(self, directory=None, ext="pfm"):
        directory = Path(directory) if directory is not None else self.depth_dir
        if not directory.is_dir():
            return []
        idx = sorted(int(m.group(1)) for m in map(_FRAME_RE.match, os.listdir(directory))
                     if m and m.group(2) == ext)
        if idx != list(range(len(idx))):
            raise FormatError(f"{directory}: frame files are not numbered 0..n-1")
        return idx

    def pairs(self, directory=None, ext="flo"):
        directory = Path(directory) if directory is not None else self.flow_dir
        if not directory.is_dir():
            return []
        return sorted((int(m.group(1)), int(m.group(2)))
                      for m in map(_PAIR_RE.match, os.listdir(directory)) if m and m.group(3) == ext)

    def make_dirs(self, *dirs):
        for d in dirs:
            Path(d).mkdir(parents=True, exist_ok=True)


def read_depths(layout):
    frames = layout.frames()
    if not frames:
        raise FileNotFoundError(f"no depth maps in {layout.depth_dir}")
    depths = [read_depth(layout.depth_path(i)) for i in frames]
    shapes = {d.shape for d in depths}
    if len(shapes) != 1:
        raise FormatError(f"depth maps differ in resolution: {sorted(shapes)}")
    return depths


def read_flows(layout, shape=None):
    if not layout.flow_dir.is_dir():
        raise FileNotFoundError(f"missing flow directory {layout.flow_dir}")
    flows = {p: read_flow(layout.flow_path(*p)) for p in layout.pairs()}
    for p, f in flows.items():
        if shape is not None and f.shape[:2] != tuple(shape):
            raise FormatError(f"flow {p[0]}->{p[1]} has shape {f.shape[:2]}, expected {tuple(shape)}")
    return flows


def read_dyn_masks(layout, n_frames):
    """Per-frame dynamic masks, or None when the project has none."""
    if not any(layout.dyn_path(i).exists() for i in range(n_frames)):
        return None
    return [read_mask(layout.dyn_path(i)) if layout.dyn_path(i).exists() else None
            for i in range(n_frames)]


# -- result bundle ------------------------------------------------------------

def write_params(out_dir, params):
    out_dir = Path(out_dir)
    (out_dir / "grids").mkdir(parents=True, exist_ok=True)
    write_trajectory(out_dir / "trajectory.txt", params.poses())
    write_focals(out_dir / "focals.txt", params.focals)
    for i in range(params.n_frames):
        write_grid(out_dir / "grids" / ProjectLayout.frame_name(i, "txt"), params.handles[i],
                   params.width, params.height)


def read_params(out_dir):
    from .solver import CameraParamBlock
    out_dir = Path(out_dir)
    poses = read_trajectory(out_dir / "trajectory.txt")
    focals = read_focals(out_dir / "focals.txt")
    grids = [read_grid(out_dir / "grids" / ProjectLayout.frame_name(i, "txt"))
             for i in range(len(poses))]
    if len(focals) != len(poses):
        raise FormatError("trajectory and focal files disagree on the frame count")
    if len({g[0].shape for g in grids}) != 1 or len({g[1:] for g in grids}) != 1:
        raise FormatError("grid files disagree on resolution")
    return CameraParamBlock(np.stack([p.rotation for p in poses]),
                            np.stack([p.translation for p in poses]), focals,
                            np.stack([g[0] for g in grids]), grids[0][1], grids[0][2])


def write_result_bundle(out_dir, params, depths, report):
    """Trajectory, focals, grids, filtered depths and ``report.json`` under ``out_dir``."""
    if params.n_frames == 0 or len(depths) == 0:
        raise ValueError("cannot write a result bundle for an empty video")
    if len(depths) != params.n_frames:
        raise ValueError("depth count does not match the parameter block")
    out_dir = Path(out_dir)
    write_params(out_dir, params)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    for i, d in enumerate(depths):
        write_depth(out_dir / "depth" / ProjectLayout.frame_name(i, "pfm"), d)
    write_json(out_dir / "report.json", report)


def read_result_bundle(out_dir):
    out_dir = Path(out_dir)
    params = read_params(out_dir)
    depths = [read_depth(out_dir / "depth" / ProjectLayout.frame_name(i, "pfm"))
              for i in range(params.n_frames)]
    return params, depths, read_json(out_dir / "report.json")
