"""Frame pairs, flow consistency, chained flow and match sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .raster import bilinear, in_bounds, nearest, pixel_grid, smooth_support

log = logging.getLogger(__name__)


def build_pair_set(n_frames):
    """Unordered frame pairs ``(i, i+k)`` with ``i % k == 0`` for ``k = 1, 2, 4, ...``.

    ``k`` stops at the largest power of two below ``n_frames``.  Pairs are
    ordered by ``k`` and then by ``i``.
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    pairs = []
    k = 1
    while k < n_frames:
        pairs.extend((i, i + k) for i in range(0, n_frames - k, k))
        k *= 2
    return pairs


def consecutive_pairs(n_frames):
    return [(i, i + 1) for i in range(n_frames - 1)]


def directed(pairs):
    """Both orderings of each unordered pair."""
    out = []
    for i, j in pairs:
        out.append((i, j))
        out.append((j, i))
    return out


def fb_consistency_mask(flow_ij, flow_ji, threshold=1.0):
    """Pixels of frame i whose flow round trip i->j->i returns within ``threshold`` px."""
    flow_ij = np.asarray(flow_ij, dtype=float)
    flow_ji = np.asarray(flow_ji, dtype=float)
    if flow_ij.shape != flow_ji.shape:
        raise ValueError("forward and backward flows differ in shape")
    H, W = flow_ij.shape[:2]
    p = pixel_grid(W, H)
    f = flow_ij.reshape(-1, 2)
    back, inside = bilinear(flow_ji, p + f)
    err = np.linalg.norm(f + back, axis=1)
    return (inside & (err < threshold)).reshape(H, W)


def chain_flow(flows, i, j, masks=None, smooth_tol=None):
    """Compose consecutive flows from frame ``i`` to frame ``j``.

    ``flows`` maps ``(a, b)`` to an ``(H, W, 2)`` flow for neighboring
    frames.  ``masks`` optionally maps the same keys to per-hop consistency
    masks.  Returns ``(flow, valid)``; a pixel is invalid once any hop leaves
    the image or lands on a pixel the hop's mask rejects.  With
    ``smooth_tol`` (pixels) a hop is also invalid where the flow is not
    affine around the sample, i.e. where bilinear resampling would blend
    across a motion boundary.
    """
    if i == j:
        any_flow = next(iter(flows.values()))
        H, W = any_flow.shape[:2]
        return np.zeros((H, W, 2)), np.ones((H, W), dtype=bool)
    step = 1 if j > i else -1
    hops = [(a, a + step) for a in range(i, j, step)]
    for hop in hops:
        if hop not in flows:
            raise KeyError(f"missing flow {hop[0]}->{hop[1]}")
    H, W = flows[hops[0]].shape[:2]
    p = pixel_grid(W, H)
    x = p.copy()
    valid = np.ones(len(p), dtype=bool)
    for hop in hops:
        if masks is not None and hop in masks:
            valid &= in_bounds(x, W, H) & nearest(masks[hop], x).astype(bool)
        f, inside = bilinear(flows[hop], x)
        valid &= inside
        if smooth_tol is not None:
            valid &= smooth_support(flows[hop], x, smooth_tol)
        x = x + f
    valid &= in_bounds(x, W, H)
    return (x - p).reshape(H, W, 2), valid.reshape(H, W)


@dataclass
class MatchSet:
    """Sampled correspondences; ``p`` in frame ``frame_i``, ``q`` in ``frame_j`` (raster coords)."""

    frame_i: np.ndarray
    frame_j: np.ndarray
    p: np.ndarray
    q: np.ndarray
    empty_pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.frame_i)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 2)))

    @classmethod
    def concatenate(cls, sets):
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(np.concatenate([s.frame_i for s in sets]),
                   np.concatenate([s.frame_j for s in sets]),
                   np.concatenate([s.p for s in sets]),
                   np.concatenate([s.q for s in sets]),
                   [e for s in sets for e in s.empty_pairs])

    def subset(self, keep):
        return MatchSet(self.frame_i[keep], self.frame_j[keep], self.p[keep], self.q[keep],
                        list(self.empty_pairs))

    def pairs(self):
        return sorted({(int(a), int(b)) for a, b in zip(self.frame_i, self.frame_j)})


def sample_matches(flow, m_flow, m_dyn, min_dist=10.0, seed=0, frames=(0, 1), m_dyn_target=None,
                   tries=8):
    """Spatially stratified match sampling for one directed frame pair.

    The frame is split into square cells of side ``min_dist``; each cell
    draws up to ``tries`` eligible pixels in random order and keeps the first
    one that is at least ``min_dist`` from every match accepted so far.
    Eligible pixels pass ``m_flow``, are outside ``m_dyn`` and flow to a
    location inside the target frame (outside ``m_dyn_target`` if given).
    """
    flow = np.asarray(flow, dtype=float)
    H, W = flow.shape[:2]
    eligible = np.asarray(m_flow, dtype=bool).copy()
    if m_dyn is not None:
        eligible &= ~np.asarray(m_dyn, dtype=bool)
    p_all = pixel_grid(W, H)
    q_all = p_all + flow.reshape(-1, 2)
    ok = in_bounds(q_all, W, H)
    if m_dyn_target is not None:
        ok &= ~nearest(m_dyn_target, q_all).astype(bool)
    eligible &= ok.reshape(H, W)

    fi, fj = frames
    if not eligible.any():
        log.warning("no eligible matches for pair %d->%d", fi, fj)
        out = MatchSet.empty()
        out.empty_pairs.append((fi, fj))
        return out

    rng = np.random.default_rng(seed)
    cell = float(min_dist)
    ncx = int(np.ceil(W / cell))
    ncy = int(np.ceil(H / cell))
    accepted = {}
    chosen = []
    d2 = min_dist * min_dist
    for cy in range(ncy):
        for cx in range(ncx):
            x_lo, x_hi = int(np.ceil(cx * cell)), min(int(np.ceil((cx + 1) * cell)), W)
            y_lo, y_hi = int(np.ceil(cy * cell)), min(int(np.ceil((cy + 1) * cell)), H)
            ys, xs = np.nonzero(eligible[y_lo:y_hi, x_lo:x_hi])
            if len(xs) == 0:
                continue
            order = rng.permutation(len(xs))[:tries]
            for o in order:
                x, y = xs[o] + x_lo, ys[o] + y_lo
                if _far_enough(accepted, cx, cy, x, y, d2):
                    accepted[(cx, cy)] = (x, y)
                    chosen.append(y * W + x)
                    break
    chosen = np.array(chosen, dtype=np.int64)
    n = len(chosen)
    return MatchSet(np.full(n, fi, np.int64), np.full(n, fj, np.int64),
                    p_all[chosen], q_all[chosen])


def _far_enough(accepted, cx, cy, x, y, d2):
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            other = accepted.get((cx + dx, cy + dy))
            if other is not None and (other[0] - x) ** 2 + (other[1] - y) ** 2 < d2:
                return False
    return True


def build_matches(flows, fb_masks, dyn_masks, pairs, min_dist=10.0, seed=0):
    """Sample matches for every directed pair in ``pairs``.

    ``flows`` and ``fb_masks`` map directed pairs to rasters; ``dyn_masks`` is
    a sequence of per-frame dynamic masks (or None).
    """
    sets = []
    for n, (i, j) in enumerate(pairs):
        if (i, j) not in flows:
            raise KeyError(f"missing flow {i}->{j}")
        m_dyn_i = dyn_masks[i] if dyn_masks is not None else None
        m_dyn_j = dyn_masks[j] if dyn_masks is not None else None
        sets.append(sample_matches(flows[(i, j)], fb_masks[(i, j)], m_dyn_i, min_dist,
                                   seed=(seed, n), frames=(i, j), m_dyn_target=m_dyn_j))
    return MatchSet.concatenate(sets)
