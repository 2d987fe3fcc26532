"""Trajectory and depth error metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, rotation_angle

log = logging.getLogger(__name__)

DEPTH_CAP = 80.0


def umeyama(src, dst, with_scale=True, weights=None):
    """Closed-form similarity ``dst ~ c * R @ src + t`` (least squares).

    Returns ``(c, R, t)``.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    cov = (xd * w[:, None]).T @ xs
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var_s = np.sum(w * np.sum(xs**2, axis=1))
    c = float(np.trace(np.diag(S) @ D) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - c * R @ mu_s
    return c, R, t


@dataclass(frozen=True)
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply_points(self, X):
        return self.scale * np.asarray(X, dtype=float) @ self.rotation.T + self.translation

    def apply_pose(self, pose):
        return Pose(self.rotation @ pose.rotation, self.apply_points(pose.translation[None])[0])


def positions(traj):
    return np.array([p.translation for p in traj])


def align_trajectory(pred, gt):
    """Similarity aligning predicted camera centers onto ground truth."""
    if len(pred) != len(gt):
        raise ValueError("trajectories differ in length")
    P, G = positions(pred), positions(gt)
    if len(P) < 3:
        log.warning("fewer than 3 poses; aligning translation and scale only")
        mp, mg = P.mean(axis=0), G.mean(axis=0)
        sp = np.sqrt(np.sum((P - mp) ** 2))
        c = float(np.sqrt(np.sum((G - mg) ** 2)) / sp) if sp > 0 else 1.0
        sim = Similarity(c, np.eye(3), mg - c * mp)
    else:
        c, R, t = umeyama(P, G)
        sim = Similarity(c, R, t)
    return sim, [sim.apply_pose(p) for p in pred]


def ate(aligned, gt):
    d = positions(aligned) - positions(gt)
    return float(np.sqrt(np.mean(np.sum(d**2, axis=1))))


def rpe(pred, gt, delta=1):
    """Relative pose errors for frame gap ``delta``: (translation list, rotation list in degrees)."""
    if len(pred) != len(gt):
        raise ValueError("trajectories differ in length")
    if len(pred) <= delta:
        raise ValueError("trajectory shorter than the frame gap")
    trans, rot = [], []
    for i in range(len(pred) - delta):
        rel_gt = gt[i].inverse().compose(gt[i + delta])
        rel_pred = pred[i].inverse().compose(pred[i + delta])
        E = rel_gt.inverse().compose(rel_pred)
        trans.append(float(np.linalg.norm(E.translation)))
        rot.append(float(np.degrees(rotation_angle(E.rotation))))
    return np.array(trans), np.array(rot)


def trajectory_diameter(traj):
    P = positions(traj)
    d = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    return float(d.max())


@dataclass
class MetricReport:
    ate: float = float("nan")
    rpe_t: float = float("nan")
    rpe_r: float = float("nan")
    abs_rel: float = float("nan")
    sq_rel: float = float("nan")
    rmse: float = float("nan")
    rmse_log: float = float("nan")
    delta1: float = float("nan")
    delta2: float = float("nan")
    delta3: float = float("nan")
    median_scale: float = float("nan")
    n_pixels: int = 0
    sorted_errors: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def as_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k != "sorted_errors"}
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in out.items()}


def depth_metrics(pred, gt, cap=DEPTH_CAP, report=None):
    """Median-scaled depth errors over a whole sequence.

    One scale ``median(gt) / median(pred)`` is computed over all valid pixels
    of all frames; ground-truth depths above ``cap`` are excluded.  The
    per-pixel absolute relative errors are returned sorted for error curves.
    """
    report = report if report is not None else MetricReport()
    pv, gv = [], []
    for p, g in zip(pred, gt):
        p = np.asarray(p, dtype=float)
        g = np.asarray(g, dtype=float)
        if p.shape != g.shape:
            raise ValueError("predicted and ground-truth depth shapes differ")
        ok = np.isfinite(g) & (g > 0) & (g <= cap) & np.isfinite(p) & (p > 0)
        pv.append(p[ok])
        gv.append(g[ok])
    p = np.concatenate(pv) if pv else np.zeros(0)
    g = np.concatenate(gv) if gv else np.zeros(0)
    if p.size == 0:
        raise ValueError("no valid depth pixels to evaluate")
    s = np.median(g) / np.median(p)
    p = p * s
    rel = np.abs(p - g) / g
    ratio = np.maximum(p / g, g / p)
    report.abs_rel = float(rel.mean())
    report.sq_rel = float(np.mean((p - g) ** 2 / g))
    report.rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    report.rmse_log = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    report.delta1 = float(np.mean(ratio < 1.25))
    report.delta2 = float(np.mean(ratio < 1.25**2))
    report.delta3 = float(np.mean(ratio < 1.25**3))
    report.median_scale = float(s)
    report.n_pixels = int(p.size)
    report.sorted_errors = np.sort(rel)
    return report


def pose_metrics(pred, gt, delta=1, report=None):
    report = report if report is not None else MetricReport()
    _, aligned = align_trajectory(pred, gt)
    report.ate = ate(aligned, gt)
    t, r = rpe(aligned, gt, delta)
    report.rpe_t = float(t.mean())
    report.rpe_r = float(r.mean())
    return report
