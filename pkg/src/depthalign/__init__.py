"""Consistent video depth by joint pose and deformation alignment.

Per-frame depth maps are aligned into one consistent reconstruction by
optimizing camera poses, focals and per-frame bilinear deformation grids
against optical-flow correspondences, then smoothed with an edge-preserving
filter that follows flow trajectories.
"""

__version__ = "0.1.0"
