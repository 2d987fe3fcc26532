"""Pipeline configuration: a flat ``key = value`` file with typed validation.

Precedence is built-in defaults < config file < command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .depthfilter import FilterConfig
from .losses import LossKind, RegWeights
from .solver import SolveOptions

PAPER_FOCAL_PRIOR = 0.35
LINEAR_SOLVERS = ("auto", "sparse", "dense", "cg")


class ConfigError(ValueError):
    pass


def long_side_counts(limit):
    """Schedule counts ``1, 2, 3, 5, 9, 17, 33, ...`` up to ``limit`` inclusive."""
    counts = [1]
    n = 2
    while n <= limit:
        counts.append(n)
        n = 2 * n - 1
    if counts[-1] != limit:
        raise ConfigError(f"grid_long must be one of 1, 2, 3, 5, 9, 17, 33, ...; got {limit}")
    return tuple(counts)


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


# key -> (check, description of the valid range, help text)
_RULES = {
    "fb_threshold": (_positive, "> 0", "forward-backward consistency threshold in pixels"),
    "min_match_dist": (_positive, "> 0", "minimum distance between sampled matches in pixels"),
    "lambda1": (_nonneg, ">= 0", "weight of the spatial reprojection term"),
    "lambda2": (_nonneg, ">= 0", "weight of the depth (ratio/disparity) term"),
    "lambda_deform": (_nonneg, ">= 0", "deformation smoothness weight"),
    "lambda_focal": (_nonneg, ">= 0", "focal prior weight"),
    "focal_prior": (_positive, "> 0", "focal prior in long-side half-widths"),
    "shared_focal": (None, "", "tie all frames to one focal"),
    "loss_kind": (lambda v: v in {k.value for k in LossKind},
                  "one of " + ", ".join(k.value for k in LossKind), "reprojection loss variant"),
    "grid_long": (lambda v: v >= 1, ">= 1", "handles on the long side of the finest grid"),
    "max_iterations": (lambda v: v >= 1, ">= 1", "LM iterations per level"),
    "function_tolerance": (_positive, "> 0", "relative cost decrease tolerance"),
    "gradient_tolerance": (_positive, "> 0", "gradient max-norm tolerance"),
    "parameter_tolerance": (_positive, "> 0", "relative step tolerance"),
    "damping_init": (_positive, "> 0", "initial LM damping"),
    "damping_up": (lambda v: v > 1, "> 1", "damping factor on rejected steps"),
    "damping_down": (lambda v: 0 < v < 1, "in (0, 1)", "damping factor on accepted steps"),
    "linear_solver": (lambda v: v in LINEAR_SOLVERS, "one of " + ", ".join(LINEAR_SOLVERS),
                      "normal-equation solver"),
    "dense_threshold": (_nonneg, ">= 0", "variable count below which auto uses dense Cholesky"),
    "edge_ratio": (lambda v: v >= 1, ">= 1", "max depth ratio across a sampling cell"),
    "lambda_f": (_nonneg, ">= 0", "filter edge-preservation strength"),
    "tau": (_nonneg, ">= 0", "filter temporal radius in frames"),
    "filter_radius": (_nonneg, ">= 0", "filter spatial half-window"),
    "seed": (_nonneg, ">= 0", "random seed for match sampling"),
    "threads": (lambda v: v >= 1, ">= 1", "worker threads (1 is bitwise deterministic)"),
}


@dataclass(frozen=True)
class PipelineConfig:
    fb_threshold: float = 1.0
    min_match_dist: float = 10.0
    lambda1: float = RegWeights.lambda1
    lambda2: float = RegWeights.lambda2
    lambda_deform: float = RegWeights.lambda_deform
    lambda_focal: float = RegWeights.lambda_focal
    focal_prior: float = float(RegWeights.focal_prior)
    shared_focal: bool = False
    loss_kind: str = LossKind.SPATIAL_RATIO.value
    grid_long: int = 17
    max_iterations: int = SolveOptions.max_iterations
    function_tolerance: float = SolveOptions.function_tolerance
    gradient_tolerance: float = SolveOptions.gradient_tolerance
    parameter_tolerance: float = SolveOptions.parameter_tolerance
    damping_init: float = SolveOptions.damping_init
    damping_up: float = SolveOptions.damping_up
    damping_down: float = SolveOptions.damping_down
    linear_solver: str = SolveOptions.linear_solver
    dense_threshold: int = SolveOptions.dense_threshold
    edge_ratio: float = 1.1
    lambda_f: float = 3.0
    tau: int = 4
    filter_radius: int = 1
    seed: int = 0
    threads: int = os.cpu_count() or 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            check, rng, _ = _RULES[f.name]
            if check is not None and not check(v):
                raise ConfigError(f"{f.name} = {v!r} is out of range (must be {rng})")
        long_side_counts(self.grid_long)

    # -- conversion ----------------------------------------------------------

    def long_counts(self):
        return long_side_counts(self.grid_long)

    def solve_options(self):
        return SolveOptions(
            max_iterations=self.max_iterations, function_tolerance=self.function_tolerance,
            gradient_tolerance=self.gradient_tolerance,
            parameter_tolerance=self.parameter_tolerance, damping_init=self.damping_init,
            damping_up=self.damping_up, damping_down=self.damping_down,
            linear_solver=self.linear_solver, dense_threshold=self.dense_threshold,
            loss_kind=LossKind(self.loss_kind), shared_focal=self.shared_focal,
            edge_ratio=self.edge_ratio, threads=self.threads, seed=self.seed)

    def reg_weights(self):
        return RegWeights(lambda1=self.lambda1, lambda2=self.lambda2,
                          lambda_deform=self.lambda_deform, lambda_focal=self.lambda_focal,
                          focal_prior=self.focal_prior)

    def filter_config(self):
        return FilterConfig(tau=self.tau, radius=self.filter_radius, lambda_f=self.lambda_f)

    # -- text form -----------------------------------------------------------

    def to_text(self, skip=("threads",)):
        """``key = value`` lines; ``threads`` is machine-specific and left out by default."""
        lines = []
        for f in fields(self):
            if f.name in skip:
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def updated(self, values):
        """Copy with ``values`` (already typed or raw strings) applied and validated."""
        return replace(self, **{k: parse_value(k, v) for k, v in values.items()})


def help_text(key):
    return _RULES[key][2]


def field_types():
    hints = {"float": float, "int": int, "bool": bool, "str": str}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type
            for f in fields(PipelineConfig)}


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key, raw):
    types = field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    typ = types[key]
    if not isinstance(raw, str):
        if typ is float and isinstance(raw, (int, float, np.number)) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, typ):
            return raw
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}")
    s = raw.strip()
    try:
        if typ is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(s)
        if typ is float:
            v = float(s)
            if not np.isfinite(v):
                raise ValueError
            return v
        return s
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {s!r} as {typ.__name__}") from None


def parse_config_text(text, source="<config>"):
    """Raw ``{key: value}`` from ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for k, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{k}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in field_types():
            raise ConfigError(f"{source}:{k}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{k}: duplicate key {key!r}")
        out[key] = parse_value(key, value)
    return out


def load_config(path=None, overrides=None, base=None):
    """Defaults (or ``base``) < file at ``path`` (if it exists) < ``overrides``."""
    cfg = base if base is not None else PipelineConfig()
    if path is not None and Path(path).exists():
        try:
            cfg = cfg.updated(parse_config_text(Path(path).read_text(), str(path)))
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from None
    if overrides:
        cfg = cfg.updated(overrides)
    return cfg
