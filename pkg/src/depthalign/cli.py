"""Command-line pipeline driver.

Stages hand off through files in a project directory only, so ``run`` is the
exact sequence ``masks``, ``solve``, ``filter``.  Exit codes: 0 success,
1 usage error, 2 input/format error, 3 solver did not converge (results are
still written).  Progress goes to stderr, a JSON summary to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .config import PAPER_FOCAL_PRIOR, ConfigError, PipelineConfig, field_types, help_text, \
    load_config
from .correspondence import build_matches, build_pair_set, chain_flow, directed, \
    fb_consistency_mask
from .deformation import apply_deformation
from .depthfilter import filter_video
from .evaluation import depth_metrics, pose_metrics, trajectory_diameter
from .solver import SolverError, coarse_to_fine_solve

log = logging.getLogger("depthalign")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ------------------------------------------------------------------

def _require(path, what):
    if not Path(path).exists():
        raise InputError(f"missing {what}: {path}")


def project_config(layout, overrides=None, config_path=None):
    """Defaults < project config file < command-line overrides."""
    path = Path(config_path) if config_path is not None else layout.config_path
    if config_path is not None:
        _require(path, "config file")
    try:
        cfg = load_config(path)
    except ConfigError as e:
        raise InputError(str(e)) from None
    if overrides:
        try:
            cfg = cfg.updated(overrides)
        except ConfigError as e:
            raise UsageError(str(e)) from None
    return cfg


def _consecutive(n):
    return [(i, i + 1) for i in range(n - 1)] + [(i + 1, i) for i in range(n - 1)]


def load_inputs(layout, need_masks=True):
    """Depths, flows, fb masks and dynamic masks of a project, validated."""
    _require(layout.depth_dir, "depth directory")
    _require(layout.flow_dir, "flow directory")
    depths = io.read_depths(layout)
    n = len(depths)
    if n < 2:
        raise InputError("a video needs at least two frames")
    flows = io.read_flows(layout, depths[0].shape)
    missing = [p for p in _consecutive(n) if p not in flows]
    if missing:
        raise InputError("missing consecutive flows: " + ", ".join(
            str(layout.flow_path(*p)) for p in missing[:4]))
    fb = {}
    if need_masks:
        _require(layout.fb_dir, "consistency masks (run the masks stage)")
        for p in layout.pairs(layout.fb_dir, "pgm"):
            fb[p] = io.read_mask(layout.fb_path(*p))
        missing = [p for p in _consecutive(n) if p not in fb]
        if missing:
            raise InputError("missing consistency masks: " + ", ".join(
                str(layout.fb_path(*p)) for p in missing[:4]))
    dyn = io.read_dyn_masks(layout, n)
    return depths, flows, fb, dyn


def pair_inputs(n, flows, fb):
    """Flow and validity mask for every directed pair of the pair set.

    Pairs without a stored flow or consistency mask are chained from the
    consecutive flows, masked hop by hop.
    """
    hop_masks = {p: fb[p] for p in _consecutive(n)}
    pf, pm = {}, {}
    n_chained = 0
    for i, j in directed(build_pair_set(n)):
        if (i, j) in flows and (i, j) in fb:
            pf[(i, j)], pm[(i, j)] = flows[(i, j)], fb[(i, j)]
        else:
            pf[(i, j)], pm[(i, j)] = chain_flow(flows, i, j, hop_masks)
            n_chained += 1
    return pf, pm, n_chained


# -- stages -------------------------------------------------------------------

def stage_synth(args):
    from . import synthgen as sg

    scene, trajectory = args.scene, args.trajectory
    if scene in sg.TRAJECTORY_KINDS:     # "--scene orbit" names the camera path
        scene, trajectory = "multi-plane", scene
    try:
        spec = sg.SceneSpec(scene=scene, trajectory=trajectory, n_frames=args.frames,
                            width=args.width, height=args.height, seed=args.scene_seed)
        dyn = sg.DynamicBox() if args.dynamic else None
        corr = sg.CorruptionSpec(amplitude=args.amplitude, noise_sigma=args.noise,
                                 scale_drift=args.drift)
    except ValueError as e:
        raise UsageError(str(e)) from None
    layout = io.ProjectLayout(args.out)
    gt = sg.gen_scene(spec, dynamic=dyn)
    layout.make_dirs(layout.depth_dir, layout.flow_dir, layout.gt_dir / "depth")
    n = spec.n_frames
    for k in range(n):
        depth, _ = sg.render_depth(gt, k)
        io.write_depth(layout.gt_dir / "depth" / io.ProjectLayout.frame_name(k, "pfm"), depth)
        noisy, _ = sg.corrupt_depth(depth, corr, seed=args.corruption_seed, frame=k)
        io.write_depth(layout.depth_path(k), noisy)
        if dyn is not None:
            layout.make_dirs(layout.mask_dir)
            io.write_mask(layout.dyn_path(k), sg.dynamic_mask(gt, k))
    pairs = _consecutive(n) if args.consecutive_only else directed(build_pair_set(n))
    for i, j in pairs:
        io.write_flow(layout.flow_path(i, j), sg.render_flow(gt, i, j)[0])
        log.info("flow %d->%d", i, j)
    io.write_trajectory(layout.gt_dir / "trajectory.txt", gt.poses)
    io.write_focals(layout.gt_dir / "focals.txt", [gt.focal] * n)
    # synthetic videos are small; match spacing scales with the long side
    overrides = dict(args.config_overrides)
    overrides.setdefault("min_match_dist", synth_match_dist(spec.width, spec.height))
    cfg = PipelineConfig().updated(overrides)
    layout.config_path.write_text("".join(
        line + "\n" for line in cfg.to_text().splitlines()
        if line.split(" = ")[0] in overrides))
    return EXIT_OK, {"stage": "synth", "frames": n, "flows": len(pairs),
                     "width": spec.width, "height": spec.height, "project": str(layout.root)}


def synth_match_dist(width, height):
    """10 px at a 512 px long side, rounded to half pixels, at least 2."""
    return max(2.0, round(20.0 * max(width, height) / 512) / 2)


def stage_masks(layout, cfg):
    _require(layout.flow_dir, "flow directory")
    _require(layout.depth_dir, "depth directory")
    n = len(layout.frames())
    flows = io.read_flows(layout)
    missing = [p for p in _consecutive(n) if p not in flows]
    if missing:
        raise InputError("missing consecutive flows: " + ", ".join(
            str(layout.flow_path(*p)) for p in missing[:4]))
    layout.make_dirs(layout.fb_dir)
    written = 0
    for (i, j), f in sorted(flows.items()):
        if (j, i) not in flows:
            continue
        io.write_mask(layout.fb_path(i, j), fb_consistency_mask(f, flows[(j, i)], cfg.fb_threshold))
        written += 1
    log.info("wrote %d consistency masks", written)
    return EXIT_OK, {"stage": "masks", "masks": written}


def stage_solve(layout, cfg):
    depths, flows, fb, dyn = load_inputs(layout)
    n = len(depths)
    pf, pm, n_chained = pair_inputs(n, flows, fb)
    pairs = directed(build_pair_set(n))
    log.info("%d frames, %d directed pairs (%d chained)", n, len(pairs), n_chained)
    matches = build_matches(pf, pm, dyn, pairs, cfg.min_match_dist, cfg.seed)
    log.info("%d matches", len(matches))
    try:
        params, report = coarse_to_fine_solve(matches, depths, cfg.solve_options(),
                                              cfg.reg_weights(), dyn, cfg.long_counts())
    except SolverError as e:
        raise InputError(f"solve failed: {e}") from None
    layout.make_dirs(layout.out_dir)
    io.write_params(layout.out_dir, params)
    summary = solve_summary(report, n_chained)
    io.write_json(layout.out_dir / "solve_report.json", summary)
    code = EXIT_OK if report.converged else EXIT_NOT_CONVERGED
    if code:
        log.warning("solver did not converge on every level; results written")
    return code, {"stage": "solve", **summary}


def solve_summary(report, n_chained=0):
    """Report without wall times so identical runs give identical bytes."""
    d = report.as_dict()
    for lv in d["levels"]:
        lv.pop("wall_time", None)
    d["chained_pairs"] = n_chained
    return d


def stage_filter(layout, cfg):
    depths, flows, fb, dyn = load_inputs(layout)
    _require(layout.out_dir / "trajectory.txt", "solver output (run the solve stage)")
    params = io.read_params(layout.out_dir)
    if params.n_frames != len(depths) or (params.height, params.width) != depths[0].shape:
        raise InputError("solver output does not match the project's depth maps")
    deformed = [apply_deformation(d, params.grid(i)) for i, d in enumerate(depths)]
    hop_masks = {p: fb[p] for p in _consecutive(len(depths))}
    filtered, fallback = filter_video(deformed, params, flows, cfg.filter_config(), hop_masks,
                                      cfg.threads)
    solve_path = layout.out_dir / "solve_report.json"
    report = {"solve": io.read_json(solve_path) if solve_path.exists() else None,
              "filter": {"fallback_pixels": fallback, "tau": cfg.tau,
                         "lambda_f": cfg.lambda_f, "radius": cfg.filter_radius},
              "config": cfg.to_text()}
    io.write_result_bundle(layout.out_dir, params, [d.astype(np.float32) for d in filtered],
                           report)
    log.info("filtered %d frames (%d fallback pixels)", len(filtered), sum(fallback))
    return EXIT_OK, {"stage": "filter", "frames": len(filtered),
                     "fallback_pixels": int(sum(fallback))}


def stage_eval(layout, cfg):
    _require(layout.gt_dir / "trajectory.txt", "ground-truth trajectory")
    _require(layout.out_dir / "trajectory.txt", "solver output")
    gt_poses = io.read_trajectory(layout.gt_dir / "trajectory.txt")
    params = io.read_params(layout.out_dir)
    if len(gt_poses) != params.n_frames:
        raise InputError("ground truth and result disagree on the frame count")
    rep = pose_metrics(params.poses(), gt_poses)
    diam = trajectory_diameter(gt_poses)
    out = {"stage": "eval", "ate": rep.ate, "ate_relative": rep.ate / diam if diam > 0 else None,
           "rpe_t": rep.rpe_t, "rpe_r_deg": rep.rpe_r, "trajectory_diameter": diam}
    gt_depth_dir = layout.gt_dir / "depth"
    if gt_depth_dir.is_dir():
        gt_d = [io.read_depth(gt_depth_dir / io.ProjectLayout.frame_name(i, "pfm"))
                for i in range(params.n_frames)]
        inp = io.read_depths(layout)
        out["depth_input"] = _depth_dict(depth_metrics(inp, gt_d))
        out_depth = layout.out_dir / "depth"
        if out_depth.is_dir():
            res = [io.read_depth(out_depth / io.ProjectLayout.frame_name(i, "pfm"))
                   for i in range(params.n_frames)]
            rep_f = depth_metrics(res, gt_d)
            out["depth_filtered"] = _depth_dict(rep_f)
            io.write_floats(layout.out_dir / "abs_rel_sorted.f32", rep_f.sorted_errors)
    io.write_json(layout.out_dir / "metrics.json", out)
    log.info("ATE %.4g (%.3g%% of diameter), RPE-R %.4g deg", rep.ate,
             100 * (out["ate_relative"] or 0), rep.rpe_r)
    return EXIT_OK, out


def _depth_dict(rep):
    return {k: v for k, v in rep.as_dict().items()
            if k in ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "median_scale")}


def stage_run(layout, cfg):
    steps = {}
    code = EXIT_OK
    for name, fn in (("masks", stage_masks), ("solve", stage_solve), ("filter", stage_filter)):
        log.info("== %s", name)
        c, summary = fn(layout, cfg)
        steps[name] = summary
        code = max(code, c)
    return code, {"stage": "run", **steps}


STAGES = {"masks": stage_masks, "solve": stage_solve, "filter": stage_filter,
          "eval": stage_eval, "run": stage_run}


# -- argument parsing ---------------------------------------------------------

def _add_config_flags(p):
    g = p.add_argument_group("pipeline configuration (overrides the project config file)")
    types = field_types()
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        typ = types[f.name]
        if typ is bool:
            g.add_argument(flag, dest=f.name, action="store_const", const=True,
                           default=argparse.SUPPRESS, help=help_text(f.name))
        else:
            g.add_argument(flag, dest=f.name, type=typ, default=argparse.SUPPRESS,
                           metavar=f.name.upper(),
                           help=f"{help_text(f.name)} (default {f.default})")
    g.add_argument("--paper-focal-prior", action="store_const", const=True,
                   default=argparse.SUPPRESS,
                   help=f"use the literal focal prior {PAPER_FOCAL_PRIOR}")
    g.add_argument("--config", dest="config_file", default=None,
                   help="config file (default: <project>/config.txt)")


def build_parser():
    from .synthgen import SCENE_KINDS, TRAJECTORY_KINDS

    parser = _Parser(prog="depthalign", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic oracle project")
    s.add_argument("--out", required=True, help="project directory to create")
    s.add_argument("--scene", default="multi-plane",
                   choices=SCENE_KINDS + TRAJECTORY_KINDS,
                   help="scene kind; a trajectory name selects it on the default scene")
    s.add_argument("--trajectory", default="orbit", choices=TRAJECTORY_KINDS)
    s.add_argument("--frames", type=int, default=12)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--amplitude", type=float, default=0.2, help="smooth depth corruption")
    s.add_argument("--noise", type=float, default=0.01, help="per-pixel relative noise")
    s.add_argument("--drift", type=float, default=0.0, help="per-frame log-scale drift")
    s.add_argument("--dynamic", action="store_true", help="add a moving box")
    s.add_argument("--scene-seed", type=int, default=0)
    s.add_argument("--corruption-seed", type=int, default=1)
    s.add_argument("--consecutive-only", action="store_true",
                   help="write only consecutive flows (others get chained)")
    _add_config_flags(s)

    helps = {"masks": "forward-backward consistency masks from flows",
             "solve": "coarse-to-fine pose and deformation solve",
             "filter": "spatio-temporal depth filter",
             "eval": "metrics against ground truth in gt/",
             "run": "masks, solve and filter in sequence"}
    for name, h in helps.items():
        p = sub.add_parser(name, help=h)
        p.add_argument("project", help="project directory")
        _add_config_flags(p)
    return parser


def _overrides(ns):
    names = {f.name for f in fields(PipelineConfig)}
    out = {k: v for k, v in vars(ns).items() if k in names}
    if getattr(ns, "paper_focal_prior", False):
        if "focal_prior" in out:
            raise UsageError("--paper-focal-prior conflicts with --focal-prior")
        out["focal_prior"] = PAPER_FOCAL_PRIOR
    return out


def dispatch(argv=None):
    """Run one command; returns the exit code."""
    parser = build_parser()
    try:
        try:
            ns = parser.parse_args(argv)
        except SystemExit as e:       # --help
            return int(e.code or 0)
        logging.basicConfig(stream=sys.stderr, format="%(message)s", force=True,
                            level=logging.WARNING if ns.quiet else logging.INFO)
        t0 = time.perf_counter()
        overrides = _overrides(ns)
        if ns.command == "synth":
            try:
                PipelineConfig().updated(overrides)
            except ConfigError as e:
                raise UsageError(str(e)) from None
            ns.config_overrides = overrides
            code, summary = stage_synth(ns)
        else:
            layout = io.ProjectLayout(ns.project)
            if not layout.root.is_dir():
                raise InputError(f"missing project directory: {layout.root}")
            cfg = project_config(layout, overrides, ns.config_file)
            code, summary = STAGES[ns.command](layout, cfg)
        log.info("%s finished in %.1f s", ns.command, time.perf_counter() - t0)
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, io.FormatError, FileNotFoundError, KeyError, ConfigError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    summary["exit_code"] = code
    print(json.dumps(io._plain(summary), sort_keys=True))
    return code


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
