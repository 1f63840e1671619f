"""Command-line surface tying the pipeline together.

Subcommands: simulate (synthetic dataset), track (run the tracker), eval
(compare displacement tables), render (PGM visualizations of IWEs, convergence
maps, and strain fields). Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import events as ev_mod
from . import frames as fr_mod
from . import geometry, strain, trajectory
from .errors import TrackingError
from .evaluation import metric_report, read_table, write_report
from .ioutil import read_kv, write_kv
from .optimizer import TrackerConfig, load_config, track_sequence
from .simulator import make_sequence, read_scene_spec
from .trajectory import TimeGrid, TrajectoryField

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="evdeform", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--spec", required=True, help="scene spec (key = value file)")
    p_sim.add_argument("--out", required=True, help="output directory")

    p_trk = sub.add_parser("track", help="track a dataset")
    p_trk.add_argument("--events", required=True, help="event CSV (t,x,y,p)")
    p_trk.add_argument("--frames", required=True, help="frame manifest CSV")
    p_trk.add_argument("--config", required=True, help="tracker config file")
    p_trk.add_argument("--out", required=True, help="output directory")

    p_eval = sub.add_parser("eval", help="compare predicted and true displacements")
    p_eval.add_argument("--pred", required=True, help="predicted displacement CSV")
    p_eval.add_argument("--gt", required=True, help="ground-truth displacement CSV")
    p_eval.add_argument("--report", required=True, help="report output path")

    p_ren = sub.add_parser("render", help="emit PGM visualizations from a track run")
    kind = p_ren.add_mutually_exclusive_group(required=True)
    kind.add_argument("--iwe", action="store_true", help="warped-event images and count maps")
    kind.add_argument("--strain", action="store_true", help="strain heat maps and convergence maps")
    p_ren.add_argument("--in", dest="in_dir", required=True, help="track output directory")
    p_ren.add_argument("--out", required=True, help="output directory")
    return parser


def _require_file(path) -> str:
    if not os.path.exists(path):
        raise TrackingError(f"missing input file: {path}")
    return path


def _cmd_simulate(args) -> int:
    spec = read_scene_spec(_require_file(args.spec))
    info = make_sequence(spec, args.out)
    print(f"simulate: wrote {info['n_events']} events and frames to {args.out}")
    return 0


def _cmd_track(args) -> int:
    events = ev_mod.read_events_csv(_require_file(args.events))
    frames = fr_mod.read_frame_manifest(_require_file(args.frames))
    cfg = load_config(_require_file(args.config))
    result = track_sequence(events, frames, cfg, out_dir=args.out)
    write_kv(os.path.join(args.out, "run.cfg"), {
        "events": os.path.abspath(args.events),
        "frames": os.path.abspath(args.frames),
        "config": os.path.abspath(args.config),
    })
    n_fail = len(result.window_errors)
    n_win = len(result.fields)
    print(f"track: {n_win - n_fail}/{n_win} windows tracked; outputs in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    pred = read_table(_require_file(args.pred))
    gt = read_table(_require_file(args.gt))
    report = metric_report(pred, gt)
    write_report(report, args.report)
    print(f"eval: epe={report.epe:.4f} sepe={report.sepe:.4f} "
          f"survival={report.survival:.3f} -> {args.report}")
    return 0


def _load_run(in_dir):
    run = read_kv(_require_file(os.path.join(in_dir, "run.cfg")))
    cfg = load_config(_require_file(run["config"]))
    events = ev_mod.read_events_csv(_require_file(run["events"]))
    frames = fr_mod.read_frame_manifest(_require_file(run["frames"]))
    traj = trajectory.read_trajectory_csv(
        _require_file(os.path.join(in_dir, "trajectories.csv")))
    mesh0 = geometry.make_grid_mesh(cfg.roi, cfg.mesh_nx, cfg.mesh_ny)
    fine = geometry.build_hierarchy(mesh0, cfg.max_levels)[-1]
    fields = {}
    for w, (knots, pos) in traj.items():
        fields[w] = TrajectoryField(pos, TimeGrid(knots), fine)
    return cfg, events, frames, fields


def _cmd_render(args) -> int:
    cfg, events, frames, fields = _load_run(args.in_dir)
    os.makedirs(args.out, exist_ok=True)
    shape = frames[0].shape
    wrote = 0
    for w, tf in sorted(fields.items()):
        if args.iwe:
            sel = (events.t >= tf.grid.knots[0]) & (events.t <= tf.grid.knots[-1])
            ev = events.select(sel)
            if len(ev) < cfg.m_bins:
                continue
            window = ev_mod.partition_bins(ev, tf.grid.knots[0], tf.grid.knots[-1],
                                           cfg.m_bins)
            raw_tf = trajectory.constant_field(tf.mesh, tf.grid, tf.positions[:, 0])
            for tag, field_ in (("raw", raw_tf), ("warped", tf)):
                try:
                    iwe = ev_mod.build_iwe(window, field_, tf.grid.knots[-1], shape=shape)
                except TrackingError:
                    continue
                fr_mod.write_pgm(os.path.join(args.out, f"count_{tag}_w{w:03d}.pgm"),
                                 fr_mod.normalize_to_unit(iwe.count.astype(float)))
                if tag == "warped":
                    fr_mod.write_pgm(os.path.join(args.out, f"iwe_pos_w{w:03d}.pgm"),
                                     fr_mod.normalize_to_unit(iwe.pos))
                    fr_mod.write_pgm(os.path.join(args.out, f"iwe_neg_w{w:03d}.pgm"),
                                     fr_mod.normalize_to_unit(iwe.neg))
                wrote += 1
        else:
            pos_end = tf.positions[:, -1]
            sf = strain.anchor_strain(tf, tf.grid.knots[-1])
            vm_img = strain.rasterize_anchor_values(tf.mesh, pos_end, sf.anchor_vm, shape)
            fr_mod.write_pgm(os.path.join(args.out, f"vm_w{w:03d}.pgm"),
                             fr_mod.normalize_to_unit(vm_img))
            wrote += 1
            pj_path = os.path.join(args.in_dir, "pj.csv")
            if os.path.exists(pj_path):
                rows = np.loadtxt(pj_path, delimiter=",", skiprows=1, ndmin=2)
                rows = rows[rows[:, 0] == w]
                if rows.shape[0] == tf.mesh.num_triangles:
                    pj_img = strain.rasterize_triangle_values(
                        tf.mesh, pos_end, rows[:, 2], shape)
                    fr_mod.write_pgm(os.path.join(args.out, f"pj_w{w:03d}.pgm"),
                                     np.clip(pj_img, 0.0, 1.0))
                    wrote += 1
    print(f"render: wrote {wrote} images to {args.out}")
    return 0


def cli(argv=None) -> int:
    """Run the command line; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"simulate": _cmd_simulate, "track": _cmd_track,
                "eval": _cmd_eval, "render": _cmd_render}
    try:
        return handlers[args.command](args)
    except TrackingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(cli())


if __name__ == "__main__":
    entry()
