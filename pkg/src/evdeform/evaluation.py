"""Tracking metrics over displacement tables: mean endpoint error, the
survival fraction of a sequence, and endpoint error over surviving points.

A displacement table stores, per frame and per query point, the displacement
of that point from its rest position. Predictions and ground truth align on
(frame, point_id).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoSurvivorsError, TableMismatchError

FAIL_FRACTION = 0.2  # tracking fails when MORE than this fraction of points...
FAIL_DIST = 5.0      # ...err by more than this many pixels


@dataclass
class DisplacementTable:
    """Displacements of fixed query points across the frames of a sequence."""

    frame_idx: np.ndarray  # (F,)
    times: np.ndarray      # (F,)
    point_ids: np.ndarray  # (Q,)
    base: np.ndarray       # (Q, 2) rest coordinates
    disp: np.ndarray       # (F, Q, 2)

    @property
    def num_frames(self) -> int:
        return self.frame_idx.size

    @property
    def num_points(self) -> int:
        return self.point_ids.size


def write_table(path, table: DisplacementTable) -> None:
    """CSV rows frame,t,point_id,x0,y0,ux,uy ordered by frame then point."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("frame,t,point_id,x0,y0,ux,uy\n")
        for f in range(table.num_frames):
            t = table.times[f]
            for q in range(table.num_points):
                x0, y0 = table.base[q]
                ux, uy = table.disp[f, q]
                fh.write(f"{int(table.frame_idx[f])},{t:.10g},{int(table.point_ids[q])},"
                         f"{x0:.10g},{y0:.10g},{ux:.10g},{uy:.10g}\n")


def read_table(path) -> DisplacementTable:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if raw.size == 0:
        raise TableMismatchError(f"{path}: empty displacement table")
    frames = np.unique(raw[:, 0]).astype(int)
    first = raw[raw[:, 0] == frames[0]]
    q = first.shape[0]
    if raw.shape[0] != q * frames.size:
        raise TableMismatchError(f"{path}: ragged table (frames differ in point count)")
    times = np.empty(frames.size)
    disp = np.empty((frames.size, q, 2))
    ids = first[:, 2].astype(int)
    base = first[:, 3:5].copy()
    for i, f in enumerate(frames):
        rows = raw[raw[:, 0] == f]
        if not np.array_equal(rows[:, 2].astype(int), ids):
            raise TableMismatchError(f"{path}: point ids differ between frames")
        times[i] = rows[0, 1]
        disp[i] = rows[:, 5:7]
    return DisplacementTable(frames, times, ids, base, disp)


def _check_aligned(pred: DisplacementTable, gt: DisplacementTable) -> None:
    if pred.num_frames != gt.num_frames or pred.num_points != gt.num_points:
        raise TableMismatchError(
            f"table shapes differ: {pred.num_frames}x{pred.num_points} vs "
            f"{gt.num_frames}x{gt.num_points}")
    if not np.array_equal(pred.point_ids, gt.point_ids):
        raise TableMismatchError("point ids differ between tables")
    if not np.array_equal(pred.frame_idx, gt.frame_idx):
        raise TableMismatchError("frame indices differ between tables")
    if np.abs(pred.base - gt.base).max() > 1e-6:
        raise TableMismatchError("rest coordinates differ between tables")


def _errors(pred: DisplacementTable, gt: DisplacementTable) -> np.ndarray:
    """(F, Q) per-point endpoint errors."""
    _check_aligned(pred, gt)
    return np.linalg.norm(pred.disp - gt.disp, axis=2)


def epe(pred: DisplacementTable, gt: DisplacementTable) -> float:
    """Mean L2 endpoint error over every (point, frame) pair."""
    return float(_errors(pred, gt).mean())


def failure_frame(pred: DisplacementTable, gt: DisplacementTable,
                  fail_fraction: float = FAIL_FRACTION,
                  fail_dist: float = FAIL_DIST):
    """Index of the first frame where strictly more than fail_fraction of the
    points err beyond fail_dist; None if tracking never fails."""
    err = _errors(pred, gt)
    frac = (err > fail_dist).mean(axis=1)
    failed = np.where(frac > fail_fraction)[0]
    return int(failed[0]) if failed.size else None


def survival(pred: DisplacementTable, gt: DisplacementTable,
             fail_fraction: float = FAIL_FRACTION, fail_dist: float = FAIL_DIST) -> float:
    """Fraction of the sequence completed before tracking failure (1.0 = never)."""
    fail = failure_frame(pred, gt, fail_fraction, fail_dist)
    if fail is None:
        return 1.0
    return fail / pred.num_frames


def sepe(pred: DisplacementTable, gt: DisplacementTable,
         fail_dist: float = FAIL_DIST) -> float:
    """Endpoint error restricted to surviving (point, frame) pairs.

    Surviving pairs err at most fail_dist, on frames up to and including the
    failure frame (all frames when tracking never fails); the failure frame
    itself still carries surviving points, which is what this metric scores.
    """
    err = _errors(pred, gt)
    fail = failure_frame(pred, gt, fail_dist=fail_dist)
    upto = pred.num_frames if fail is None else fail + 1
    kept = err[:upto][err[:upto] <= fail_dist]
    if kept.size == 0:
        raise NoSurvivorsError("no surviving (point, frame) pairs")
    return float(kept.mean())


@dataclass
class MetricReport:
    """Headline metrics plus the per-frame breakdown."""

    epe: float
    sepe: float
    survival: float
    failure_frame: object          # int or None
    frame_idx: np.ndarray
    times: np.ndarray
    frame_epe: np.ndarray
    frame_fail_frac: np.ndarray


def metric_report(pred: DisplacementTable, gt: DisplacementTable) -> MetricReport:
    err = _errors(pred, gt)
    fail = failure_frame(pred, gt)
    try:
        sepe_val = sepe(pred, gt)
    except NoSurvivorsError:
        sepe_val = float("nan")
    return MetricReport(
        epe=epe(pred, gt), sepe=sepe_val, survival=survival(pred, gt),
        failure_frame=fail, frame_idx=pred.frame_idx.copy(), times=pred.times.copy(),
        frame_epe=err.mean(axis=1), frame_fail_frac=(err > FAIL_DIST).mean(axis=1))


def write_report(report: MetricReport, path) -> None:
    """Human-readable report at path plus a machine CSV alongside (path + .csv)."""
    fail = "never" if report.failure_frame is None else str(report.failure_frame)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("tracking metric report\n")
        fh.write(f"epe_px        = {report.epe:.6f}\n")
        fh.write(f"sepe_px       = {report.sepe:.6f}\n")
        fh.write(f"survival      = {report.survival:.6f}\n")
        fh.write(f"failure_frame = {fail}\n")
        fh.write("\nframe,t,epe,frac_over_5px\n")
        for i in range(report.frame_idx.size):
            fh.write(f"{int(report.frame_idx[i])},{report.times[i]:.10g},"
                     f"{report.frame_epe[i]:.6f},{report.frame_fail_frac[i]:.6f}\n")
    with open(str(path) + ".csv", "w", encoding="ascii") as fh:
        fh.write("metric,value\n")
        fh.write(f"epe,{report.epe:.10g}\n")
        fh.write(f"sepe,{report.sepe:.10g}\n")
        fh.write(f"survival,{report.survival:.10g}\n")
