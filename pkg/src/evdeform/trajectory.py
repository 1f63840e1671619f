"""Piecewise-linear anchor trajectories over a window's time grid.

A trajectory field stores one (x, y) position per anchor and per time knot;
positions between knots interpolate linearly. Arbitrary material points move
with the mesh through barycentric weights, so a globally affine deformation is
reproduced exactly at every interior point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import OutsideMeshError, TimeOutOfWindowError
from .geometry import SimplicialMesh


@dataclass
class TimeGrid:
    """Strictly increasing knot timestamps spanning one window."""

    knots: np.ndarray

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        if self.knots.ndim != 1 or self.knots.size < 2:
            raise ValueError("time grid needs at least two knots")
        if not (np.diff(self.knots) > 0).all():
            raise ValueError("time grid knots must be strictly increasing")

    @property
    def num_knots(self) -> int:
        return self.knots.size

    def interp(self, t):
        """(i0, i1, alpha) so that p(t) = (1 - alpha) p[i0] + alpha p[i1].

        Exact at knots. Raises TimeOutOfWindowError for t outside the grid.
        """
        ts = np.asarray(t, dtype=float)
        k = self.knots
        if (ts < k[0] - 1e-12).any() or (ts > k[-1] + 1e-12).any():
            raise TimeOutOfWindowError(
                f"time {float(np.min(ts)):.6g}..{float(np.max(ts)):.6g} outside "
                f"window [{k[0]:.6g}, {k[-1]:.6g}]")
        i1 = np.clip(np.searchsorted(k, ts, side="right"), 1, k.size - 1)
        i0 = i1 - 1
        alpha = np.clip((ts - k[i0]) / (k[i1] - k[i0]), 0.0, 1.0)
        return i0, i1, alpha


@dataclass
class TrajectoryField:
    """Anchor positions on a time grid, tied to the mesh they deform.

    positions has shape (num_anchors, num_knots, 2).
    """

    positions: np.ndarray
    grid: TimeGrid
    mesh: SimplicialMesh

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        expected = (self.mesh.num_anchors, self.grid.num_knots, 2)
        if self.positions.shape != expected:
            raise ValueError(f"positions shape {self.positions.shape} != {expected}")
        if not np.isfinite(self.positions).all():
            raise ValueError("trajectory positions must be finite")

    def copy(self) -> "TrajectoryField":
        return TrajectoryField(self.positions.copy(), self.grid, self.mesh)

    def positions_at(self, t) -> np.ndarray:
        """(N, 2) anchor positions at time t."""
        i0, i1, a = self.grid.interp(t)
        return (1.0 - a) * self.positions[:, i0] + a * self.positions[:, i1]


def constant_field(mesh: SimplicialMesh, grid: TimeGrid, anchors=None) -> TrajectoryField:
    """Field whose anchors sit still at the given positions (rest by default)."""
    base = mesh.anchors if anchors is None else np.asarray(anchors, dtype=float)
    pos = np.repeat(base[:, None, :], grid.num_knots, axis=1)
    return TrajectoryField(pos, grid, mesh)


def position_at(tf: TrajectoryField, anchor: int, t: float) -> np.ndarray:
    """Position of one anchor at time t (linear between knots, exact at knots)."""
    i0, i1, a = tf.grid.interp(float(t))
    return (1.0 - a) * tf.positions[anchor, i0] + a * tf.positions[anchor, i1]


def locate_and_weights(tf: TrajectoryField, p, t: float):
    """Containing triangle and barycentric weights of p in the deformed mesh at time t."""
    verts = tf.mesh.triangle_vertices(tf.positions_at(float(t)))
    tri, lam = geometry.locate_points(np.asarray(p, dtype=float)[None, :], verts)
    if tri[0] < 0:
        raise OutsideMeshError(f"point {tuple(np.asarray(p, float))} outside mesh at t={t:.6g}")
    return int(tri[0]), lam[0]


def associate_points(tf: TrajectoryField, xy, ts):
    """Vectorised point location at per-point times.

    Parameters:
        xy: (P, 2) coordinates.
        ts: (P,) times, each within the grid.

    Returns (tri, lam): tri is -1 for points outside the mesh at their time.
    Triangles are scanned in index order, so boundary ties resolve to the
    lowest triangle index.
    """
    pts = np.asarray(xy, dtype=float)
    i0, i1, a = tf.grid.interp(np.asarray(ts, dtype=float))
    n = pts.shape[0]
    tri_idx = np.full(n, -1, dtype=np.int64)
    lam = np.zeros((n, 3))
    todo = np.arange(n)
    pos = tf.positions
    for t, tri in enumerate(tf.mesh.triangles):
        if todo.size == 0:
            break
        vk = pos[tri]  # (3, K, 2), all knots
        lo = vk.min(axis=(0, 1)) - 1e-9
        hi = vk.max(axis=(0, 1)) + 1e-9
        p = pts[todo]
        box = (p[:, 0] >= lo[0]) & (p[:, 0] <= hi[0]) & (p[:, 1] >= lo[1]) & (p[:, 1] <= hi[1])
        cand = todo[box]
        if cand.size == 0:
            continue
        ac = a[cand]
        verts = (1.0 - ac)[None, :, None] * vk[:, i0[cand]] + ac[None, :, None] * vk[:, i1[cand]]
        verts = np.transpose(verts, (1, 0, 2))  # (C, 3, 2)
        c = geometry._edge_dets(verts, pts[cand])
        inside = ~((c.max(axis=1) > 0.0) & (c.min(axis=1) < 0.0))
        hit = cand[inside]
        if hit.size:
            tri_idx[hit] = t
            lam[hit] = geometry._cramer_weights(verts[inside], pts[hit])
            todo = np.setdiff1d(todo, hit, assume_unique=True)
    return tri_idx, lam


def warp_point(tf: TrajectoryField, tri: int, weights, t_ref: float) -> np.ndarray:
    """Transport a point to t_ref as the weighted combination of its triangle's anchors."""
    w = np.asarray(weights, dtype=float)
    verts = tf.mesh.triangles[tri]
    i0, i1, a = tf.grid.interp(float(t_ref))
    vpos = (1.0 - a) * tf.positions[verts, i0] + a * tf.positions[verts, i1]
    return w @ vpos


def displacement_field(tf: TrajectoryField, queries, t: float) -> np.ndarray:
    """Displacements u(X, t) of rest-coordinate query points.

    Queries are associated against the rest mesh, then carried to time t by
    their barycentric weights.
    """
    pts = np.atleast_2d(np.asarray(queries, dtype=float))
    tri, lam = geometry.locate_points(pts, tf.mesh.triangle_vertices())
    bad = np.where(tri < 0)[0]
    if bad.size:
        raise OutsideMeshError(
            f"{bad.size} query point(s) outside the rest mesh (first index {bad[0]})")
    pos_t = tf.positions_at(float(t))
    warped = np.einsum("pk,pkc->pc", lam, pos_t[tf.mesh.triangles[tri]])
    return warped - pts


def subdivide_field(tf: TrajectoryField, knot0_override=None) -> TrajectoryField:
    """Subdivide the mesh and interpolate trajectory state onto the new anchors.

    New midpoint anchors take the mean of their parent anchors' positions at
    every knot, which reproduces the parent field exactly wherever it is
    affine. If knot0_override is given (one row per appended anchor), the new
    anchors instead start from those positions at the first knot and inherit
    the parents' mean per-knot motion on top, preserving an externally tracked
    state at the window start.
    """
    mesh2 = geometry.subdivide(tf.mesh)
    pa = mesh2.midpoint_parents
    parent_pos = 0.5 * (tf.positions[pa[:, 0]] + tf.positions[pa[:, 1]])  # (M, K, 2)
    if knot0_override is None:
        child = parent_pos
    else:
        start = np.asarray(knot0_override, dtype=float)
        if start.shape != (pa.shape[0], 2):
            raise ValueError(f"knot0_override must have shape {(pa.shape[0], 2)}")
        child = start[:, None, :] + (parent_pos - parent_pos[:, :1, :])
    return TrajectoryField(np.concatenate([tf.positions, child]), tf.grid, mesh2)


def write_trajectory_csv(path, fields) -> None:
    """Dump per-window trajectories as CSV rows window,anchor,knot,t,x,y."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("window,anchor,knot,t,x,y\n")
        for w, tf in enumerate(fields):
            knots = tf.grid.knots
            for j in range(tf.mesh.num_anchors):
                for k in range(knots.size):
                    x, y = tf.positions[j, k]
                    fh.write(f"{w},{j},{k},{knots[k]:.10g},{x:.10g},{y:.10g}\n")


def read_trajectory_csv(path):
    """Inverse of write_trajectory_csv; returns {window: (knots, positions)}."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = {}
    for w in np.unique(raw[:, 0]).astype(int):
        rows = raw[raw[:, 0] == w]
        anchors = int(rows[:, 1].max()) + 1
        knots_n = int(rows[:, 2].max()) + 1
        knots = np.zeros(knots_n)
        pos = np.zeros((anchors, knots_n, 2))
        j = rows[:, 1].astype(int)
        k = rows[:, 2].astype(int)
        knots[k] = rows[:, 3]
        pos[j, k, 0] = rows[:, 4]
        pos[j, k, 1] = rows[:, 5]
        out[int(w)] = (knots, pos)
    return out
