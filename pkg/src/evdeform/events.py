"""Event storage, equal-count binning, warping to reference times, and the
contrast objective over images of warped events (IWEs).

Each event is transported to a reference time by the barycentric weights of
its containing triangle, then splatted with a bilinear kernel into per-polarity
accumulators. The contrast objective rewards trajectories that pile warped
events onto few pixels. Gradients with respect to anchor positions are
analytic through the (piecewise-linear) kernel and the frozen association.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NoAssociatedEventsError, TooFewEventsError
from .trajectory import TrajectoryField

logger = logging.getLogger(__name__)

EPS = 1e-9  # ratio-image and contrast denominators


@dataclass
class Events:
    """Time-sorted event arrays: t seconds, x/y pixel coords, p polarity in {+1, -1}."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise ValueError("event arrays must have equal length")
        if n and (np.diff(self.t) < 0).any():
            raise ValueError("event timestamps must be non-decreasing")
        if n and not np.isin(self.p, (-1, 1)).all():
            raise ValueError("event polarity must be +1 or -1")

    def __len__(self) -> int:
        return self.t.size

    def slice(self, lo: int, hi: int) -> "Events":
        return Events(self.t[lo:hi], self.x[lo:hi], self.y[lo:hi], self.p[lo:hi])

    def select(self, mask) -> "Events":
        return Events(self.t[mask], self.x[mask], self.y[mask], self.p[mask])


def read_events_csv(path) -> Events:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if raw.size == 0:
        return Events(np.empty(0), np.empty(0), np.empty(0), np.empty(0, dtype=np.int64))
    return Events(raw[:, 0], raw[:, 1], raw[:, 2], raw[:, 3].astype(np.int64))


def write_events_csv(path, events: Events) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("t,x,y,p\n")
        for t, x, y, p in zip(events.t, events.x, events.y, events.p):
            fh.write(f"{t:.10g},{x:.10g},{y:.10g},{int(p)}\n")


@dataclass
class EventWindow:
    """Events of one window partitioned into equal-count bins.

    bin_offsets marks index ranges: bin b holds events [offsets[b], offsets[b+1]).
    bin_edges are the knot timestamps: window start, the midpoints between
    consecutive bins' boundary events, and the window end.
    """

    events: Events
    t_start: float
    t_end: float
    bin_edges: np.ndarray
    bin_offsets: np.ndarray

    @property
    def num_bins(self) -> int:
        return self.bin_edges.size - 1

    def bin_counts(self) -> np.ndarray:
        return np.diff(self.bin_offsets)


def partition_bins(events: Events, t_start: float, t_end: float, m: int) -> EventWindow:
    """Split a window's events into m bins with counts differing by at most one.

    Bins are index ranges over the time-sorted stream; the first m % N bins get
    the extra event. Interior edges sit midway between the boundary events.
    """
    if m < 1:
        raise ValueError("bin count must be at least 1")
    inside = (events.t >= t_start) & (events.t <= t_end)
    ev = events.select(inside) if not inside.all() else events
    n = len(ev)
    if n < m:
        raise TooFewEventsError(f"window holds {n} events but {m} bins were requested")
    base, rem = divmod(n, m)
    counts = np.full(m, base, dtype=np.int64)
    counts[:rem] += 1
    offsets = np.concatenate([[0], np.cumsum(counts)])
    edges = np.empty(m + 1)
    edges[0] = t_start
    edges[m] = t_end
    for b in range(1, m):
        edges[b] = 0.5 * (ev.t[offsets[b] - 1] + ev.t[offsets[b]])
    if not (np.diff(edges) > 0).all():
        raise ValueError("degenerate bin edges (events too concentrated in time)")
    return EventWindow(ev, float(t_start), float(t_end), edges, offsets)


@dataclass
class IWE:
    """Per-polarity images of warped events at one reference time.

    pos/neg hold the ratio images (weighted accumulation over kernel mass per
    pixel); acc_pos/acc_neg hold the raw weighted accumulations the contrast
    score is computed from; count is the integer touched-pixel count.
    """

    pos: np.ndarray
    neg: np.ndarray
    count: np.ndarray
    t_ref: float
    acc_pos: Optional[np.ndarray] = None
    acc_neg: Optional[np.ndarray] = None


@dataclass
class WarpPlan:
    """Everything needed to warp one event subset to one reference time.

    Association (triangle vertex indices and barycentric weights) is frozen in
    the plan; positions are supplied at evaluation time, so the warped
    coordinates are linear in the anchor positions.
    """

    t_ref: float
    vidx: np.ndarray   # (S, 3) anchor indices
    lam: np.ndarray    # (S, 3) barycentric weights
    w: np.ndarray      # (S,) temporal weights in [0, 1]
    pol: np.ndarray    # (S,) polarity as 0 (negative) / 1 (positive)
    i0: int
    i1: int
    alpha: float


def associate_window(tf: TrajectoryField, window: EventWindow):
    """(tri, lam) of every window event at its triggering time; tri -1 = outside."""
    from .trajectory import associate_points

    ev = window.events
    return associate_points(tf, np.column_stack([ev.x, ev.y]), ev.t)


def make_plan(window: EventWindow, assoc, tf: TrajectoryField, t_ref: float,
              lo: int = 0, hi: Optional[int] = None) -> Optional[WarpPlan]:
    """Build the warp plan for events [lo, hi) toward t_ref; None if none associate."""
    tri, lam = assoc
    hi = len(window.events) if hi is None else hi
    sel = np.arange(lo, hi)[tri[lo:hi] >= 0]
    if sel.size == 0:
        return None
    ev = window.events
    dt = np.abs(t_ref - ev.t[sel])
    span = dt.max()
    w = 1.0 - dt / span if span > 0 else np.ones_like(dt)
    i0, i1, alpha = tf.grid.interp(float(t_ref))
    return WarpPlan(
        t_ref=float(t_ref),
        vidx=tf.mesh.triangles[tri[sel]],
        lam=lam[sel],
        w=w,
        pol=((ev.p[sel] + 1) // 2).astype(np.int64),
        i0=int(i0), i1=int(i1), alpha=float(alpha),
    )


def warp_plan(positions, plan: WarpPlan):
    """Warped (x, y) coordinates of the plan's events for the given positions."""
    vp = (1.0 - plan.alpha) * positions[plan.vidx, plan.i0] \
        + plan.alpha * positions[plan.vidx, plan.i1]  # (S, 3, 2)
    warped = np.einsum("sk,skc->sc", plan.lam, vp)
    return warped[:, 0], warped[:, 1]


def scatter_plan_grad(plan: WarpPlan, dxw, dyw, grad_out) -> None:
    """Accumulate d(objective)/d(positions) given gradients at the warped coords."""
    n, k, _ = grad_out.shape
    flat = grad_out.reshape(-1)
    d = np.stack([dxw, dyw], axis=1)  # (S, 2)
    for knot, coef in ((plan.i0, 1.0 - plan.alpha), (plan.i1, plan.alpha)):
        if coef == 0.0:
            continue
        base = (plan.vidx * k + knot) * 2  # (S, 3)
        for c in range(2):
            idx = (base + c).ravel()
            wgt = (coef * plan.lam * d[:, c][:, None]).ravel()
            flat += np.bincount(idx, weights=wgt, minlength=flat.size)


def _stencil(xw, yw, height, width):
    """2x2 bilinear splat stencil around each warped coordinate.

    Returns flat pixel indices (4, S), kernel weights kx/ky and their
    derivatives w.r.t. the warped coordinate (subgradient 0 exactly at kernel
    kinks), and the in-bounds mask.
    """
    x0 = np.floor(xw)
    y0 = np.floor(yw)
    fx = xw - x0
    fy = yw - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    kx1 = 1.0 - fx
    ky1 = 1.0 - fy
    dkx = np.where(fx == 0.0, 0.0, 1.0)
    dky = np.where(fy == 0.0, 0.0, 1.0)
    px = np.stack([x0, x0 + 1, x0, x0 + 1])
    py = np.stack([y0, y0, y0 + 1, y0 + 1])
    kx = np.stack([kx1, fx, kx1, fx])
    ky = np.stack([ky1, ky1, fy, fy])
    dkxs = np.stack([-dkx, dkx, -dkx, dkx])
    dkys = np.stack([-dky, -dky, dky, dky])
    ok = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    flat = np.where(ok, py * width + px, 0)
    return flat, kx, ky, dkxs, dkys, ok


def _accumulate(xw, yw, w, pol, shape):
    """Splat events into per-polarity numerator/denominator images and the count."""
    h, wd = shape
    flat, kx, ky, _, _, ok = _stencil(xw, yw, h, wd)
    kk = kx * ky * ok
    num = np.zeros((2, h * wd))
    den = np.zeros((2, h * wd))
    count = np.zeros(h * wd, dtype=np.int64)
    for s in (0, 1):
        sel = pol == s
        if not sel.any():
            continue
        fi = flat[:, sel].ravel()
        kv = kk[:, sel]
        num[s] = np.bincount(fi, weights=(kv * w[sel]).ravel(), minlength=h * wd)
        den[s] = np.bincount(fi, weights=kv.ravel(), minlength=h * wd)
    touched = kk > 0
    count = np.bincount(flat[touched], minlength=h * wd)
    return num, den, count


def build_iwe(window: EventWindow, tf: TrajectoryField, t_ref: float,
              bins=None, assoc=None, shape=None) -> IWE:
    """Warp an event subset to t_ref and accumulate the per-polarity ratio images.

    bins selects a half-open bin range (b0, b1); None takes the whole window.
    shape is (H, W); inferred from the event extent when omitted.
    """
    if assoc is None:
        assoc = associate_window(tf, window)
    if bins is None:
        lo, hi = 0, len(window.events)
    else:
        lo, hi = window.bin_offsets[bins[0]], window.bin_offsets[bins[1]]
    if shape is None:
        ev = window.events
        shape = (int(np.ceil(ev.y.max())) + 2, int(np.ceil(ev.x.max())) + 2)
    plan = make_plan(window, assoc, tf, t_ref, lo, hi)
    if plan is None:
        raise NoAssociatedEventsError(
            f"no events of bins [{lo}, {hi}) associate with the mesh")
    xw, yw = warp_plan(tf.positions, plan)
    num, den, count = _accumulate(xw, yw, plan.w, plan.pol, shape)
    t = num / (den + EPS)
    h, wd = shape
    return IWE(pos=t[1].reshape(h, wd), neg=t[0].reshape(h, wd),
               count=count.reshape(h, wd), t_ref=float(t_ref),
               acc_pos=num[1].reshape(h, wd), acc_neg=num[0].reshape(h, wd))


def contrast(iwe: IWE) -> float:
    """Sharpness of an IWE: summed squared per-polarity accumulations over the
    number of touched pixels. Piling warped events onto few pixels raises it,
    so the score peaks when the trajectories match the true motion."""
    active = int((iwe.count > 0).sum())
    s = float((iwe.acc_pos ** 2).sum() + (iwe.acc_neg ** 2).sum())
    return s / (active + EPS)


def contrast_of_plan(positions, plan: WarpPlan, shape, want_grad: bool = False,
                     scale: float = 1.0):
    """Contrast of the plan's IWE; optionally also d(contrast)/d(warped coords).

    scale > 1 evaluates on a coarser pixel grid (kernel support grows with
    scale), which widens the basin for early optimization stages. The
    active-pixel count is piecewise constant in the positions and is treated
    as a constant by the gradient.
    """
    h, wd = _scaled_shape(shape, scale)
    xw, yw = warp_plan(positions, plan)
    if scale != 1.0:
        xw = xw / scale
        yw = yw / scale
    flat, kx, ky, dkx, dky, ok = _stencil(xw, yw, h, wd)
    kk = kx * ky * ok
    num = np.zeros((2, h * wd))
    sel = [plan.pol == 0, plan.pol == 1]
    for s in (0, 1):
        if not sel[s].any():
            continue
        fi = flat[:, sel[s]].ravel()
        kv = kk[:, sel[s]]
        num[s] = np.bincount(fi, weights=(kv * plan.w[sel[s]]).ravel(), minlength=h * wd)
    active = int((np.bincount(flat[kk > 0], minlength=h * wd) > 0).sum())
    value = float((num ** 2).sum() / (active + EPS))
    if not want_grad:
        return value, None, None
    gnum = 2.0 * num / (active + EPS)
    # gather per event-corner, chain through the kernel
    gnum_ev = np.empty_like(kk)
    for s in (0, 1):
        if not sel[s].any():
            continue
        gnum_ev[:, sel[s]] = gnum[s][flat[:, sel[s]]]
    common = gnum_ev * plan.w[None, :] * ok
    dxw = (common * dkx * ky).sum(axis=0) / scale
    dyw = (common * kx * dky).sum(axis=0) / scale
    return value, dxw, dyw


def _scaled_shape(shape, scale):
    if scale == 1.0:
        return shape
    return (int(np.ceil(shape[0] / scale)) + 1, int(np.ceil(shape[1] / scale)) + 1)


def timestamp_loss_of_plan(positions, plan: WarpPlan, shape, want_grad: bool = False,
                           scale: float = 1.0):
    """Squared per-pixel ratio images (weighted accumulation over kernel mass),
    summed and normalized by the touched-pixel count.

    Misaligned trajectories leave pixels whose events cluster near the
    reference time (ratio near 1), so the statistic drops as the warp
    approaches the true motion; the optimizer minimizes it. Unlike a raw
    sharpness energy it gains nothing from piling events up, which keeps free
    anchors from collapsing the mesh. scale coarsens the pixel grid as in
    contrast_of_plan.
    """
    h, wd = _scaled_shape(shape, scale)
    xw, yw = warp_plan(positions, plan)
    if scale != 1.0:
        xw = xw / scale
        yw = yw / scale
    flat, kx, ky, dkx, dky, ok = _stencil(xw, yw, h, wd)
    kk = kx * ky * ok
    num = np.zeros((2, h * wd))
    den = np.zeros((2, h * wd))
    sel = [plan.pol == 0, plan.pol == 1]
    for s in (0, 1):
        if not sel[s].any():
            continue
        fi = flat[:, sel[s]].ravel()
        kv = kk[:, sel[s]]
        num[s] = np.bincount(fi, weights=(kv * plan.w[sel[s]]).ravel(), minlength=h * wd)
        den[s] = np.bincount(fi, weights=kv.ravel(), minlength=h * wd)
    active = int((np.bincount(flat[kk > 0], minlength=h * wd) > 0).sum())
    denom = den + EPS
    t = num / denom
    value = float((t ** 2).sum() / (active + EPS))
    if not want_grad:
        return value, None, None
    gnum = 2.0 * t / (denom * (active + EPS))
    gden = -2.0 * t ** 2 / (denom * (active + EPS))
    gnum_ev = np.empty_like(kk)
    gden_ev = np.empty_like(kk)
    for s in (0, 1):
        if not sel[s].any():
            continue
        gnum_ev[:, sel[s]] = gnum[s][flat[:, sel[s]]]
        gden_ev[:, sel[s]] = gden[s][flat[:, sel[s]]]
    common = (gnum_ev * plan.w[None, :] + gden_ev) * ok
    dxw = (common * dkx * ky).sum(axis=0) / scale
    dyw = (common * kx * dky).sum(axis=0) / scale
    return value, dxw, dyw


def _knot_bin_range(window: EventWindow, knot: int):
    """Index range of the bins adjacent to a knot, clipped at the window ends."""
    m = window.num_bins
    lo = window.bin_offsets[max(knot - 1, 0)]
    hi = window.bin_offsets[min(knot + 1, m)]
    return int(lo), int(hi)


def warp1_plans(window: EventWindow, assoc, tf: TrajectoryField):
    """One plan per knot, warping each knot's adjacent bins to it (None entries allowed)."""
    return [make_plan(window, assoc, tf, tf.grid.knots[i], *_knot_bin_range(window, i))
            for i in range(tf.grid.num_knots)]


def warp2_plans(window: EventWindow, assoc, tf: TrajectoryField, t_a: float, t_b: float):
    """Two whole-window plans toward the frame timestamps at the window ends."""
    return [make_plan(window, assoc, tf, t) for t in (t_a, t_b)]


def _mean_plan_contrast(positions, plans, shape) -> float:
    vals = []
    for plan in plans:
        if plan is None:
            logger.warning("IWE with no associated events; contributing 0 to the mean")
            vals.append(0.0)
        else:
            vals.append(contrast_of_plan(positions, plan, shape)[0])
    return float(np.mean(vals)) if vals else 0.0


def warp1_objective(window: EventWindow, tf: TrajectoryField, shape, assoc=None) -> float:
    """Mean contrast over the per-knot IWEs built from neighbouring bins."""
    if assoc is None:
        assoc = associate_window(tf, window)
    return _mean_plan_contrast(tf.positions, warp1_plans(window, assoc, tf), shape)


def warp2_objective(window: EventWindow, tf: TrajectoryField, t_a: float, t_b: float,
                    shape, assoc=None) -> float:
    """Mean contrast of the two whole-window IWEs at the frame timestamps."""
    if assoc is None:
        assoc = associate_window(tf, window)
    return _mean_plan_contrast(tf.positions, warp2_plans(window, assoc, tf, t_a, t_b), shape)
