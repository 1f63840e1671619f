"""The tracking pipeline for one time window and for whole sequences:
a rigid pre-stage, coarse-to-fine anchor optimization across mesh subdivisions,
per-triangle convergence assessment, and neighbourhood-greedy rounds that
freeze converged regions and pull their neighbours along under a strain
continuity penalty.

The minimized loss is -(lam1 (warp1 + warp2) + lam2 f_cc) + lam3 f_s with
stage-dependent weights. Anchor positions at the first knot are the hand-off
from the previous window and are never optimized, which keeps trajectories
bit-exactly continuous across windows.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields as dc_fields
from typing import Optional

import numpy as np

from . import events as ev_mod
from . import frames as fr_mod
from . import geometry, strain, trajectory
from .errors import ConfigError, NoTextureError, RigidStageDivergedError, TrackingError
from .events import EventWindow, partition_bins
from .frames import Frame, sample_grid
from .ioutil import read_kv, write_kv
from .trajectory import TimeGrid, TrajectoryField

logger = logging.getLogger(__name__)

STAGES = ("rigid", "coarse", "fine", "greedy")
DIVERGENCE_STREAK = 50  # consecutive loss increases before the rigid stage aborts


@dataclass
class TrackerConfig:
    """Tunable knobs of the tracker; all keys may appear in a flat config file."""

    m_bins: int = 4
    max_levels: int = 2
    lambda1_rigid: float = 0.3
    lambda2_rigid: float = 1.0
    lambda1_coarse: float = 0.3
    lambda2_coarse: float = 1.0
    lambda1_fine: float = 0.2
    lambda2_fine: float = 1.0
    lambda3_greedy: float = 2.0
    extrapolate_init: int = 1
    step: float = 0.15
    beta1: float = 0.9
    beta2: float = 0.999
    iters_rigid: int = 150
    iters_level: int = 200
    iters_greedy: int = 100
    outlier_k: float = 3.0
    outlier_tau: float = 0.5
    greedy_rounds: int = 5
    refresh_period: int = 10
    samples_per_edge: int = 8
    max_window_events: int = 40000
    rigid_search_radius: float = 12.0
    rigid_search_step: float = 4.0
    roi: Optional[tuple] = None
    mesh_nx: int = 2
    mesh_ny: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.m_bins < 1:
            raise ConfigError("m_bins must be at least 1")
        if self.outlier_k <= 1:
            raise ConfigError("outlier_k must exceed 1")
        if not 0 < self.outlier_tau < 1:
            raise ConfigError("outlier_tau must lie in (0, 1)")
        for name in ("lambda1_rigid", "lambda2_rigid", "lambda1_coarse", "lambda2_coarse",
                     "lambda1_fine", "lambda2_fine", "lambda3_greedy"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.max_levels < 0 or self.refresh_period < 1:
            raise ConfigError("max_levels must be >= 0 and refresh_period >= 1")


def load_config(path) -> TrackerConfig:
    """Read a flat key = value tracker config; unknown keys are rejected."""
    kv = read_kv(path)
    known = {f.name: f.type for f in dc_fields(TrackerConfig)}
    out = {}
    for key, val in kv.items():
        if key not in known:
            raise ConfigError(f"unknown tracker config key {key!r}")
        if key == "roi":
            out[key] = tuple(float(v) for v in val.split(","))
        elif key in ("m_bins", "max_levels", "iters_rigid", "iters_level", "iters_greedy",
                     "greedy_rounds", "refresh_period", "samples_per_edge", "mesh_nx",
                     "mesh_ny", "seed", "extrapolate_init", "max_window_events"):
            out[key] = int(val)
        else:
            out[key] = float(val)
    return TrackerConfig(**out)


def save_config(cfg: TrackerConfig, path) -> None:
    kv = {}
    for f in dc_fields(TrackerConfig):
        val = getattr(cfg, f.name)
        if val is None:
            continue
        if f.name == "roi":
            val = ",".join(f"{v:.10g}" for v in val)
        kv[f.name] = val
    write_kv(path, kv)


def stage_weights(cfg: TrackerConfig, stage: str):
    """(lam1, lam2, lam3) loss weights for one optimization stage."""
    if stage == "rigid":
        return cfg.lambda1_rigid, cfg.lambda2_rigid, 0.0
    if stage == "coarse":
        return cfg.lambda1_coarse, cfg.lambda2_coarse, 0.0
    if stage == "fine":
        return cfg.lambda1_fine, cfg.lambda2_fine, 0.0
    if stage == "greedy":
        return cfg.lambda1_fine, cfg.lambda2_fine, cfg.lambda3_greedy
    raise ValueError(f"unknown stage {stage!r}")


class Adam:
    """First/second-moment adaptive gradient step with bias correction."""

    def __init__(self, shape, step, beta1: float, beta2: float, eps: float = 1e-8):
        self.step = step
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def update(self, params, grad, scale: float = 1.0):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad ** 2
        mh = self.m / (1.0 - self.beta1 ** self.t)
        vh = self.v / (1.0 - self.beta2 ** self.t)
        return params - (scale * self.step) * mh / (np.sqrt(vh) + self.eps)


def _step_decay(it: int, iters: int) -> float:
    """Step-size schedule: short linear warmup, then cosine decay to 10%.

    The warmup matters because the adaptive update is scale-free: at the first
    iteration every coordinate would move by the full step even where the
    gradient is pure sampling noise, which can wreck an already-good state.
    """
    warmup = min(1.0, (it + 1) / max(3, iters // 10))
    decay = 0.1 + 0.45 * (1.0 + np.cos(np.pi * it / max(iters - 1, 1)))
    return warmup * decay


class ObjectiveContext:
    """One stage's objective with frozen event association.

    refresh() re-associates every window event at its triggering time against
    the supplied positions; between refreshes the association (triangle and
    barycentric weights per event) stays fixed, so gradients are exact for the
    evaluated objective.

    event_term picks the statistic the event side contributes:
      "timestamp"  the per-pixel ratio statistic, added to the loss (what the
                   stages minimize; indifferent to event pile-up, so it cannot
                   reward collapsing the mesh)
      "sharpness"  the accumulation-energy contrast, subtracted from the loss
                   (the reported objective; maximal at the true motion)
    """

    def __init__(self, tf: TrajectoryField, window: Optional[EventWindow], frames,
                 weights, cfg: TrackerConfig, shape, event_term: str = "timestamp",
                 event_scale: float = 1.0):
        if event_term not in ("timestamp", "sharpness"):
            raise ValueError(f"unknown event term {event_term!r}")
        self.grid = tf.grid
        self.mesh = tf.mesh
        self.window = window
        self.frames = frames
        self.lam1, self.lam2, self.lam3 = weights
        self.shape = shape
        self.event_term = event_term
        self.event_scale = float(event_scale)
        self.bary = sample_grid(cfg.samples_per_edge)
        self.strain_ctx = strain.MeshStrainContext(self.mesh) if self.lam3 > 0 else None
        self.plans1 = []
        self.plans2 = []
        self.event_weight = 0.0
        self._warned = False
        self.refresh(tf.positions)

    def _field(self, positions) -> TrajectoryField:
        return TrajectoryField(positions, self.grid, self.mesh)

    def refresh(self, positions) -> None:
        if self.lam1 <= 0 or self.window is None or len(self.window.events) == 0:
            self.plans1, self.plans2 = [], []
            return
        tf = self._field(positions)
        assoc = ev_mod.associate_window(tf, self.window)
        n_assoc = int((assoc[0] >= 0).sum())
        if n_assoc == 0:
            if not self._warned:
                logger.warning("no window events associate with the mesh; "
                               "event terms contribute 0")
                self._warned = True
            self.plans1 = [None] * self.grid.num_knots
            self.plans2 = [None, None]
            self.event_weight = 0.0
            return
        # a sparse window (noise-dominated) carries little motion evidence;
        # shrink the event terms rather than let them steer the stage
        self.event_weight = min(1.0, n_assoc / 2000.0)
        self.plans1 = ev_mod.warp1_plans(self.window, assoc, tf)
        self.plans2 = ev_mod.warp2_plans(self.window, assoc, tf,
                                         self.grid.knots[0], self.grid.knots[-1])

    def _event_values(self, positions, plans, grad, want_grad):
        if not plans:
            return 0.0
        if self.event_term == "timestamp":
            term_fn, sign, wt = ev_mod.timestamp_loss_of_plan, 1.0, self.event_weight
        else:
            term_fn, sign, wt = ev_mod.contrast_of_plan, -1.0, 1.0
        scale = sign * self.lam1 * wt / len(plans)
        vals = []
        for plan in plans:
            if plan is None:
                vals.append(0.0)
                continue
            v, dxw, dyw = term_fn(positions, plan, self.shape, want_grad,
                                  scale=self.event_scale)
            vals.append(v)
            if want_grad:
                ev_mod.scatter_plan_grad(plan, scale * dxw, scale * dyw, grad)
        return float(np.mean(vals))

    def value_grad(self, positions, want_grad: bool = True):
        """Loss (and its gradient w.r.t. every anchor/knot coordinate)."""
        grad = np.zeros_like(positions) if want_grad else None
        loss = 0.0
        if self.lam1 > 0:
            w1 = self._event_values(positions, self.plans1, grad, want_grad)
            w2 = self._event_values(positions, self.plans2, grad, want_grad)
            if self.event_term == "timestamp":
                loss += self.lam1 * self.event_weight * (w1 + w2)
            else:
                loss -= self.lam1 * (w1 + w2)
        if self.lam2 > 0:
            try:
                fcc, gcc = fr_mod.frame_objective_grad(
                    self._field(positions), self.frames, self.bary, want_grad)
            except NoTextureError:
                if not self._warned:
                    logger.warning("frame term skipped: no textured triangles")
                    self._warned = True
                fcc, gcc = 0.0, None
            loss -= self.lam2 * fcc
            if want_grad and gcc is not None:
                grad -= self.lam2 * gcc
        if self.lam3 > 0:
            if want_grad:
                fs, gs = self.strain_ctx.continuity_grad(positions[:, -1])
                grad[:, -1] += self.lam3 * gs
            else:
                fs = self.strain_ctx.continuity(positions[:, -1])
            loss += self.lam3 * fs
        return loss, grad

    def value(self, positions) -> float:
        return self.value_grad(positions, want_grad=False)[0]


def _blurred(frames, passes: int = 2) -> tuple:
    """Smoothed copies of the frame triple; widens the correlation basin for
    the early stages at the cost of fine detail."""
    return tuple(Frame(fr_mod.blur(f.pixels, passes), f.t) for f in frames)


def objective_context(tf: TrajectoryField, window, frames, cfg: TrackerConfig,
                      stage: str, event_term: str = "timestamp") -> ObjectiveContext:
    """Public hook for evaluating the composite loss with frozen association."""
    shape = frames[0].shape
    return ObjectiveContext(tf, window, frames, stage_weights(cfg, stage), cfg, shape,
                            event_term=event_term)


def total_objective(tf: TrajectoryField, window, frames, cfg: TrackerConfig,
                    stage: str) -> float:
    """Reported composite loss -(lam1 (warp1 + warp2) + lam2 f_cc) + lam3 f_s.

    Built on the contrast means, so lower is better and the true motion scores
    below the identity. The stage optimizer minimizes the variant whose event
    term is the timestamp statistic (see ObjectiveContext).
    """
    return objective_context(tf, window, frames, cfg, stage,
                             event_term="sharpness").value(tf.positions)


class DiagLog:
    """Collects per-iteration losses and per-window convergence summaries."""

    def __init__(self):
        self.loss_rows = []   # (window, stage, iter, loss)
        self.pj_rows = []     # (window, triangle, p, converged)
        self.window = 0

    def loss(self, stage, it, value):
        self.loss_rows.append((self.window, stage, it, value))

    def pj(self, report):
        for t in range(report.p_frac.size):
            self.pj_rows.append((self.window, t, report.p_frac[t],
                                 int(report.converged[t])))


def _run_stage(obj: ObjectiveContext, positions, free_mask, iters: int,
               cfg: TrackerConfig, stage_name: str, diag: Optional[DiagLog] = None,
               divergence_streak: Optional[int] = None):
    """Adam loop with periodic association refresh and a final revert safeguard.

    Returns (positions, reverted). If the final loss (under the final
    association) exceeds the initial loss, the stage-initial state is restored
    so a failed stage cannot make things worse.
    """
    start = positions.copy()
    adam = Adam(positions.shape, cfg.step, cfg.beta1, cfg.beta2)
    prev_loss = None
    streak = 0
    best_loss = np.inf
    best = positions.copy()
    for it in range(iters):
        if it % cfg.refresh_period == 0:
            obj.refresh(positions)
        loss, grad = obj.value_grad(positions)
        if diag is not None:
            diag.loss(stage_name, it, loss)
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            logger.warning("%s: non-finite loss/gradient at iter %d; aborting stage",
                           stage_name, it)
            return start, True
        if loss < best_loss:
            best_loss = loss
            best = positions.copy()
        if divergence_streak is not None:
            if prev_loss is not None and loss > prev_loss:
                streak += 1
                if streak >= divergence_streak:
                    raise RigidStageDivergedError(
                        f"loss increased {streak} consecutive iterations")
            else:
                streak = 0
            prev_loss = loss
        grad[~free_mask] = 0.0
        positions = adam.update(positions, grad, _step_decay(it, iters))
    obj.refresh(positions)
    final_loss = obj.value(positions)
    if obj.value(best) < final_loss:
        positions = best
        final_loss = obj.value(best)
    init_loss = obj.value(start)
    if not np.isfinite(final_loss) or final_loss > init_loss:
        logger.warning("%s: final loss %.6g worse than initial %.6g; reverting",
                       stage_name, final_loss, init_loss)
        return start, True
    if obj.lam2 > 0 and _frame_score(obj, positions) < _frame_score(obj, start) - 0.02:
        # the event term can overfit sparse/noisy streams; never accept a
        # stage that made the frame correlation materially worse
        logger.warning("%s: frame correlation degraded; reverting", stage_name)
        return start, True
    return positions, False


def _frame_score(obj: ObjectiveContext, positions) -> float:
    """Frame-correlation part of a context's loss, for stage quality gating."""
    try:
        value, _ = fr_mod.frame_objective_grad(obj._field(positions), obj.frames,
                                               obj.bary, want_grad=False)
    except NoTextureError:
        return 0.0
    return value


def _free_mask(n_anchors: int, n_knots: int, free_anchors=None) -> np.ndarray:
    """Optimizable coordinates: all knots but the first, optionally only some anchors."""
    mask = np.zeros((n_anchors, n_knots, 2), dtype=bool)
    if free_anchors is None:
        mask[:, 1:, :] = True
    else:
        mask[free_anchors, 1:, :] = True
    return mask


def rigid_stage(tf: TrajectoryField, window: EventWindow, frames,
                cfg: TrackerConfig, diag: Optional[DiagLog] = None) -> TrajectoryField:
    """Per-knot rotation + translation about the start centroid, fit to the window.

    Three parameters per knot (angle, tx, ty); the first knot stays at the
    hand-off state. Anchors are overwritten with the transformed positions.
    """
    p0 = tf.positions[:, 0].copy()
    center = p0.mean(axis=0)
    d = p0 - center
    r_max = max(float(np.linalg.norm(d, axis=1).max()), 1.0)
    n_knots = tf.grid.num_knots
    # start from the mean per-knot translation of the incoming field, so an
    # extrapolated initial guess carries into the rigid parameters
    phi = np.zeros((n_knots, 3))
    phi[:, 1:] = (tf.positions - p0[:, None, :]).mean(axis=0)
    phi[0] = 0.0
    phi0 = phi.copy()
    shape = frames[0].shape

    def positions_of(par):
        cos = np.cos(par[:, 0])
        sin = np.sin(par[:, 0])
        pos = np.empty((p0.shape[0], n_knots, 2))
        pos[:, :, 0] = center[0] + d[:, 0, None] * cos - d[:, 1, None] * sin + par[:, 1]
        pos[:, :, 1] = center[1] + d[:, 0, None] * sin + d[:, 1, None] * cos + par[:, 2]
        return pos

    steps = np.array([cfg.step / r_max, cfg.step, cfg.step])
    lam1, lam2, _ = stage_weights(cfg, "rigid")
    # pyramid over (event weight, IWE scale, frame blur): the first gradient
    # phase is frame-only because the per-knot reduction sums raw gradient
    # magnitudes and the event statistic points the wrong way until the state
    # is within a few px of the truth
    phases = ((0.0, 1.0, 4), (lam1, 2.0, 2), (lam1, 1.0, 1))
    iters = [cfg.iters_rigid // len(phases)] * len(phases)
    iters[-1] += cfg.iters_rigid - sum(iters)
    if cfg.rigid_search_radius > 0:
        # the event statistic has a barrier a few px out and is incomparable
        # across candidate associations, so the exhaustive window-translation
        # sweep scores the frame correlation alone (template matching); the
        # gradient phases refine from inside the basin it lands in
        search_obj = ObjectiveContext(tf, window, _blurred(frames, 4),
                                      (0.0, lam2, 0.0), cfg, shape)
        ramp = (tf.grid.knots - tf.grid.knots[0]) / (tf.grid.knots[-1] - tf.grid.knots[0])
        offsets = np.arange(-cfg.rigid_search_radius, cfg.rigid_search_radius + 1e-9,
                            cfg.rigid_search_step)
        best_v = np.inf
        best_phi = phi
        for dx in offsets:
            for dy in offsets:
                cand = phi.copy()
                cand[:, 1] += ramp * dx
                cand[:, 2] += ramp * dy
                try:
                    v = search_obj.value(positions_of(cand))
                except NoTextureError:
                    continue
                if v < best_v:
                    best_v = v
                    best_phi = cand
        phi = best_phi
    positions = positions_of(phi)
    obj = None
    for (lam1_phase, ev_scale, passes), n_iters in zip(phases, iters):
        obj = ObjectiveContext(tf, window, _blurred(frames, passes),
                               (lam1_phase, lam2, 0.0), cfg, shape,
                               event_scale=ev_scale)
        adam = Adam(phi.shape, steps, cfg.beta1, cfg.beta2)
        prev_loss = None
        streak = 0
        best_loss = np.inf
        best_phi = phi.copy()
        for it in range(n_iters):
            if it % cfg.refresh_period == 0:
                obj.refresh(positions)
            loss, grad = obj.value_grad(positions)
            if diag is not None:
                diag.loss("rigid", it, loss)
            if not np.isfinite(loss) or not np.isfinite(grad).all():
                logger.warning("rigid: non-finite loss/gradient; keeping start")
                return TrajectoryField(positions_of(phi0), tf.grid, tf.mesh)
            if loss < best_loss:
                best_loss = loss
                best_phi = phi.copy()
            if prev_loss is not None and loss > prev_loss:
                streak += 1
                if streak >= DIVERGENCE_STREAK:
                    raise RigidStageDivergedError(
                        f"rigid loss increased {streak} consecutive iterations")
            else:
                streak = 0
            prev_loss = loss
            cos = np.cos(phi[:, 0])
            sin = np.sin(phi[:, 0])
            # d(position)/d(theta) = (-sin dx - cos dy, cos dx - sin dy)
            gtheta = (grad[:, :, 0] * (-d[:, 0, None] * sin - d[:, 1, None] * cos)
                      + grad[:, :, 1] * (d[:, 0, None] * cos - d[:, 1, None] * sin)).sum(axis=0)
            gphi = np.column_stack([gtheta, grad[:, :, 0].sum(axis=0),
                                    grad[:, :, 1].sum(axis=0)])
            gphi[0] = 0.0
            phi = adam.update(phi, gphi, _step_decay(it, n_iters))
            positions = positions_of(phi)
        obj.refresh(positions)
        if obj.value(positions_of(best_phi)) < obj.value(positions):
            phi = best_phi
            positions = positions_of(phi)
    start = positions_of(phi0)
    if (obj.value(positions) > obj.value(start)
            or _frame_score(obj, positions) < _frame_score(obj, start) - 0.02):
        logger.warning("rigid stage did not improve the loss; keeping start state")
        return TrajectoryField(start, tf.grid, tf.mesh)
    return TrajectoryField(positions, tf.grid, tf.mesh)


@dataclass
class ConvergenceReport:
    """Per-triangle convergence state and the frozen-anchor set."""

    p_frac: np.ndarray        # (T,) outlier fractions
    converged: np.ndarray     # (T,) bool
    no_texture: np.ndarray    # (T,) bool
    fixed_anchors: np.ndarray  # (N,) bool, anchors whose every incident triangle converged
    rounds_used: int = 0
    flags: list = field(default_factory=list)


def assess_convergence(tf: TrajectoryField, frame_init: Frame, frame_cur: Frame,
                       bary, k: float, tau: float) -> ConvergenceReport:
    """Per-triangle outlier fraction between normalized current/initial samples.

    Both sample vectors are normalized per triangle to zero mean and unit
    variance; a sample is an outlier when its squared residual exceeds k times
    the mean squared residual over ALL sampled pixels (the mean convergence
    state of the whole region: a per-triangle mean would bound the outlier
    fraction below 1/3 and could never exceed tau). A triangle converged when
    at most a tau fraction of its samples are outliers; textureless triangles
    are never marked converged.
    """
    mesh = tf.mesh
    coords_cur = fr_mod.triangle_sample_coords(tf.positions[:, -1], mesh.triangles, bary)
    coords_init = fr_mod.triangle_sample_coords(mesh.anchors, mesh.triangles, bary)
    cur, _, _, v_cur = fr_mod._bilinear_many(
        frame_cur.pixels, coords_cur[..., 0].ravel(), coords_cur[..., 1].ravel())
    ini, _, _, v_ini = fr_mod._bilinear_many(
        frame_init.pixels, coords_init[..., 0].ravel(), coords_init[..., 1].ravel())
    shape = coords_cur.shape[:2]
    cur = cur.reshape(shape)
    ini = ini.reshape(shape)
    valid = (v_cur.reshape(shape)) & (v_ini.reshape(shape))
    v = valid.astype(float)
    n = v.sum(axis=1)
    safe_n = np.maximum(n, 1.0)

    def normalize(a):
        mean = (a * v).sum(axis=1) / safe_n
        ac = (a - mean[:, None]) * v
        sd = np.sqrt((ac ** 2).sum(axis=1) / safe_n)
        return ac / np.maximum(sd, fr_mod.SIGMA_EPS)[:, None], sd

    cur_n, sd_cur = normalize(cur)
    ini_n, sd_ini = normalize(ini)
    no_texture = ((n < fr_mod.MIN_SAMPLES) | (sd_cur < fr_mod.SIGMA_EPS)
                  | (sd_ini < fr_mod.SIGMA_EPS))
    se = (cur_n - ini_n) ** 2 * v
    assessable = ~no_texture
    total = (v * assessable[:, None]).sum()
    mse = float((se * assessable[:, None]).sum() / max(total, 1.0))
    p = ((se > k * mse) & valid).sum(axis=1) / safe_n
    converged = (p <= tau) & assessable
    fixed = np.ones(mesh.num_anchors, dtype=bool)
    bad = np.unique(mesh.triangles[~converged])
    fixed[bad] = False
    return ConvergenceReport(p_frac=p, converged=converged, no_texture=no_texture,
                             fixed_anchors=fixed)


def coarse_to_fine(tf: TrajectoryField, window: EventWindow, frames,
                   cfg: TrackerConfig, fine_knot0=None, diag: Optional[DiagLog] = None):
    """Optimize anchors level by level, subdividing between levels.

    New anchors start from fine_knot0 (the previous window's fine-mesh state)
    when given, otherwise at the parents' midpoints. Returns the finest-level
    field and its convergence report.
    """
    shape = frames[0].shape
    soft = _blurred(frames)
    for level in range(cfg.max_levels + 1):
        stage = "fine" if level == cfg.max_levels else "coarse"
        final = level == cfg.max_levels
        obj = ObjectiveContext(tf, window, frames if final else soft,
                               stage_weights(cfg, stage), cfg, shape,
                               event_scale=1.0 if final else 2.0)
        mask = _free_mask(tf.mesh.num_anchors, tf.grid.num_knots)
        positions, _ = _run_stage(obj, tf.positions.copy(), mask, cfg.iters_level,
                                  cfg, f"level{level}", diag)
        tf = TrajectoryField(positions, tf.grid, tf.mesh)
        if level < cfg.max_levels:
            override = None
            if fine_knot0 is not None:
                n0 = tf.mesh.num_anchors
                added = tf.mesh.edges().shape[0]
                override = np.asarray(fine_knot0, dtype=float)[n0:n0 + added]
            tf = trajectory.subdivide_field(tf, knot0_override=override)
    report = assess_convergence(tf, frames[0], frames[2], sample_grid(cfg.samples_per_edge),
                                cfg.outlier_k, cfg.outlier_tau)
    return tf, report


def greedy_round(tf: TrajectoryField, window: EventWindow, frames,
                 cfg: TrackerConfig, report: ConvergenceReport,
                 diag: Optional[DiagLog] = None):
    """One neighbourhood-greedy round: freeze converged regions, re-optimize the rest.

    Anchors whose every incident triangle converged stay bit-identical; the
    remaining anchors are optimized with the strain continuity term active.
    The frozen set only ever grows across rounds.
    """
    if report.converged.all():
        return tf, report
    shape = frames[0].shape
    free_anchors = ~report.fixed_anchors
    obj = ObjectiveContext(tf, window, frames, stage_weights(cfg, "greedy"), cfg, shape)
    mask = _free_mask(tf.mesh.num_anchors, tf.grid.num_knots, free_anchors)
    positions, _ = _run_stage(obj, tf.positions.copy(), mask, cfg.iters_greedy,
                              cfg, f"greedy{report.rounds_used + 1}", diag)
    tf2 = TrajectoryField(positions, tf.grid, tf.mesh)
    rep2 = assess_convergence(tf2, frames[0], frames[2], sample_grid(cfg.samples_per_edge),
                              cfg.outlier_k, cfg.outlier_tau)
    rep2.fixed_anchors = rep2.fixed_anchors | report.fixed_anchors
    rep2.rounds_used = report.rounds_used + 1
    rep2.flags = list(report.flags)
    return tf2, rep2


@dataclass
class TrackState:
    """Persistent tracking state handed from window to window."""

    hierarchy: list
    positions: np.ndarray  # finest-mesh anchor positions at the current time
    time: float
    window_index: int = 0
    velocity: Optional[np.ndarray] = None  # px/s per finest-mesh anchor


def init_state(cfg: TrackerConfig, t0: float = 0.0) -> TrackState:
    if cfg.roi is None:
        raise ConfigError("tracker config needs a roi = x0,y0,x1,y1 entry")
    mesh0 = geometry.make_grid_mesh(cfg.roi, cfg.mesh_nx, cfg.mesh_ny)
    hierarchy = geometry.build_hierarchy(mesh0, cfg.max_levels)
    return TrackState(hierarchy=hierarchy, positions=hierarchy[-1].anchors.copy(),
                      time=t0, window_index=0)


def track_window(state: TrackState, events: ev_mod.Events, frame_prev: Frame,
                 frame_cur: Frame, frame_init: Frame, cfg: TrackerConfig,
                 diag: Optional[DiagLog] = None):
    """Track one window [frame_prev.t, frame_cur.t] starting from the state.

    Pipeline: equal-count binning, rigid pre-stage, coarse-to-fine anchor
    optimization, then greedy rounds until every triangle converged or the
    round budget is spent. Returns the finest-level field and its report; the
    caller advances the state with the field's last-knot positions.
    """
    if cfg.max_window_events and len(events) > cfg.max_window_events:
        # deterministic stride decimation; the stream is highly redundant
        keep = np.unique(np.round(
            np.linspace(0, len(events) - 1, cfg.max_window_events)).astype(np.int64))
        events = events.select(keep)
    window = partition_bins(events, frame_prev.t, frame_cur.t, cfg.m_bins)
    grid = TimeGrid(window.bin_edges)
    frames3 = (frame_init, frame_prev, frame_cur)
    mesh0 = state.hierarchy[0]
    k0 = mesh0.num_anchors
    start = state.positions[:k0]
    pos = np.repeat(start[:, None, :], grid.num_knots, axis=1)
    if cfg.extrapolate_init and state.velocity is not None:
        # constant-velocity guess for knots after the hand-off knot
        dt = grid.knots - grid.knots[0]
        pos = start[:, None, :] + state.velocity[:k0, None, :] * dt[None, :, None]
        pos[:, 0] = start
    tf = TrajectoryField(pos, grid, mesh0)
    tf = rigid_stage(tf, window, frames3, cfg, diag)
    tf, report = coarse_to_fine(tf, window, frames3, cfg,
                                fine_knot0=state.positions, diag=diag)
    best = (tf, report)
    rounds = 0
    while not report.converged.all() and rounds < cfg.greedy_rounds:
        tf, report = greedy_round(tf, window, frames3, cfg, report, diag)
        rounds += 1
        if report.converged.sum() >= best[1].converged.sum():
            best = (tf, report)
    if not report.converged.all():
        tf, report = best
        if rounds >= cfg.greedy_rounds and "GreedyStalled" not in report.flags:
            report.flags.append("GreedyStalled")
            logger.warning("greedy rounds exhausted with %d/%d triangles converged",
                           int(report.converged.sum()), report.converged.size)
    return tf, report


@dataclass
class SequenceResult:
    """Per-window fields and reports plus the dense displacement table."""

    fields: list
    reports: list
    window_errors: dict     # window index -> error message for failed windows
    pred_table: object      # evaluation.DisplacementTable
    state: TrackState


def track_sequence(events: ev_mod.Events, frames: list, cfg: TrackerConfig,
                   out_dir=None) -> SequenceResult:
    """Chain track_window over consecutive frame pairs and collect outputs.

    A failed window is recorded and the state carries forward unchanged, so
    later windows keep running against the stale geometry. When out_dir is
    given, trajectory/displacement/strain CSVs and diagnostics are written.
    """
    from .evaluation import DisplacementTable
    from .simulator import grid_query_points

    if len(frames) < 2:
        raise ValueError("need at least two frames to track")
    times = np.array([f.t for f in frames])
    if not (np.diff(times) > 0).all():
        raise ValueError("frames must be strictly increasing in time")
    state = init_state(cfg, t0=times[0])
    fine_mesh = state.hierarchy[-1]
    queries = grid_query_points(cfg.roi)
    tri_q, lam_q = geometry.locate_points(queries, fine_mesh.triangle_vertices())
    if (tri_q < 0).any():
        raise ConfigError("query grid leaks outside the mesh roi")
    diag = DiagLog()
    disp = np.zeros((len(frames), queries.shape[0], 2))
    fields = []
    reports = []
    window_errors = {}
    for w in range(1, len(frames)):
        diag.window = w - 1
        sel = (events.t >= times[w - 1]) & (events.t <= times[w])
        try:
            tf, report = track_window(state, events.select(sel), frames[w - 1],
                                      frames[w], frames[0], cfg, diag)
            span = tf.grid.knots[-1] - tf.grid.knots[0]
            state.velocity = (tf.positions[:, -1] - tf.positions[:, 0]) / span
            state.positions = tf.positions[:, -1].copy()
            fields.append(tf)
            reports.append(report)
            diag.pj(report)
        except TrackingError as exc:
            logger.warning("window %d failed: %s; carrying state forward", w - 1, exc)
            window_errors[w - 1] = str(exc)
            fields.append(None)
            reports.append(None)
            state.velocity = None
        state.time = times[w]
        state.window_index = w
        warped = np.einsum("pk,pkc->pc", lam_q,
                           state.positions[fine_mesh.triangles[tri_q]])
        disp[w] = warped - queries
    pred = DisplacementTable(frame_idx=np.arange(len(frames)), times=times,
                             point_ids=np.arange(queries.shape[0]),
                             base=queries, disp=disp)
    result = SequenceResult(fields=fields, reports=reports,
                            window_errors=window_errors, pred_table=pred, state=state)
    if out_dir is not None:
        _write_sequence_outputs(result, diag, cfg, out_dir)
    return result


def _write_sequence_outputs(result: SequenceResult, diag: DiagLog,
                            cfg: TrackerConfig, out_dir) -> None:
    from .evaluation import write_table

    os.makedirs(out_dir, exist_ok=True)
    tracked = [tf for tf in result.fields if tf is not None]
    trajectory.write_trajectory_csv(os.path.join(out_dir, "trajectories.csv"), tracked)
    write_table(os.path.join(out_dir, "displacements.csv"), result.pred_table)
    strain_fields = [strain.anchor_strain(tf, tf.grid.knots[-1]) for tf in tracked]
    strain.write_strain_csv(os.path.join(out_dir, "strain.csv"), strain_fields)
    with open(os.path.join(out_dir, "objective_curves.csv"), "w", encoding="ascii") as fh:
        fh.write("window,stage,iter,loss\n")
        for w, stage, it, loss in diag.loss_rows:
            fh.write(f"{w},{stage},{it},{loss:.10g}\n")
    with open(os.path.join(out_dir, "pj.csv"), "w", encoding="ascii") as fh:
        fh.write("window,triangle,p,converged\n")
        for w, t, p, conv in diag.pj_rows:
            fh.write(f"{w},{t},{p:.10g},{conv}\n")
    with open(os.path.join(out_dir, "windows.txt"), "w", encoding="ascii") as fh:
        for w in range(len(result.fields)):
            if w in result.window_errors:
                fh.write(f"window {w}: FAILED {result.window_errors[w]}\n")
            else:
                rep = result.reports[w]
                flags = ",".join(rep.flags) if rep.flags else "-"
                fh.write(f"window {w}: converged {int(rep.converged.sum())}/"
                         f"{rep.converged.size} rounds {rep.rounds_used} flags {flags}\n")
    save_config(cfg, os.path.join(out_dir, "tracker.cfg"))
