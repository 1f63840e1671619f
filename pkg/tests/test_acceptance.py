"""Acceptance suite: one test per release criterion, each printing a verdict line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
"""

import logging
import time

import numpy as np
import pytest

from evdeform import evaluation as evl
from evdeform import events as ev
from evdeform import frames as fr
from evdeform import geometry, optimizer as opt, simulator as sim, trajectory
from evdeform.cli import cli
from evdeform.events import partition_bins
from evdeform.frames import sample_grid
from evdeform.ioutil import write_kv
from evdeform.optimizer import TrackerConfig
from evdeform.simulator import SceneSpec, spec_to_kv
from evdeform.trajectory import TimeGrid, TrajectoryField

logging.getLogger("evdeform").setLevel(logging.ERROR)


def verdict(num, name, detail):
    print(f"\nACCEPTANCE {num:02d} {name}: PASS ({detail})")


def gt_field(model, mesh, knots):
    pos = np.stack([mesh.anchors + model.displacement(mesh.anchors, t) for t in knots],
                   axis=1)
    return TrajectoryField(pos, TimeGrid(knots), mesh)


def make_scene(**kw):
    spec = SceneSpec(**kw)
    tex = sim.make_texture(spec)
    model = sim.deformation_model(spec)
    events = sim.generate_events(spec, tex, model)
    frames = [sim.render_frame(spec, t, tex, model) for t in spec.frame_times()]
    return spec, model, events, frames


def gt_table_for(pred, model):
    table = np.stack([model.displacement(pred.base, t) for t in pred.times])
    return evl.DisplacementTable(pred.frame_idx, pred.times, pred.point_ids,
                                 pred.base, table)


@pytest.fixture(scope="module")
def translation_window():
    """Rigid-translation window with ~5k events on a 128x128 sensor."""
    spec, model, events, frames = make_scene(
        width=128, height=128, roi=(26, 26, 102, 102), family="translate",
        amplitude=12.0, duration=0.2, frame_rate=5.0, seed=21,
        params={"direction": (1.0, 0.3)})
    keep = np.unique(np.round(np.linspace(0, len(events) - 1, 5000)).astype(np.int64))
    events = events.select(keep)
    window = partition_bins(events, frames[0].t, frames[1].t, 4)
    grid = TimeGrid(window.bin_edges)
    mesh = geometry.subdivide(geometry.make_grid_mesh(spec.roi_rect()))
    identity = trajectory.constant_field(mesh, grid)
    truth = gt_field(model, mesh, grid.knots)
    return spec, model, window, identity, truth, frames


def test_criterion_01_affine_reproduction():
    t0 = time.time()
    rng = np.random.default_rng(31)
    mesh = geometry.make_grid_mesh((0, 0, 128, 128), 2, 2)
    knots = np.array([0.0, 0.5, 1.0])
    worst = 0.0
    for _ in range(5):
        a = rng.normal(scale=0.08, size=(2, 2))
        b = rng.normal(scale=4.0, size=2)
        pos = np.empty((mesh.num_anchors, 3, 2))
        for k, t in enumerate(knots):
            pos[:, k] = mesh.anchors + t * (mesh.anchors @ a.T + b)
        tf = TrajectoryField(pos, TimeGrid(knots), mesh)
        queries = rng.uniform(0.5, 127.5, (200, 2))
        for t in (0.25, 0.5, 1.0):
            u = trajectory.displacement_field(tf, queries, t)
            expected = t * (queries @ a.T + b)
            worst = max(worst, float(np.abs(u - expected).max()))
    elapsed = time.time() - t0
    assert worst < 1e-9
    assert elapsed < 1.0
    verdict(1, "affine reproduction", f"max dev {worst:.2e} px, {elapsed:.2f}s")


def test_criterion_02_association_oracle():
    t0 = time.time()
    rng = np.random.default_rng(32)
    mesh = geometry.subdivide(geometry.make_grid_mesh((10, 10, 90, 90), 2, 2))
    assert mesh.num_triangles == 32
    knots = np.array([0.0, 1.0])
    pos = np.repeat(mesh.anchors[:, None, :], 2, axis=1)
    pos += rng.normal(scale=2.0, size=pos.shape)
    tf = TrajectoryField(pos, TimeGrid(knots), mesh)
    n = 10_000
    xy = rng.uniform(0, 100, (n, 2))
    ts = rng.uniform(0, 1, n)
    tri, lam = trajectory.associate_points(tf, xy, ts)
    # oracle: per-event scan over every triangle in index order, zero-inclusive
    # signs, first hit wins
    agree = 0
    for i in range(n):
        verts = tf.positions_at(ts[i])[mesh.triangles]
        expected = -1
        for t in range(mesh.num_triangles):
            c = geometry._edge_dets(verts[t][None, :, :], xy[i][None, :])[0]
            if not (c.max() > 0 and c.min() < 0):
                expected = t
                break
        if expected == tri[i]:
            if expected >= 0:
                w = geometry._cramer_weights(verts[expected][None, :, :], xy[i][None, :])[0]
                if np.abs(w - lam[i]).max() < 1e-9:
                    agree += 1
            else:
                agree += 1
    elapsed = time.time() - t0
    assert agree == n
    assert elapsed < 5.0
    verdict(2, "association oracle", f"{agree}/{n} agree, {elapsed:.2f}s")


def _kink_safe_coordinate(ctx, positions, j, k, c, h):
    """Keep the FD probe away from derivative kinks of every term it touches.

    Warped events must sit at least 0.05 px from the splat-kernel kinks in the
    perturbed axis; moving frame probes only cross a bilinear-cell edge when
    within h of it (movement rate <= 1), so they get a 10h margin.
    """
    for plan in list(ctx.plans1) + list(ctx.plans2):
        if plan is None:
            continue
        coef = np.zeros(len(plan.w))
        if plan.i0 == k:
            coef += 1.0 - plan.alpha
        if plan.i1 == k:
            coef += plan.alpha
        rows = (plan.vidx == j).any(axis=1) & (coef > 1e-12)
        if rows.any():
            xw, yw = ev.warp_plan(positions, plan)
            v = (xw if c == 0 else yw)[rows] / ctx.event_scale
            f = v % 1.0
            if float(np.minimum(f, 1.0 - f).min()) < 0.05:
                return False
    last = positions.shape[1] - 1
    if k in (0, last):
        pos_k = positions[:, k]
        tris = ctx.mesh.triangles
        tri_ids = np.where((tris == j).any(axis=1))[0]
        coords = fr.triangle_sample_coords(pos_k, tris[tri_ids], ctx.bary)
        moving = np.stack([ctx.bary[:, np.where(tris[t] == j)[0][0]] > 1e-12
                           for t in tri_ids])
        f = coords[..., c] % 1.0
        if float(np.minimum(f, 1.0 - f)[moving].min()) < 10 * h:
            return False
    return True


def test_criterion_03_gradient_check(translation_window):
    t0 = time.time()
    spec, model, window, identity, truth, frames = translation_window
    rng = np.random.default_rng(33)
    pos = 0.7 * truth.positions + 0.3 * identity.positions
    pos += rng.normal(scale=0.23, size=pos.shape)
    grid = truth.grid
    mesh = truth.mesh
    frames3 = (frames[0], frames[0], frames[1])
    cfg = TrackerConfig(roi=spec.roi_rect(), m_bins=4, max_levels=1)
    h = 1e-3
    worst = {"timestamp": 0.0, "sharpness": 0.0}
    for mode, budget in (("timestamp", 20), ("sharpness", 8)):
        ctx = opt.objective_context(TrajectoryField(pos, grid, mesh), window, frames3,
                                    cfg, "greedy", event_term=mode)
        loss, grad = ctx.value_grad(pos)
        live = np.argwhere(np.abs(grad) > 1e-5)
        order = rng.permutation(live.shape[0])
        checked = 0
        for j, k, c in live[order]:
            if checked >= budget:
                break
            if not _kink_safe_coordinate(ctx, pos, j, k, c, h):
                continue
            pp = pos.copy()
            pp[j, k, c] += h
            pm = pos.copy()
            pm[j, k, c] -= h
            fd = (ctx.value(pp) - ctx.value(pm)) / (2 * h)
            rel = abs(grad[j, k, c] - fd) / max(abs(fd), abs(grad[j, k, c]))
            worst[mode] = max(worst[mode], rel)
            assert rel < 1e-3, f"{mode} coord ({j},{k},{c}): analytic {grad[j,k,c]:.6g} fd {fd:.6g}"
            checked += 1
        assert checked >= budget
    elapsed = time.time() - t0
    assert elapsed < 30.0
    verdict(3, "gradient check",
            f"worst rel err ts {worst['timestamp']:.2e} sharp {worst['sharpness']:.2e}, "
            f"{elapsed:.1f}s")


def test_criterion_04_cm_landmark(translation_window):
    t0 = time.time()
    spec, model, window, identity, truth, frames = translation_window
    n_events = len(window.events)
    assert 2000 <= n_events <= 20000
    shape = frames[0].shape
    vals = []
    for alpha in np.linspace(0.0, 1.0, 11):
        pos = (1 - alpha) * identity.positions + alpha * truth.positions
        tf = TrajectoryField(pos, truth.grid, truth.mesh)
        vals.append(ev.contrast(ev.build_iwe(window, tf, window.t_start, shape=shape)))
    ratio = vals[-1] / vals[0]
    elapsed = time.time() - t0
    assert ratio >= 1.2
    assert int(np.argmax(vals)) == 10
    assert elapsed < 10.0
    verdict(4, "contrast landmark",
            f"{n_events} events, GT/identity = {ratio:.2f}, homotopy max at GT, {elapsed:.1f}s")


def test_criterion_05_small_deformation_tracking():
    t0 = time.time()
    spec, model, events, frames = make_scene(
        width=128, height=128, roi=(26, 26, 102, 102), family="affine_stretch",
        amplitude=15.0, duration=2.0, frame_rate=5.0, seed=35,
        params={"gx": 1.0, "gy": -0.35})
    cfg = TrackerConfig(roi=spec.roi_rect(), m_bins=4, max_levels=1,
                        iters_rigid=90, iters_level=100, iters_greedy=60,
                        greedy_rounds=2)
    result = opt.track_sequence(events, frames, cfg)
    assert not result.window_errors
    gt = gt_table_for(result.pred_table, model)
    report = evl.metric_report(result.pred_table, gt)
    elapsed = time.time() - t0
    assert report.epe < 1.0
    assert report.survival == 1.0
    assert elapsed < 600.0
    verdict(5, "small-deformation tracking",
            f"EPE {report.epe:.3f} px, survival {report.survival:.0%}, {elapsed:.0f}s")


def test_criterion_06_large_motion_tracking():
    t0 = time.time()
    spec, model, events, frames = make_scene(
        width=320, height=128, roi=(24, 36, 88, 100), family="affine_stretch",
        amplitude=100.0, duration=2.0, frame_rate=5.0, seed=36,
        params={"drift": (10.0, 0.0), "gx": 0.8, "gy": -0.25})
    cfg = TrackerConfig(roi=spec.roi_rect(), m_bins=4, max_levels=1,
                        iters_rigid=90, iters_level=100, iters_greedy=60,
                        greedy_rounds=2)
    result = opt.track_sequence(events, frames, cfg)
    gt = gt_table_for(result.pred_table, model)
    report = evl.metric_report(result.pred_table, gt)
    max_disp = float(np.linalg.norm(gt.disp[-1], axis=1).max())
    elapsed = time.time() - t0
    assert max_disp >= 100.0
    assert report.survival >= 0.6
    assert report.sepe < 2.0
    assert elapsed < 1200.0
    verdict(6, "large-motion tracking",
            f"{max_disp:.0f} px cumulative, survival {report.survival:.0%}, "
            f"SEPE {report.sepe:.3f} px, {elapsed:.0f}s")


def test_criterion_07_greedy_vs_vanilla():
    t0 = time.time()
    spec, model, events, frames = make_scene(
        width=128, height=128, roi=(28, 28, 100, 100), family="translate",
        amplitude=3.0, duration=0.2, frame_rate=5.0, seed=13,
        params={"direction": (1.0, 0.5)})
    cfg = TrackerConfig(roi=spec.roi_rect(), m_bins=4, max_levels=2, iters_greedy=100)
    state = opt.init_state(cfg)
    window = partition_bins(events, frames[0].t, frames[1].t, cfg.m_bins)
    grid = TimeGrid(window.bin_edges)
    fine = state.hierarchy[-1]
    truth = gt_field(model, fine, grid.knots)
    frames3 = (frames[0], frames[0], frames[1])
    bary = sample_grid(cfg.samples_per_edge)
    assert opt.assess_convergence(truth, frames[0], frames[1], bary,
                                  cfg.outlier_k, cfg.outlier_tau).converged.all()
    # perturb the triangle closest to the region centre by 8 px
    centres = fine.anchors[fine.triangles].mean(axis=1)
    tri = int(np.argmin(np.linalg.norm(centres - np.array([64.0, 64.0]), axis=1)))
    verts = fine.triangles[tri]
    bad = truth.copy()
    bad.positions[verts, 1:, :] += 8.0 / np.sqrt(2.0)

    def epe_of(tf):
        return float(np.linalg.norm(tf.positions[:, -1] - truth.positions[:, -1],
                                    axis=1).mean())

    report = opt.assess_convergence(bad, frames[0], frames[1], bary,
                                    cfg.outlier_k, cfg.outlier_tau)
    assert not report.converged[tri]
    tf_g, rep_g = bad, report
    rounds = 0
    while not rep_g.converged.all() and rounds < 3:
        tf_g, rep_g = opt.greedy_round(tf_g, window, frames3, cfg, rep_g)
        rounds += 1
    greedy_epe = epe_of(tf_g)
    # vanilla joint optimization: all anchors free, no freezing, no strain
    # term, same total iteration budget
    obj = opt.ObjectiveContext(bad, window, frames3, opt.stage_weights(cfg, "fine"),
                               cfg, frames3[0].shape)
    mask = opt._free_mask(fine.num_anchors, grid.num_knots)
    pos_v, _ = opt._run_stage(obj, bad.positions.copy(), mask, 3 * cfg.iters_greedy,
                              cfg, "vanilla")
    vanilla_epe = epe_of(TrajectoryField(pos_v, grid, fine))
    elapsed = time.time() - t0
    assert greedy_epe < 1.0
    assert vanilla_epe >= 2.0 * greedy_epe
    assert elapsed < 300.0
    verdict(7, "greedy vs vanilla",
            f"greedy EPE {greedy_epe:.3f} px in {rounds} round(s), "
            f"vanilla {vanilla_epe:.3f} px ({vanilla_epe / greedy_epe:.1f}x), {elapsed:.0f}s")


def test_criterion_08_metric_units():
    zeros = np.zeros((10, 10, 2))

    def table(disp):
        d = np.asarray(disp, dtype=float)
        f, q, _ = d.shape
        return evl.DisplacementTable(np.arange(f), np.arange(f, dtype=float),
                                     np.arange(q),
                                     np.column_stack([np.arange(q, dtype=float),
                                                      np.zeros(q)]), d)

    gt = table(zeros)
    assert evl.epe(gt, gt) == 0.0
    assert evl.epe(table(zeros + np.array([3.0, 4.0])), gt) == pytest.approx(5.0)
    toy_gt = table(np.zeros((1, 2, 2)))
    assert evl.epe(table([[[1.0, 0.0], [0.0, 2.0]]]), toy_gt) == pytest.approx(1.5)
    assert evl.survival(gt, gt) == 1.0
    half = zeros.copy()
    half[5:, :, 0] = 10.0
    assert evl.survival(table(half), gt) == pytest.approx(0.5)
    boundary = zeros.copy()
    boundary[1:, :2, 0] = 10.0  # exactly 20 percent: strict comparison, no failure
    assert evl.survival(table(boundary), gt) == 1.0
    assert evl.sepe(gt, gt) == 0.0
    split = np.zeros((2, 10, 2))
    split[:, :5, 0] = 100.0
    assert evl.sepe(table(split), gt) == 0.0
    verdict(8, "metric unit examples", "epe/survival/sepe pinned values exact")


def test_criterion_09_zncc_invariance():
    rng = np.random.default_rng(39)
    worst = 0.0
    for _ in range(100):
        s = rng.uniform(0, 1, rng.integers(8, 64))
        a = rng.uniform(0.1, 10.0)
        b = rng.uniform(-1.0, 1.0)
        worst = max(worst, abs(fr.zncc(s, a * s + b) - 1.0))
    assert worst < 1e-9
    verdict(9, "zncc gain/offset invariance", f"worst |zncc-1| = {worst:.2e}")


def test_criterion_10_determinism(tmp_path):
    t0 = time.time()
    spec = SceneSpec(width=72, height=72, roi=(18, 18, 54, 54), family="translate",
                     amplitude=4.0, duration=0.4, frame_rate=5.0, seed=40,
                     params={"direction": (1.0, 0.2)})
    spec_path = tmp_path / "scene.cfg"
    write_kv(spec_path, spec_to_kv(spec))
    cfg = TrackerConfig(roi=spec.roi_rect(), m_bins=3, max_levels=1, iters_rigid=40,
                        iters_level=50, iters_greedy=30, greedy_rounds=1)
    outputs = []
    for run in ("a", "b"):
        ds = tmp_path / f"ds_{run}"
        out = tmp_path / f"out_{run}"
        assert cli(["simulate", "--spec", str(spec_path), "--out", str(ds)]) == 0
        assert cli(["track", "--events", str(ds / "events.csv"),
                    "--frames", str(ds / "frames.csv"),
                    "--config", str(spec_path.parent / "tracker.cfg")
                    if False else str(_write_cfg(tmp_path, cfg, run)),
                    "--out", str(out)]) == 0
        report = tmp_path / f"report_{run}.txt"
        assert cli(["eval", "--pred", str(out / "displacements.csv"),
                    "--gt", str(ds / "gt_displacements.csv"),
                    "--report", str(report)]) == 0
        outputs.append((
            (out / "trajectories.csv").read_bytes(),
            (ds / "events.csv").read_bytes(),
            report.read_bytes(),
            (str(report) + ".csv") and (tmp_path / f"report_{run}.txt.csv").read_bytes(),
        ))
    assert outputs[0] == outputs[1]
    elapsed = time.time() - t0
    verdict(10, "end-to-end determinism",
            f"trajectory/event/report bytes identical across runs, {elapsed:.0f}s")


def _write_cfg(tmp_path, cfg, tag):
    path = tmp_path / f"tracker_{tag}.cfg"
    opt.save_config(cfg, path)
    return path
