"""Synthetic ground-truth generator: speckle textures deformed by analytic
fields, frames rendered at a fixed rate, and events emitted by a log-brightness
threshold model on a fine time grid.

Every output is a pure function of the scene spec (including its seed), so
datasets regenerate bit-identically.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import frames as frames_mod
from .errors import ConfigError
from .frames import Frame, write_frame_manifest, write_pgm
from .events import Events, write_events_csv
from .ioutil import read_kv, write_kv

logger = logging.getLogger(__name__)

LOG_EPS = 0.01  # offset inside log() so black pixels stay finite

FAMILIES = ("translate", "rotate", "affine_stretch", "sinusoidal_bend", "radial_squeeze")


@dataclass
class SceneSpec:
    """Scene description for the synthetic generator.

    params carries family-specific knobs:
      translate        direction (dx, dy), default (1, 0)
      rotate           none (angle derived from amplitude at the ROI radius)
      affine_stretch   gx, gy diagonal stretch shape (default 1, 0) and an
                       optional drift (dx, dy) translation component
      sinusoidal_bend  wavelength in px (default width / 2)
      radial_squeeze   sigma in px (default min(width, height) / 4)

    The amplitude is the maximum displacement magnitude over the ROI at the
    end of the sequence; intermediate times ramp linearly.
    """

    width: int = 128
    height: int = 128
    roi: Optional[tuple] = None
    family: str = "translate"
    amplitude: float = 10.0
    duration: float = 1.0
    frame_rate: float = 5.0
    threshold: float = 0.2
    refractory: float = 1e-3
    noise_rate: float = 0.0
    seed: int = 0
    speckle_density: float = 0.08
    speckle_radius: float = 1.5
    fine_factor: int = 20
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.threshold <= 0:
            raise ConfigError("event threshold must be positive")
        if self.frame_rate <= 0:
            raise ConfigError("frame rate must be positive")
        if self.amplitude < 0:
            raise ConfigError("amplitude must be non-negative")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown deformation family {self.family!r}")
        if self.fine_factor < 20:
            raise ConfigError("fine grid must be at least 20x the frame rate")

    def roi_rect(self) -> tuple:
        if self.roi is not None:
            return tuple(float(v) for v in self.roi)
        return (self.width * 0.25, self.height * 0.25,
                self.width * 0.75, self.height * 0.75)

    def frame_times(self) -> np.ndarray:
        n = int(round(self.duration * self.frame_rate))
        return np.arange(n + 1) / self.frame_rate


class DeformationModel:
    """Analytic forward/inverse maps of one deformation family.

    forward(X, t) = X + displacement(X, t) sends material points to their
    deformed positions; inverse(x, t) recovers the material point imaged at a
    pixel, which is what inverse-warp rendering needs.
    """

    def displacement(self, pts, t):
        raise NotImplementedError

    def forward(self, pts, t):
        return np.asarray(pts, dtype=float) + self.displacement(pts, t)

    def inverse(self, pts, t):
        raise NotImplementedError


class _AffineModel(DeformationModel):
    """x = X + k(t) (G (X - c) + d) for a linear ramp k(t)."""

    def __init__(self, g, drift, center, rate):
        self.g = np.asarray(g, dtype=float)
        self.drift = np.asarray(drift, dtype=float)
        self.center = np.asarray(center, dtype=float)
        self.rate = float(rate)  # k(t) = rate * t

    def displacement(self, pts, t):
        p = np.asarray(pts, dtype=float)
        k = self.rate * t
        return k * ((p - self.center) @ self.g.T + self.drift)

    def inverse(self, pts, t):
        p = np.asarray(pts, dtype=float)
        k = self.rate * t
        m = np.eye(2) + k * self.g
        rhs = p - k * (self.drift - self.g @ self.center)
        return rhs @ np.linalg.inv(m).T


class _RotateModel(DeformationModel):
    def __init__(self, center, omega):
        self.center = np.asarray(center, dtype=float)
        self.omega = float(omega)  # rad / s

    def _rot(self, t, sign=1.0):
        a = sign * self.omega * t
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])

    def displacement(self, pts, t):
        p = np.asarray(pts, dtype=float)
        return (p - self.center) @ self._rot(t).T + self.center - p

    def inverse(self, pts, t):
        p = np.asarray(pts, dtype=float)
        return (p - self.center) @ self._rot(t, -1.0).T + self.center


class _BendModel(DeformationModel):
    """Vertical displacement with horizontal sinusoidal phase; exactly invertible."""

    def __init__(self, amplitude_rate, wavelength, phase_x):
        self.rate = float(amplitude_rate)
        self.wavelength = float(wavelength)
        self.phase_x = float(phase_x)

    def _wave(self, x, t):
        return self.rate * t * np.sin(2.0 * np.pi * (x - self.phase_x) / self.wavelength)

    def displacement(self, pts, t):
        p = np.asarray(pts, dtype=float)
        u = np.zeros_like(p)
        u[..., 1] = self._wave(p[..., 0], t)
        return u

    def inverse(self, pts, t):
        p = np.asarray(pts, dtype=float).copy()
        p[..., 1] -= self._wave(p[..., 0], t)
        return p


class _RadialModel(DeformationModel):
    """Inward radial displacement peaking at radius sigma; inverted by Newton."""

    def __init__(self, center, rate, sigma):
        self.center = np.asarray(center, dtype=float)
        self.rate = float(rate)  # peak inward speed, px / s
        self.sigma = float(sigma)

    def _shape(self, r):
        # radial profile g(r) with max_r r*g(r) = sigma at r = sigma
        return np.exp(0.5 - r ** 2 / (2.0 * self.sigma ** 2)) / self.sigma

    def displacement(self, pts, t):
        p = np.asarray(pts, dtype=float)
        d = p - self.center
        r = np.sqrt((d ** 2).sum(axis=-1))
        return -(self.rate * t) * d * self._shape(r)[..., None]

    def inverse(self, pts, t):
        p = np.asarray(pts, dtype=float)
        d = p - self.center
        rp = np.sqrt((d ** 2).sum(axis=-1))
        k = self.rate * t
        r = rp.copy()
        for _ in range(30):
            g = self._shape(r)
            h = r * (1.0 - k * g) - rp
            dh = 1.0 - k * g * (1.0 - r ** 2 / self.sigma ** 2)
            step = h / np.where(np.abs(dh) < 1e-9, 1e-9, dh)
            r = np.maximum(r - step, 0.0)
        scale = np.where(rp > 1e-12, r / np.where(rp > 1e-12, rp, 1.0), 1.0)
        return self.center + d * scale[..., None]


def _roi_probe_grid(roi, n=48):
    x0, y0, x1, y1 = roi
    gx, gy = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n))
    return np.column_stack([gx.ravel(), gy.ravel()])


def deformation_model(spec: SceneSpec) -> DeformationModel:
    """Instantiate the analytic field for a scene, scaled so the largest ROI
    displacement at t = duration equals the amplitude."""
    roi = spec.roi_rect()
    center = np.array([(roi[0] + roi[2]) / 2.0, (roi[1] + roi[3]) / 2.0])
    dur = spec.duration
    if spec.family == "translate":
        d = np.asarray(spec.params.get("direction", (1.0, 0.0)), dtype=float)
        nrm = np.linalg.norm(d)
        if nrm == 0:
            raise ConfigError("translate direction must be non-zero")
        return _AffineModel(np.zeros((2, 2)), d / nrm, center, spec.amplitude / dur)
    if spec.family == "rotate":
        corners = np.array([[roi[0], roi[1]], [roi[2], roi[1]],
                            [roi[0], roi[3]], [roi[2], roi[3]]])
        r_max = np.linalg.norm(corners - center, axis=1).max()
        return _RotateModel(center, spec.amplitude / (r_max * dur))
    if spec.family == "affine_stretch":
        g = np.diag([float(spec.params.get("gx", 1.0)), float(spec.params.get("gy", 0.0))])
        drift = np.asarray(spec.params.get("drift", (0.0, 0.0)), dtype=float)
        probe = _roi_probe_grid(roi)
        raw = (probe - center) @ g.T + drift
        norm = np.linalg.norm(raw, axis=1).max()
        if norm == 0:
            raise ConfigError("affine_stretch shape is identically zero")
        return _AffineModel(g / norm, drift / norm, center, spec.amplitude / dur)
    if spec.family == "sinusoidal_bend":
        wavelength = float(spec.params.get("wavelength", spec.width / 2.0))
        xs = np.linspace(roi[0], roi[2], 256)
        norm = np.abs(np.sin(2.0 * np.pi * (xs - roi[0]) / wavelength)).max()
        if norm == 0:
            raise ConfigError("bend wavelength leaves the ROI flat")
        return _BendModel(spec.amplitude / (norm * dur), wavelength, roi[0])
    if spec.family == "radial_squeeze":
        sigma = float(spec.params.get("sigma", min(spec.width, spec.height) / 4.0))
        if spec.amplitude > 0.5 * sigma:
            raise ConfigError("radial_squeeze amplitude above sigma/2 is not invertible")
        probe = _roi_probe_grid(roi)
        r = np.linalg.norm(probe - center, axis=1)
        norm = (r * np.exp(0.5 - r ** 2 / (2.0 * sigma ** 2)) / sigma).max()
        return _RadialModel(center, spec.amplitude / (max(norm, 1e-9) * dur), sigma)
    raise ConfigError(f"unknown deformation family {spec.family!r}")


def make_texture(spec: SceneSpec) -> np.ndarray:
    """Seeded speckle texture: random Gaussian blobs on a 0.5 background."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    tex = np.full((h, w), 0.5)
    n_blobs = int(round(spec.speckle_density * h * w))
    cx = rng.uniform(0, w, n_blobs)
    cy = rng.uniform(0, h, n_blobs)
    amp = rng.uniform(0.25, 0.45, n_blobs) * rng.choice((-1.0, 1.0), n_blobs)
    r = spec.speckle_radius
    half = max(int(np.ceil(4 * r)), 2)
    for bx, by, ba in zip(cx, cy, amp):
        x0 = max(int(bx) - half, 0)
        x1 = min(int(bx) + half + 1, w)
        y0 = max(int(by) - half, 0)
        y1 = min(int(by) + half + 1, h)
        gx, gy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        tex[y0:y1, x0:x1] += ba * np.exp(-((gx - bx) ** 2 + (gy - by) ** 2) / (2 * r ** 2))
    return np.clip(tex, 0.05, 0.95)


def _lookup_texture(texture, pts) -> np.ndarray:
    val, _, _, valid = frames_mod._bilinear_many(
        texture, pts[:, 0], pts[:, 1])
    return np.where(valid, val, 0.5)


def render_frame(spec: SceneSpec, t: float, texture=None, model=None) -> Frame:
    """Inverse-warp render of the deformed texture at time t."""
    texture = make_texture(spec) if texture is None else texture
    model = deformation_model(spec) if model is None else model
    h, w = texture.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix = np.column_stack([gx.ravel(), gy.ravel()])
    src = model.inverse(pix, float(t))
    return Frame(_lookup_texture(texture, src).reshape(h, w), float(t))


def events_from_intensity(intensity_fn: Callable[[float], np.ndarray], times,
                          threshold: float, refractory: float,
                          log_eps: float = LOG_EPS):
    """Threshold-crossing events from a per-pixel intensity sequence.

    intensity_fn(t) returns the (H, W) image at time t; times must be
    increasing and include the start. Per pixel, an event fires every time the
    log intensity moves threshold away from the level at the previous event,
    with linear interpolation of the crossing time inside a step and emission
    times paced to honour the refractory period exactly.
    """
    times = np.asarray(times, dtype=float)
    img0 = intensity_fn(times[0])
    level = np.log(img0 + log_eps)
    ref = level.copy()
    t_last = np.full(level.shape, -np.inf)
    ts, xs, ys, ps = [], [], [], []
    t_prev = times[0]
    l_prev = level
    for t_now in times[1:]:
        l_now = np.log(intensity_fn(t_now) + log_eps)
        dt = t_now - t_prev
        for _ in range(10000):
            d = l_now - ref
            fire = np.abs(d) >= threshold
            if not fire.any():
                break
            pol = np.sign(d[fire])
            target = ref[fire] + pol * threshold
            dl = l_now[fire] - l_prev[fire]
            frac = np.clip((target - l_prev[fire]) / np.where(np.abs(dl) < 1e-30, 1e-30, dl),
                           0.0, 1.0)
            t_cross = t_prev + frac * dt
            t_emit = np.maximum(t_cross, t_last[fire] + refractory)
            fy, fx = np.nonzero(fire)
            ts.append(t_emit)
            xs.append(fx.astype(float))
            ys.append(fy.astype(float))
            ps.append(pol.astype(np.int64))
            ref[fire] = target
            t_last[fire] = t_emit
        l_prev = l_now
        t_prev = t_now
    if not ts:
        empty = np.empty(0)
        return empty, empty.copy(), empty.copy(), np.empty(0, dtype=np.int64)
    return (np.concatenate(ts), np.concatenate(xs),
            np.concatenate(ys), np.concatenate(ps))


def generate_events(spec: SceneSpec, texture=None, model=None) -> Events:
    """Simulate the event stream of a scene, including uniform noise events."""
    texture = make_texture(spec) if texture is None else texture
    model = deformation_model(spec) if model is None else model
    n_fine = int(round(spec.duration * spec.frame_rate * spec.fine_factor))
    times = np.linspace(0.0, spec.duration, n_fine + 1)

    def intensity(t):
        return render_frame(spec, t, texture, model).pixels

    ts, xs, ys, ps = events_from_intensity(intensity, times, spec.threshold, spec.refractory)
    if spec.noise_rate > 0:
        rng = np.random.default_rng(spec.seed + 1)
        n_noise = rng.poisson(spec.noise_rate * spec.width * spec.height * spec.duration)
        ts = np.concatenate([ts, rng.uniform(0.0, spec.duration, n_noise)])
        xs = np.concatenate([xs, rng.integers(0, spec.width, n_noise).astype(float)])
        ys = np.concatenate([ys, rng.integers(0, spec.height, n_noise).astype(float)])
        ps = np.concatenate([ps, rng.choice((-1, 1), n_noise).astype(np.int64)])
    order = np.argsort(ts, kind="stable")
    return Events(ts[order], xs[order], ys[order], ps[order])


@dataclass
class GroundTruth:
    """Analytic displacement field plus its tabulation at the query points."""

    model: DeformationModel
    query_points: np.ndarray   # (Q, 2) rest coordinates
    frame_times: np.ndarray    # (F,)
    table: np.ndarray          # (F, Q, 2) displacements

    def displacement(self, pts, t):
        return self.model.displacement(pts, t)


def grid_query_points(roi, spacing: float = 4.0) -> np.ndarray:
    """Uniform query grid with the given spacing, inset half a step from the ROI edge."""
    x0, y0, x1, y1 = (float(v) for v in roi)
    xs = np.arange(x0 + spacing / 2.0, x1, spacing)
    ys = np.arange(y0 + spacing / 2.0, y1, spacing)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def ground_truth(spec: SceneSpec, query_points=None, model=None) -> GroundTruth:
    model = deformation_model(spec) if model is None else model
    pts = grid_query_points(spec.roi_rect()) if query_points is None else np.asarray(query_points, float)
    times = spec.frame_times()
    table = np.stack([model.displacement(pts, t) for t in times])
    return GroundTruth(model, pts, times, table)


def spec_to_kv(spec: SceneSpec) -> dict:
    kv = {
        "width": spec.width, "height": spec.height,
        "family": spec.family, "amplitude": spec.amplitude,
        "duration": spec.duration, "frame_rate": spec.frame_rate,
        "threshold": spec.threshold, "refractory": spec.refractory,
        "noise_rate": spec.noise_rate, "seed": spec.seed,
        "speckle_density": spec.speckle_density, "speckle_radius": spec.speckle_radius,
        "fine_factor": spec.fine_factor,
        "roi": ",".join(f"{v:.10g}" for v in spec.roi_rect()),
    }
    for key, val in spec.params.items():
        if isinstance(val, (tuple, list, np.ndarray)):
            kv[f"param_{key}"] = ",".join(f"{float(v):.10g}" for v in val)
        else:
            kv[f"param_{key}"] = val
    return kv


def spec_from_kv(kv: dict) -> SceneSpec:
    def num(key, default, cast=float):
        return cast(kv[key]) if key in kv else default

    params = {}
    for key, val in kv.items():
        if key.startswith("param_"):
            name = key[len("param_"):]
            parts = str(val).split(",")
            params[name] = float(parts[0]) if len(parts) == 1 else tuple(float(p) for p in parts)
    roi = None
    if "roi" in kv:
        roi = tuple(float(v) for v in str(kv["roi"]).split(","))
    return SceneSpec(
        width=num("width", 128, int), height=num("height", 128, int), roi=roi,
        family=str(kv.get("family", "translate")), amplitude=num("amplitude", 10.0),
        duration=num("duration", 1.0), frame_rate=num("frame_rate", 5.0),
        threshold=num("threshold", 0.2), refractory=num("refractory", 1e-3),
        noise_rate=num("noise_rate", 0.0), seed=num("seed", 0, int),
        speckle_density=num("speckle_density", 0.08),
        speckle_radius=num("speckle_radius", 1.5),
        fine_factor=num("fine_factor", 20, int), params=params)


def read_scene_spec(path) -> SceneSpec:
    return spec_from_kv(read_kv(path))


def make_sequence(spec: SceneSpec, out_dir) -> dict:
    """Write a full synthetic dataset and return the paths of its pieces.

    Emits frames (PGM plus a manifest CSV), the event CSV, the ground-truth
    displacement table at the dense query grid, and an echo of the scene spec.
    """
    os.makedirs(out_dir, exist_ok=True)
    texture = make_texture(spec)
    model = deformation_model(spec)
    roi = spec.roi_rect()
    corners = np.array([[roi[0], roi[1]], [roi[2], roi[1]],
                        [roi[0], roi[3]], [roi[2], roi[3]]])
    moved = model.forward(corners, spec.duration)
    if ((moved < 0).any() or (moved[:, 0] > spec.width - 1).any()
            or (moved[:, 1] > spec.height - 1).any()):
        logger.warning("deformed ROI leaves the image; events near the border will be lost")

    times = spec.frame_times()
    entries = []
    for k, t in enumerate(times):
        name = f"frame_{k:04d}.pgm"
        write_pgm(os.path.join(out_dir, name), render_frame(spec, t, texture, model).pixels)
        entries.append((k, t, name))
    manifest_path = os.path.join(out_dir, "frames.csv")
    write_frame_manifest(manifest_path, entries)

    events = generate_events(spec, texture, model)
    events_path = os.path.join(out_dir, "events.csv")
    write_events_csv(events_path, events)

    gt = ground_truth(spec, model=model)
    gt_path = os.path.join(out_dir, "gt_displacements.csv")
    from .evaluation import DisplacementTable, write_table
    table = DisplacementTable(
        frame_idx=np.arange(times.size), times=times,
        point_ids=np.arange(gt.query_points.shape[0]),
        base=gt.query_points, disp=gt.table)
    write_table(gt_path, table)

    spec_path = os.path.join(out_dir, "scene.cfg")
    write_kv(spec_path, spec_to_kv(spec))
    logger.info("wrote %d frames and %d events to %s", times.size, len(events), out_dir)
    return {"frames": manifest_path, "events": events_path,
            "gt": gt_path, "spec": spec_path, "n_events": len(events)}
