"""Grayscale frames, uniform barycentric sampling, bilinear lookup, and the
zero-mean normalized cross-correlation (ZNCC) objective.

Frames hold intensities in [0, 1]. Each triangle is probed on a fixed
barycentric lattice; the probe coordinates follow the anchors, so the ZNCC
between two frames measures how well the trajectory explains the image motion,
independent of global gain or offset.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import (InvalidSampleDensityError, NoTextureError, OutOfImageError,
                     ZeroVarianceError)
from .trajectory import TrajectoryField

logger = logging.getLogger(__name__)

SIGMA_EPS = 1e-12   # below this a sample vector counts as textureless
MIN_SAMPLES = 6     # triangles keeping fewer valid samples are excluded


@dataclass
class Frame:
    """One grayscale frame with its capture timestamp."""

    pixels: np.ndarray
    t: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2:
            raise ValueError("frame pixels must be a 2D array")
        if not np.isfinite(self.pixels).all():
            raise ValueError("frame intensities must be finite")

    @property
    def shape(self):
        return self.pixels.shape


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5) into a float array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM (P5) file")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated PGM header")
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        width, height, maxval = (int(v) for v in fields[:3])
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 is supported")
        data = fh.read(width * height)
        if len(data) != width * height:
            raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width) / 255.0


def write_pgm(path, image) -> None:
    """Write a [0, 1] float image as binary 8-bit PGM."""
    img = np.asarray(image, dtype=float)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def normalize_to_unit(image) -> np.ndarray:
    """Min-max normalize an array to [0, 1]; constant arrays map to zero."""
    img = np.asarray(image, dtype=float)
    lo = img.min()
    hi = img.max()
    if hi - lo <= 0:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def read_frame_manifest(path) -> list[Frame]:
    """Load the frames listed in a manifest CSV frame_index,t,path.

    Relative frame paths resolve against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    frames = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline()
        if not header.startswith("frame_index"):
            raise ValueError(f"{path}: unexpected manifest header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            idx, t, rel = line.split(",")
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            frames.append(Frame(read_pgm(full), float(t)))
    if not frames:
        raise ValueError(f"{path}: manifest lists no frames")
    return frames


def write_frame_manifest(path, entries) -> None:
    """entries: iterable of (frame_index, t, relative_path)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("frame_index,t,path\n")
        for idx, t, rel in entries:
            fh.write(f"{idx},{t:.10g},{rel}\n")


def blur(image, passes: int = 2) -> np.ndarray:
    """Separable binomial [1 4 6 4 1]/16 smoothing, repeated; edges replicate."""
    img = np.asarray(image, dtype=float)
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    for _ in range(passes):
        pad = np.pad(img, ((0, 0), (2, 2)), mode="edge")
        img = sum(kernel[i] * pad[:, i:i + img.shape[1]] for i in range(5))
        pad = np.pad(img, ((2, 2), (0, 0)), mode="edge")
        img = sum(kernel[i] * pad[i:i + img.shape[0], :] for i in range(5))
    return img


def sample_grid(n: int) -> np.ndarray:
    """Uniform barycentric lattice with n samples per edge.

    Returns the (n+1)(n+2)/2 triples (i/n, j/n, 1-(i+j)/n) for i + j <= n,
    ordered lexicographically by (i, j). Every triple is non-negative and sums
    to one, so all probe points fall in the closed triangle.
    """
    if n < 1:
        raise InvalidSampleDensityError("need at least 1 sample per edge")
    triples = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            triples.append((i / n, j / n, 1.0 - (i + j) / n))
    return np.array(triples)


def bilinear_sample(frame: Frame, p) -> float:
    """4-neighbour bilinear interpolation at p = (x, y); exact at integer pixels."""
    x, y = float(p[0]), float(p[1])
    h, w = frame.shape
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise OutOfImageError(f"sample ({x:.3f}, {y:.3f}) outside {w}x{h} image")
    val, _, _, _ = _bilinear_many(frame.pixels, np.array([x]), np.array([y]))
    return float(val[0])


def _bilinear_many(img, x, y):
    """Vectorised bilinear lookup with in-cell gradients and validity mask."""
    h, w = img.shape
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.int64), h - 2)
    fx = xc - x0
    fy = yc - y0
    i00 = img[y0, x0]
    i10 = img[y0, x0 + 1]
    i01 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    top = i00 * (1.0 - fx) + i10 * fx
    bot = i01 * (1.0 - fx) + i11 * fx
    val = top * (1.0 - fy) + bot * fy
    gx = (i10 - i00) * (1.0 - fy) + (i11 - i01) * fy
    gy = bot - top
    return val, gx, gy, valid


def zncc(s1, s2) -> float:
    """Zero-mean normalized cross-correlation of two equal-length sample vectors."""
    a = np.asarray(s1, dtype=float)
    b = np.asarray(s2, dtype=float)
    if a.size != b.size or a.size < 2:
        raise ValueError("sample vectors must have equal length >= 2")
    ac = a - a.mean()
    bc = b - b.mean()
    sa = np.sqrt((ac ** 2).mean())
    sb = np.sqrt((bc ** 2).mean())
    if sa < SIGMA_EPS or sb < SIGMA_EPS:
        raise ZeroVarianceError("sample vector has (near-)zero variance")
    return float((ac * bc).mean() / (sa * sb))


def triangle_sample_coords(anchor_positions, triangles, bary) -> np.ndarray:
    """(T, S, 2) probe coordinates: barycentric lattice inside each triangle."""
    verts = anchor_positions[triangles]  # (T, 3, 2)
    return np.einsum("sk,tkc->tsc", bary, verts)


def _masked_zncc(a, b, valid):
    """Per-triangle ZNCC over jointly valid samples.

    a, b, valid: (T, S). Returns (z, ok, ctx) where ok marks triangles with
    enough samples and non-zero variance, and ctx carries the centred vectors
    and scales needed by the gradient.
    """
    v = valid.astype(float)
    n = v.sum(axis=1)
    safe_n = np.maximum(n, 1.0)
    am = (a * v).sum(axis=1) / safe_n
    bm = (b * v).sum(axis=1) / safe_n
    ac = (a - am[:, None]) * v
    bc = (b - bm[:, None]) * v
    va = (ac ** 2).sum(axis=1) / safe_n
    vb = (bc ** 2).sum(axis=1) / safe_n
    sa = np.sqrt(va)
    sb = np.sqrt(vb)
    ok = (n >= MIN_SAMPLES) & (sa >= SIGMA_EPS) & (sb >= SIGMA_EPS)
    denom = np.where(ok, sa * sb, 1.0)
    cov = (ac * bc).sum(axis=1) / safe_n
    z = np.where(ok, cov / denom, 0.0)
    return z, ok, (ac, bc, sa, sb, safe_n, z)


def _masked_zncc_grad_a(ctx, ok):
    """(T, S) d(zncc)/d(a samples), zero on invalid triangles/samples."""
    ac, bc, sa, sb, n, z = ctx
    sa_ = np.where(ok, sa, 1.0)
    sb_ = np.where(ok, sb, 1.0)
    g = bc / (n * sa_ * sb_)[:, None] - (z / (n * sa_ ** 2))[:, None] * ac
    return g * ok[:, None]


def _frame_sampling(tf: TrajectoryField, frames, bary):
    """Probe the initial/previous/current frames with the trajectory.

    frames is (initial, previous, current); previous and current are sampled at
    the window's first/last knots, the initial frame at the rest anchors.
    Returns per-frame (vals, gx, gy, valid) arrays of shape (T, S) plus the
    probe coordinates of the current frame.
    """
    f0, fp, fc = frames
    knots = tf.grid.knots
    for fr, t in ((fp, knots[0]), (fc, knots[-1])):
        if abs(fr.t - t) > 1e-9:
            raise ValueError(f"frame at t={fr.t:.6g} does not sit on window knot {t:.6g}")
    tris = tf.mesh.triangles
    out = []
    coords_cur = None
    for fr, pos in ((f0, tf.mesh.anchors),
                    (fp, tf.positions[:, 0]),
                    (fc, tf.positions[:, -1])):
        coords = triangle_sample_coords(pos, tris, bary)
        val, gx, gy, valid = _bilinear_many(
            fr.pixels, coords[..., 0].ravel(), coords[..., 1].ravel())
        shape = coords.shape[:2]
        out.append((val.reshape(shape), gx.reshape(shape), gy.reshape(shape),
                    valid.reshape(shape)))
        if fr is fc:
            coords_cur = coords
    return out, coords_cur


def frame_objective(tf: TrajectoryField, frames, bary) -> float:
    """Mean over valid triangles of zncc(current, previous) + zncc(current, initial)."""
    value, _ = frame_objective_grad(tf, frames, bary, want_grad=False)
    return value


def frame_objective_grad(tf: TrajectoryField, frames, bary, want_grad: bool = True):
    """Frame objective and its gradient w.r.t. anchor positions.

    The gradient flows through the current-frame samples into the last knot and
    through the previous-frame samples into the first knot; the initial frame is
    probed at rest anchors and contributes no gradient.
    """
    (s0, sp, sc), coords_cur = _frame_sampling(tf, frames, bary)
    valid_cp = sc[3] & sp[3]
    valid_c0 = sc[3] & s0[3]
    z1, ok1, ctx1 = _masked_zncc(sc[0], sp[0], valid_cp)
    z2, ok2, ctx2 = _masked_zncc(sc[0], s0[0], valid_c0)
    ok = ok1 & ok2
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise NoTextureError("every triangle was rejected as textureless or out of image")
    if n_ok < ok.size:
        logger.warning("%d/%d triangles excluded from the frame objective",
                       ok.size - n_ok, ok.size)
    value = float((z1[ok] + z2[ok]).sum() / n_ok)
    if not want_grad:
        return value, None
    grad = np.zeros_like(tf.positions)
    scale = 1.0 / n_ok
    # current-frame samples feed both terms
    g_cur = (_masked_zncc_grad_a(ctx1, ok) + _masked_zncc_grad_a(ctx2, ok)) * scale
    _scatter_sample_grad(grad, tf, g_cur, sc, bary, knot=tf.positions.shape[1] - 1)
    # previous-frame samples feed the first term only (zncc is symmetric)
    z1s, ok1s, ctx1s = _masked_zncc(sp[0], sc[0], valid_cp)
    g_prev = _masked_zncc_grad_a(ctx1s, ok) * scale
    _scatter_sample_grad(grad, tf, g_prev, sp, bary, knot=0)
    return value, grad


def _scatter_sample_grad(grad, tf, g_samples, sampled, bary, knot) -> None:
    """Chain d/d(sample value) -> d/d(probe coord) -> d/d(anchor position at knot)."""
    _, gx, gy, valid = sampled
    gc = np.stack([g_samples * gx * valid, g_samples * gy * valid], axis=-1)  # (T, S, 2)
    per_vertex = np.einsum("tsc,sk->tkc", gc, bary)  # (T, 3, 2)
    np.add.at(grad[:, knot, :], tf.mesh.triangles.ravel(),
              per_vertex.reshape(-1, 2))
