"""Per-triangle deformation gradients, von Mises equivalent strain at anchors,
and the strain-continuity penalty over mesh edges.

Strain uses the Green-Lagrange tensor E = (F^T F - I) / 2, which vanishes for
any rigid motion, so the continuity penalty never fights a rigid solution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import SimplicialMesh
from .trajectory import TrajectoryField

logger = logging.getLogger(__name__)

STRAIN_CAP = 10.0  # clamp for blown-up / inverted triangles
VM_EPS = 1e-12


def green_strain(f) -> tuple[float, float, float]:
    """Green-Lagrange strain components (e_xx, e_yy, e_xy) of a deformation gradient."""
    fm = np.asarray(f, dtype=float)
    e = 0.5 * (fm.T @ fm - np.eye(2))
    return float(e[0, 0]), float(e[1, 1]), float(e[0, 1])


def von_mises(e_xx: float, e_yy: float, e_xy: float) -> float:
    """Scalar equivalent strain sqrt(e_xx^2 - e_xx e_yy + e_yy^2 + 3 e_xy^2)."""
    return float(np.sqrt(e_xx ** 2 - e_xx * e_yy + e_yy ** 2 + 3.0 * e_xy ** 2))


@dataclass
class StrainField:
    """Anchor-wise von Mises strain plus the per-triangle Green tensors at one time."""

    anchor_vm: np.ndarray    # (N,)
    tri_green: np.ndarray    # (T, 3) as (e_xx, e_yy, e_xy)
    t: float


class MeshStrainContext:
    """Rest-geometry factors reused across strain evaluations of one mesh."""

    def __init__(self, mesh: SimplicialMesh):
        self.mesh = mesh
        rest = mesh.triangle_vertices()
        rm = np.stack([rest[:, 1] - rest[:, 0], rest[:, 2] - rest[:, 0]], axis=2)
        self.rest_inv = np.linalg.inv(rm)             # (T, 2, 2)
        self.areas = mesh.rest_areas()                # (T,)
        self.edges = mesh.edges()                     # (E, 2)
        verts = mesh.triangles.ravel()
        self.area_sum = np.bincount(
            verts, weights=np.repeat(self.areas, 3), minlength=mesh.num_anchors)

    def deformation_gradients(self, positions_t) -> np.ndarray:
        """(T, 2, 2) per-triangle deformation gradients at the given anchor positions."""
        d = positions_t[self.mesh.triangles]
        dm = np.stack([d[:, 1] - d[:, 0], d[:, 2] - d[:, 0]], axis=2)
        return dm @ self.rest_inv

    def triangle_vm(self, positions_t):
        """Per-triangle von Mises strain, greens tensors, and the clamp mask."""
        f = self.deformation_gradients(positions_t)
        e11 = 0.5 * (f[:, 0, 0] ** 2 + f[:, 1, 0] ** 2 - 1.0)
        e22 = 0.5 * (f[:, 0, 1] ** 2 + f[:, 1, 1] ** 2 - 1.0)
        e12 = 0.5 * (f[:, 0, 0] * f[:, 0, 1] + f[:, 1, 0] * f[:, 1, 1])
        vm = np.sqrt(e11 ** 2 - e11 * e22 + e22 ** 2 + 3.0 * e12 ** 2)
        clamped = vm > STRAIN_CAP
        if clamped.any():
            logger.warning("strain clamped at %.1f on %d triangle(s)",
                           STRAIN_CAP, int(clamped.sum()))
        return np.minimum(vm, STRAIN_CAP), np.column_stack([e11, e22, e12]), clamped, f

    def anchor_vm(self, positions_t):
        """Rest-area weighted mean of incident-triangle strain per anchor."""
        vm, green, clamped, f = self.triangle_vm(positions_t)
        verts = self.mesh.triangles.ravel()
        num = np.bincount(verts, weights=np.repeat(self.areas * vm, 3),
                          minlength=self.mesh.num_anchors)
        return num / self.area_sum, vm, green, clamped, f

    def continuity(self, positions_t) -> float:
        """Mean over unique mesh edges of the squared anchor-strain difference."""
        s = self.anchor_vm(positions_t)[0]
        d = s[self.edges[:, 0]] - s[self.edges[:, 1]]
        return float((d ** 2).mean())

    def continuity_grad(self, positions_t):
        """Continuity value plus its gradient w.r.t. the anchor positions."""
        s, vm, green, clamped, f = self.anchor_vm(positions_t)
        e = self.edges
        d = s[e[:, 0]] - s[e[:, 1]]
        value = float((d ** 2).mean())
        n_anchor = self.mesh.num_anchors
        gs = (np.bincount(e[:, 0], weights=d, minlength=n_anchor)
              - np.bincount(e[:, 1], weights=d, minlength=n_anchor)) * (2.0 / e.shape[0])
        # anchor strain -> per-triangle von Mises
        tris = self.mesh.triangles
        gvm = ((gs / self.area_sum)[tris].sum(axis=1)) * self.areas
        gvm[clamped] = 0.0
        safe_vm = np.maximum(vm, VM_EPS)
        e11, e22, e12 = green[:, 0], green[:, 1], green[:, 2]
        ge11 = gvm * (2.0 * e11 - e22) / (2.0 * safe_vm)
        ge22 = gvm * (2.0 * e22 - e11) / (2.0 * safe_vm)
        ge12 = gvm * 3.0 * e12 / safe_vm
        gf = np.empty_like(f)
        gf[:, 0, 0] = ge11 * f[:, 0, 0] + 0.5 * ge12 * f[:, 0, 1]
        gf[:, 0, 1] = ge22 * f[:, 0, 1] + 0.5 * ge12 * f[:, 0, 0]
        gf[:, 1, 0] = ge11 * f[:, 1, 0] + 0.5 * ge12 * f[:, 1, 1]
        gf[:, 1, 1] = ge22 * f[:, 1, 1] + 0.5 * ge12 * f[:, 1, 0]
        gd = gf @ np.transpose(self.rest_inv, (0, 2, 1))  # (T, 2, 2), columns = edge grads
        grad = np.zeros((n_anchor, 2))
        np.add.at(grad, tris[:, 1], gd[:, :, 0])
        np.add.at(grad, tris[:, 2], gd[:, :, 1])
        np.add.at(grad, tris[:, 0], -(gd[:, :, 0] + gd[:, :, 1]))
        return value, grad


def anchor_strain(tf: TrajectoryField, t: float) -> StrainField:
    """Von Mises strain at each anchor for the deformed state at time t."""
    ctx = MeshStrainContext(tf.mesh)
    s, _, green, _, _ = ctx.anchor_vm(tf.positions_at(float(t)))
    return StrainField(anchor_vm=s, tri_green=green, t=float(t))


def strain_continuity(tf: TrajectoryField, t: float) -> float:
    """Mean squared anchor-strain difference across unique mesh edges at time t."""
    return MeshStrainContext(tf.mesh).continuity(tf.positions_at(float(t)))


def write_strain_csv(path, fields) -> None:
    """Dump strain fields as CSV rows anchor,t,S."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("anchor,t,S\n")
        for sf in fields:
            for j, s in enumerate(sf.anchor_vm):
                fh.write(f"{j},{sf.t:.10g},{s:.10g}\n")


def rasterize_anchor_values(mesh: SimplicialMesh, positions, values, shape) -> np.ndarray:
    """Rasterize anchor values over the deformed mesh by barycentric interpolation.

    Pixels outside the mesh stay at zero.
    """
    h, w = shape
    out = np.zeros((h, w))
    verts = mesh.triangle_vertices(np.asarray(positions, dtype=float))
    vals = np.asarray(values, dtype=float)[mesh.triangles]
    from .geometry import _cramer_weights, _edge_dets
    for t in range(mesh.num_triangles):
        v = verts[t]
        x0 = max(int(np.floor(v[:, 0].min())), 0)
        x1 = min(int(np.ceil(v[:, 0].max())), w - 1)
        y0 = max(int(np.floor(v[:, 1].min())), 0)
        y1 = min(int(np.ceil(v[:, 1].max())), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        pts = np.column_stack([gx.ravel(), gy.ravel()]).astype(float)
        c = _edge_dets(v[None, :, :], pts)
        inside = ~((c.max(axis=1) > 0.0) & (c.min(axis=1) < 0.0))
        if not inside.any():
            continue
        lam = _cramer_weights(v[None, :, :], pts[inside])
        px = pts[inside].astype(int)
        out[px[:, 1], px[:, 0]] = lam @ vals[t]
    return out


def rasterize_triangle_values(mesh: SimplicialMesh, positions, values, shape) -> np.ndarray:
    """Rasterize one constant value per triangle over the deformed mesh."""
    h, w = shape
    out = np.zeros((h, w))
    verts = mesh.triangle_vertices(np.asarray(positions, dtype=float))
    from .geometry import _edge_dets
    for t in range(mesh.num_triangles):
        v = verts[t]
        x0 = max(int(np.floor(v[:, 0].min())), 0)
        x1 = min(int(np.ceil(v[:, 0].max())), w - 1)
        y0 = max(int(np.floor(v[:, 1].min())), 0)
        y1 = min(int(np.ceil(v[:, 1].max())), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        pts = np.column_stack([gx.ravel(), gy.ravel()]).astype(float)
        c = _edge_dets(v[None, :, :], pts)
        inside = ~((c.max(axis=1) > 0.0) & (c.min(axis=1) < 0.0))
        if not inside.any():
            continue
        px = pts[inside].astype(int)
        out[px[:, 1], px[:, 0]] = values[t]
    return out
