"""Simplicial mesh geometry over a rectangular region of interest.

Points are float (x, y) pixel coordinates. Triangles store anchor indices
ordered so the signed area is positive in the (x right, y down) pixel axes,
which keeps all three edge determinants non-negative for interior points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateTriangleError

AREA_EPS = 1e-9  # px^2, below this a triangle counts as degenerate


def signed_side(a, b, p) -> float:
    """2x2 determinant (b - a) x (p - a).

    The sign tells on which side of the directed edge a->b the point p lies;
    zero means collinear.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    p = np.asarray(p, dtype=float)
    return float((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]))


def triangle_area(vertices) -> float:
    """Signed area of a triangle given as a (3, 2) vertex array."""
    v = np.asarray(vertices, dtype=float)
    return 0.5 * ((v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1])
                  - (v[1, 1] - v[0, 1]) * (v[2, 0] - v[0, 0]))


def _check_nondegenerate(vertices) -> None:
    area = triangle_area(vertices)
    if abs(area) <= AREA_EPS:
        raise DegenerateTriangleError(
            f"triangle area {area:.3e} px^2 is below {AREA_EPS:g}")


def point_in_triangle(p, tri_vertices) -> bool:
    """Same-side containment test; boundary points (zero determinant) count as inside."""
    v = np.asarray(tri_vertices, dtype=float)
    _check_nondegenerate(v)
    c = [signed_side(v[i], v[(i + 1) % 3], p) for i in range(3)]
    return not (max(c) > 0.0 and min(c) < 0.0)


def barycentric_of(p, tri_vertices) -> np.ndarray:
    """Barycentric weights of p: solves p = sum(w_k V_k), sum(w_k) = 1, by Cramer's rule.

    Points inside the triangle yield all weights in [0, 1]; outside points get
    weights outside that range but still summing to one.
    """
    v = np.asarray(tri_vertices, dtype=float)
    _check_nondegenerate(v)
    p = np.asarray(p, dtype=float)
    det = ((v[1, 1] - v[2, 1]) * (v[0, 0] - v[2, 0])
           + (v[2, 0] - v[1, 0]) * (v[0, 1] - v[2, 1]))
    w1 = ((v[1, 1] - v[2, 1]) * (p[0] - v[2, 0])
          + (v[2, 0] - v[1, 0]) * (p[1] - v[2, 1])) / det
    w2 = ((v[2, 1] - v[0, 1]) * (p[0] - v[2, 0])
          + (v[0, 0] - v[2, 0]) * (p[1] - v[2, 1])) / det
    return np.array([w1, w2, 1.0 - w1 - w2])


@dataclass
class AffineMap:
    """Affine map x -> A @ x + b."""

    a: np.ndarray  # (2, 2)
    b: np.ndarray  # (2,)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.a.T + self.b


def affine_from_triangles(rest, deformed) -> AffineMap:
    """The unique affine map sending the rest triangle onto the deformed one."""
    r = np.asarray(rest, dtype=float)
    d = np.asarray(deformed, dtype=float)
    _check_nondegenerate(r)
    rm = np.column_stack([r[1] - r[0], r[2] - r[0]])
    dm = np.column_stack([d[1] - d[0], d[2] - d[0]])
    a = dm @ np.linalg.inv(rm)
    b = d[0] - a @ r[0]
    return AffineMap(a=a, b=b)


@dataclass
class SimplicialMesh:
    """Triangulation of a region over anchor points, with subdivision history.

    anchors          (N, 2) rest positions of the anchor points
    triangles        (T, 3) anchor indices, positively oriented
    level            subdivision depth (0 for the initial mesh)
    parent_map       (T,) index of each triangle's parent in the previous level
    midpoint_parents (M, 2) anchor-index pairs whose midpoints were appended by
                     the last subdivision (rows align with anchors[N-M:])
    """

    anchors: np.ndarray
    triangles: np.ndarray
    level: int = 0
    parent_map: Optional[np.ndarray] = None
    midpoint_parents: Optional[np.ndarray] = None

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if not np.isfinite(self.anchors).all():
            raise ValueError("mesh anchors must be finite")
        verts = self.anchors[self.triangles]
        areas = _signed_areas(verts)
        if (np.abs(areas) <= AREA_EPS).any():
            raise DegenerateTriangleError("mesh contains a degenerate triangle")
        if (areas <= 0).any():
            raise ValueError("mesh triangles must be positively oriented")

    @property
    def num_anchors(self) -> int:
        return self.anchors.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_vertices(self, positions=None) -> np.ndarray:
        """(T, 3, 2) vertex coordinates; rest anchors unless positions given."""
        pos = self.anchors if positions is None else np.asarray(positions, dtype=float)
        return pos[self.triangles]

    def edges(self) -> np.ndarray:
        """(E, 2) unique undirected edges as sorted anchor-index pairs."""
        t = self.triangles
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    def rest_areas(self) -> np.ndarray:
        """(T,) signed rest areas (positive by construction)."""
        return _signed_areas(self.triangle_vertices())


def _signed_areas(verts) -> np.ndarray:
    """Signed areas for a (T, 3, 2) vertex array."""
    e1 = verts[:, 1] - verts[:, 0]
    e2 = verts[:, 2] - verts[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def make_grid_mesh(roi, nx: int = 2, ny: int = 2) -> SimplicialMesh:
    """Regular right-triangle mesh over the rectangle roi = (x0, y0, x1, y1).

    Each of the nx-by-ny cells is split along its diagonal into two triangles,
    so the default 2x2 grid yields 8 triangles on 9 anchors.
    """
    x0, y0, x1, y1 = (float(v) for v in roi)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("roi must satisfy x1 > x0 and y1 > y0")
    if nx < 1 or ny < 1:
        raise ValueError("grid resolution must be at least 1x1")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    anchors = np.column_stack([gx.ravel(), gy.ravel()])
    tris = []
    for iy in range(ny):
        for ix in range(nx):
            a = iy * (nx + 1) + ix
            b = a + 1
            c = a + nx + 2
            d = a + nx + 1
            tris.append((a, b, c))
            tris.append((a, c, d))
    return SimplicialMesh(anchors=anchors, triangles=np.array(tris))


def subdivide(mesh: SimplicialMesh) -> SimplicialMesh:
    """Split every triangle into 4 children using edge midpoints.

    Shared-edge midpoints are deduplicated so the result stays conforming.
    Parent anchors keep their indices; midpoint anchors are appended in the
    order they are first encountered (triangle-index order).
    """
    anchors = [mesh.anchors]
    midpoint_of: dict[tuple[int, int], int] = {}
    mid_parents = []
    next_idx = mesh.num_anchors

    def midpoint(i: int, j: int) -> int:
        nonlocal next_idx
        key = (i, j) if i < j else (j, i)
        idx = midpoint_of.get(key)
        if idx is None:
            idx = next_idx
            midpoint_of[key] = idx
            mid_parents.append(key)
            next_idx += 1
        return idx

    children = []
    parent = []
    for t, (v1, v2, v3) in enumerate(mesh.triangles):
        m1 = midpoint(v1, v2)
        m2 = midpoint(v2, v3)
        m3 = midpoint(v3, v1)
        children.extend([(v1, m1, m3), (v2, m2, m1), (v3, m3, m2), (m1, m2, m3)])
        parent.extend([t, t, t, t])

    mid_parents = np.array(mid_parents, dtype=np.int64).reshape(-1, 2)
    anchors.append(0.5 * (mesh.anchors[mid_parents[:, 0]] + mesh.anchors[mid_parents[:, 1]]))
    return SimplicialMesh(
        anchors=np.concatenate(anchors),
        triangles=np.array(children, dtype=np.int64),
        level=mesh.level + 1,
        parent_map=np.array(parent, dtype=np.int64),
        midpoint_parents=mid_parents,
    )


def build_hierarchy(mesh: SimplicialMesh, levels: int) -> list[SimplicialMesh]:
    """Meshes [level 0 .. levels]; anchor indices nest across levels."""
    chain = [mesh]
    for _ in range(levels):
        chain.append(subdivide(chain[-1]))
    return chain


def locate_points(points, tri_verts):
    """Assign each point to the first containing triangle, in triangle-index order.

    Parameters:
        points: (P, 2) query coordinates.
        tri_verts: (T, 3, 2) vertex coordinates per triangle.

    Returns (tri_index, weights): tri_index is -1 (weights zero) for points
    outside every triangle. Boundary points count as inside, so a point on a
    shared edge goes to the lower-indexed triangle.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    verts = np.asarray(tri_verts, dtype=float)
    n = pts.shape[0]
    tri_idx = np.full(n, -1, dtype=np.int64)
    lam = np.zeros((n, 3))
    todo = np.arange(n)
    for t in range(verts.shape[0]):
        if todo.size == 0:
            break
        v = verts[t]
        lo = v.min(axis=0) - 1e-9
        hi = v.max(axis=0) + 1e-9
        p = pts[todo]
        box = (p[:, 0] >= lo[0]) & (p[:, 0] <= hi[0]) & (p[:, 1] >= lo[1]) & (p[:, 1] <= hi[1])
        cand = todo[box]
        if cand.size == 0:
            continue
        c = _edge_dets(v[None, :, :], pts[cand])
        inside = ~((c.max(axis=1) > 0.0) & (c.min(axis=1) < 0.0))
        hit = cand[inside]
        if hit.size:
            tri_idx[hit] = t
            lam[hit] = _cramer_weights(v[None, :, :], pts[hit])
            todo = np.setdiff1d(todo, hit, assume_unique=True)
    return tri_idx, lam


def _edge_dets(verts, pts) -> np.ndarray:
    """(P, 3) edge determinants; verts broadcasts as (P|1, 3, 2) against (P, 2)."""
    out = np.empty((pts.shape[0], 3))
    for i in range(3):
        a = verts[:, i]
        b = verts[:, (i + 1) % 3]
        out[:, i] = ((b[:, 0] - a[:, 0]) * (pts[:, 1] - a[:, 1])
                     - (b[:, 1] - a[:, 1]) * (pts[:, 0] - a[:, 0]))
    return out


def _cramer_weights(verts, pts) -> np.ndarray:
    """(P, 3) barycentric weights; verts broadcasts as (P|1, 3, 2)."""
    v1, v2, v3 = verts[:, 0], verts[:, 1], verts[:, 2]
    det = ((v2[:, 1] - v3[:, 1]) * (v1[:, 0] - v3[:, 0])
           + (v3[:, 0] - v2[:, 0]) * (v1[:, 1] - v3[:, 1]))
    w1 = ((v2[:, 1] - v3[:, 1]) * (pts[:, 0] - v3[:, 0])
          + (v3[:, 0] - v2[:, 0]) * (pts[:, 1] - v3[:, 1])) / det
    w2 = ((v3[:, 1] - v1[:, 1]) * (pts[:, 0] - v3[:, 0])
          + (v1[:, 0] - v3[:, 0]) * (pts[:, 1] - v3[:, 1])) / det
    return np.column_stack([w1, w2, 1.0 - w1 - w2])
