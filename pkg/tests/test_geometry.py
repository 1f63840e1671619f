import numpy as np
import pytest

from evdeform import geometry
from evdeform.errors import DegenerateTriangleError

UNIT = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def random_triangle(rng, min_area=0.05):
    while True:
        v = rng.uniform(-10, 10, (3, 2))
        if geometry.triangle_area(v) < -min_area:
            v = v[[0, 2, 1]]
        if geometry.triangle_area(v) > min_area:
            return v


class TestSignedSide:
    def test_unit_case(self):
        assert geometry.signed_side((0, 0), (1, 0), (0, 1)) == pytest.approx(1.0)

    def test_collinear(self):
        assert geometry.signed_side((0, 0), (1, 0), (0.5, 0)) == 0.0

    def test_hand_expanded_determinant(self):
        # (b-a) x (p-a) = (3, 2) x (2, -1) = 3*(-1) - 2*2 = -7
        assert geometry.signed_side((2, 1), (5, 3), (4, 0)) == pytest.approx(-7.0)


class TestPointInTriangle:
    def test_interior(self):
        assert geometry.point_in_triangle((0.25, 0.25), UNIT)

    def test_exterior(self):
        assert not geometry.point_in_triangle((1, 1), UNIT)

    def test_boundary_counts_inside(self):
        assert geometry.point_in_triangle((0.5, 0.0), UNIT)

    def test_degenerate_raises(self):
        flat = np.array([[0, 0], [1, 0], [2, 0]], dtype=float)
        with pytest.raises(DegenerateTriangleError):
            geometry.point_in_triangle((0, 0), flat)


class TestBarycentric:
    def test_centroid(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            v = random_triangle(rng)
            w = geometry.barycentric_of(v.mean(axis=0), v)
            assert np.allclose(w, 1 / 3)

    def test_vertex(self):
        w = geometry.barycentric_of(UNIT[0], UNIT)
        assert np.allclose(w, [1.0, 0.0, 0.0])

    def test_against_linear_solve_oracle(self):
        # independent oracle: solve [[V1 V2 V3],[1 1 1]] w = [p, 1]
        p = np.array([0.2, 0.3])
        mat = np.vstack([UNIT.T, np.ones(3)])
        expected = np.linalg.solve(mat, np.array([p[0], p[1], 1.0]))
        w = geometry.barycentric_of(p, UNIT)
        assert np.allclose(w, expected)
        assert np.allclose(w, [0.5, 0.2, 0.3])

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateTriangleError):
            geometry.barycentric_of((0, 0), np.array([[0, 0], [1, 1], [2, 2]], dtype=float))


class TestAffineFromTriangles:
    def test_identity(self):
        m = geometry.affine_from_triangles(UNIT, UNIT)
        assert np.allclose(m.a, np.eye(2))
        assert np.allclose(m.b, 0)

    def test_translation(self):
        m = geometry.affine_from_triangles(UNIT, UNIT + np.array([3.0, -2.0]))
        assert np.allclose(m.a, np.eye(2))
        assert np.allclose(m.b, [3.0, -2.0])

    def test_axis_stretch(self):
        deformed = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
        m = geometry.affine_from_triangles(UNIT, deformed)
        assert np.allclose(m.a, [[2.0, 0.0], [0.0, 1.0]])
        assert np.allclose(m.b, 0)

    def test_maps_vertices_exactly(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            rest = random_triangle(rng)
            deformed = random_triangle(rng)
            m = geometry.affine_from_triangles(rest, deformed)
            assert np.allclose(m.apply(rest), deformed, atol=1e-9)


class TestGridMesh:
    def test_default_counts(self):
        mesh = geometry.make_grid_mesh((0, 0, 32, 32))
        assert mesh.num_anchors == 9
        assert mesh.num_triangles == 8

    def test_positive_orientation(self):
        mesh = geometry.make_grid_mesh((0, 0, 10, 20), nx=3, ny=2)
        assert (geometry._signed_areas(mesh.triangle_vertices()) > 0).all()

    def test_total_area_covers_roi(self):
        mesh = geometry.make_grid_mesh((2, 3, 12, 9), nx=4, ny=3)
        assert mesh.rest_areas().sum() == pytest.approx(10 * 6)


class TestSubdivide:
    def test_single_triangle_counts(self):
        mesh = geometry.SimplicialMesh(UNIT.copy(), np.array([[0, 1, 2]]))
        sub = geometry.subdivide(mesh)
        assert sub.num_triangles == 4
        assert sub.num_anchors == 6
        assert sub.level == 1
        assert np.array_equal(sub.parent_map, [0, 0, 0, 0])

    def test_shared_edge_dedup_against_enumeration_oracle(self):
        anchors = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 2.0], [3.0, 2.0]])
        mesh = geometry.SimplicialMesh(anchors, np.array([[0, 1, 2], [1, 3, 2]]))
        sub = geometry.subdivide(mesh)
        # oracle: unique midpoints by brute-force dedup of all edge midpoints
        mids = set()
        for tri in mesh.triangles:
            for i in range(3):
                a, b = sorted((tri[i], tri[(i + 1) % 3]))
                mids.add((a, b))
        assert sub.num_triangles == 8
        assert sub.num_anchors == mesh.num_anchors + len(mids) == 9

    def test_area_preserved(self):
        mesh = geometry.make_grid_mesh((0, 0, 17, 13), nx=2, ny=2)
        sub = geometry.subdivide(mesh)
        assert abs(sub.rest_areas().sum() - mesh.rest_areas().sum()) < 1e-9

    def test_children_not_degenerate(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            v = random_triangle(rng, min_area=1e-6)
            mesh = geometry.SimplicialMesh(v, np.array([[0, 1, 2]]))
            sub = geometry.subdivide(mesh)
            assert (np.abs(geometry._signed_areas(sub.triangle_vertices())) > 1e-9).all()

    def test_hierarchy_anchor_nesting(self):
        mesh = geometry.make_grid_mesh((0, 0, 8, 8))
        chain = geometry.build_hierarchy(mesh, 2)
        for lo, hi in zip(chain, chain[1:]):
            assert np.array_equal(hi.anchors[:lo.num_anchors], lo.anchors)


class TestInvariants:
    def test_affine_reproduction(self):
        # interpolating an affine function through the vertices reproduces it
        rng = np.random.default_rng(5)
        for _ in range(5):
            v = random_triangle(rng)
            a = rng.normal(size=(2, 2))
            b = rng.normal(size=2)
            for _ in range(50):
                w = rng.dirichlet(np.ones(3))
                p = w @ v
                lam = geometry.barycentric_of(p, v)
                interp = lam @ (v @ a.T + b)
                assert np.allclose(interp, a @ p + b, atol=1e-9)

    def test_reconstruction_roundtrip(self):
        rng = np.random.default_rng(9)
        v = random_triangle(rng)
        for _ in range(1000):
            p = rng.dirichlet(np.ones(3)) @ v
            lam = geometry.barycentric_of(p, v)
            assert np.allclose(lam @ v, p, atol=1e-9)
            assert lam.sum() == pytest.approx(1.0, abs=1e-9)

    def test_containment_agrees_with_weights(self):
        rng = np.random.default_rng(13)
        v = random_triangle(rng)
        pts = rng.uniform(-12, 12, (500, 2))
        for p in pts:
            inside = geometry.point_in_triangle(p, v)
            lam = geometry.barycentric_of(p, v)
            assert inside == bool((lam >= -1e-12).all())


class TestLocatePoints:
    def test_matches_bruteforce_scan(self):
        rng = np.random.default_rng(21)
        mesh = geometry.make_grid_mesh((0, 0, 40, 40))
        verts = mesh.triangle_vertices()
        pts = rng.uniform(-5, 45, (400, 2))
        tri, lam = geometry.locate_points(pts, verts)
        for i, p in enumerate(pts):
            expected = -1
            for t in range(mesh.num_triangles):
                if geometry.point_in_triangle(p, verts[t]):
                    expected = t
                    break
            assert tri[i] == expected
            if expected >= 0:
                assert np.allclose(lam[i], geometry.barycentric_of(p, verts[expected]))

    def test_shared_edge_goes_to_first_triangle(self):
        mesh = geometry.make_grid_mesh((0, 0, 2, 2), nx=1, ny=1)
        # diagonal of the square is shared between triangles 0 and 1
        tri, _ = geometry.locate_points(np.array([[1.0, 1.0]]), mesh.triangle_vertices())
        assert tri[0] == 0
