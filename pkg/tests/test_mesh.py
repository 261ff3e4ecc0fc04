import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import bumpy_sphere, random_rotation
from meshadv.errors import (BoundaryError, DegenerateFaceError, IndexOutOfRange, IoError,
                            NonManifoldError, ParseError)
from meshadv.mesh import (Mesh, build_edges, grid, icosahedron, icosphere, load_mesh, one_rings,
                          save_mesh, tetrahedron, triangle_areas)

TRI_OFF = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"


def equilateral():
    return Mesh(np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]]), np.array([[0, 1, 2]]))


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestIO:
    def test_minimal_off(self, tmp_path):
        m = load_mesh(write(tmp_path, "t.off", TRI_OFF))
        assert m.n_vertices == 3 and m.n_faces == 1
        np.testing.assert_array_equal(m.faces, [[0, 1, 2]])

    def test_obj_matches_off(self, tmp_path):
        off = load_mesh(write(tmp_path, "t.off", TRI_OFF))
        obj = load_mesh(write(tmp_path, "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
        np.testing.assert_array_equal(off.vertices, obj.vertices)
        np.testing.assert_array_equal(off.faces, obj.faces)

    def test_obj_quad_fan(self, tmp_path):
        text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n"
        m = load_mesh(write(tmp_path, "q.obj", text))
        np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])

    def test_obj_ignores_other_directives(self, tmp_path):
        text = "# c\no thing\nv 0 0 0\nvn 0 0 1\nv 1 0 0\nv 0 1 0\nf 1//1 2//1 3//1\n"
        m = load_mesh(write(tmp_path, "n.obj", text))
        assert m.n_faces == 1

    def test_parse_error_reports_line(self, tmp_path):
        with pytest.raises(ParseError, match="line 4"):
            load_mesh(write(tmp_path, "bad.off", "OFF\n3 1 0\n0 0 0\n1 zero 0\n0 1 0\n3 0 1 2\n"))

    def test_index_out_of_range(self, tmp_path):
        with pytest.raises(IndexOutOfRange):
            load_mesh(write(tmp_path, "bad.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_mesh(tmp_path / "nope.off")

    def test_roundtrip_triangle(self, tmp_path):
        m = load_mesh(write(tmp_path, "t.off", TRI_OFF))
        save_mesh(m, tmp_path / "out.off")
        back = load_mesh(tmp_path / "out.off")
        np.testing.assert_array_equal(back.faces, m.faces)

    @pytest.mark.parametrize("ext", ["off", "obj"])
    def test_roundtrip_icosphere(self, tmp_path, sphere3, ext):
        save_mesh(sphere3, tmp_path / f"s.{ext}")
        back = load_mesh(tmp_path / f"s.{ext}")
        assert np.abs(back.vertices - sphere3.vertices).max() < 1e-9
        np.testing.assert_array_equal(back.faces, sphere3.faces)

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores permissions")
    def test_unwritable(self, tmp_path, sphere3):
        d = tmp_path / "ro"
        d.mkdir()
        d.chmod(0o500)
        with pytest.raises(IoError):
            save_mesh(sphere3, d / "x.off")

    def test_unwritable_missing_directory(self, tmp_path, sphere3):
        with pytest.raises(IoError):
            save_mesh(sphere3, tmp_path / "missing" / "dir" / "x.off")


class TestTopology:
    def test_single_triangle_edges(self):
        e = build_edges(equilateral())
        assert len(e) == 3
        assert e.is_boundary.all()
        np.testing.assert_allclose(e.angles[:, 0], np.pi / 3, atol=1e-12)

    def test_tetrahedron(self):
        e = tetrahedron().edges
        assert len(e) == 6 and e.is_closed

    def test_non_manifold(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], dtype=float)
        f = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])
        with pytest.raises(NonManifoldError):
            build_edges(Mesh(v, f))

    def test_boundary_rejected_when_closed_required(self):
        with pytest.raises(BoundaryError):
            build_edges(equilateral(), require_closed=True)

    def test_repeated_index_rejected(self):
        with pytest.raises(DegenerateFaceError):
            Mesh(np.eye(3), np.array([[0, 1, 1]]))

    @pytest.mark.parametrize("mesh, size", [(tetrahedron(), 3), (icosahedron(), 5)])
    def test_ring_sizes(self, mesh, size):
        assert all(len(r) == size for r in one_rings(mesh))

    def test_triangle_rings(self):
        assert [len(r) for r in one_rings(equilateral())] == [2, 2, 2]

    def test_rings_symmetric_no_loops(self, sphere3):
        rings = one_rings(sphere3)
        for i, r in enumerate(rings):
            assert i not in r
            assert all(i in rings[j] for j in r)
            assert np.all(np.diff(r) > 0)

    @pytest.mark.parametrize("mesh", [tetrahedron(), icosahedron(), icosphere(1), icosphere(3),
                                      bumpy_sphere(0)], ids=["tet", "ico", "s1", "s3", "bumpy"])
    def test_euler(self, mesh):
        assert mesh.euler_characteristic() == 2
        assert len(mesh.edges) == 3 * mesh.n_vertices - 6


class TestGeometry:
    def test_right_triangle_area(self):
        m = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float), np.array([[0, 1, 2]]))
        assert triangle_areas(m)[0] == pytest.approx(0.5, abs=1e-15)

    def test_equilateral_area(self):
        assert triangle_areas(equilateral())[0] == pytest.approx(np.sqrt(3) / 4, abs=1e-12)

    def test_collinear_degenerate(self):
        m = Mesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float), np.array([[0, 1, 2]]))
        with pytest.raises(DegenerateFaceError):
            triangle_areas(m)

    def test_angles_sum_to_pi(self, sphere3):
        e = sphere3.edges
        total = np.zeros(sphere3.n_faces)
        for s in range(2):
            np.add.at(total, e.faces[:, s], e.angles[:, s])
        np.testing.assert_allclose(total, np.pi, atol=1e-9)

    def test_angles_in_open_interval(self, sphere3):
        a = sphere3.edges.angles
        assert (a > 0).all() and (a < np.pi).all()

    @given(st.integers(0, 2**32 - 1))
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        mesh = bumpy_sphere(seed % 7, subdivisions=1)
        R, t = random_rotation(rng), rng.normal(size=3) * 3
        moved = mesh.with_vertices(mesh.vertices @ R.T + t)
        np.testing.assert_allclose(moved.areas, mesh.areas, rtol=1e-9)
        np.testing.assert_allclose(moved.edges.angles, mesh.edges.angles, rtol=1e-9)

    def test_flat_grid_builds(self):
        m = grid(5, 4)
        assert m.n_vertices == 20 and not m.is_closed()
