"""Quadtree refinement, balance, constraints, slit splitting, VTK export."""

import numpy as np
import pytest

from limitfrac.mesh import QuadMesh, refine_global, refine_where, split_slit
from limitfrac.vtkio import read_vtk_points_and_scalars

from conftest import balanced


def test_global_refine_counts():
    mesh = refine_global(QuadMesh.unit_square(), 7)
    assert mesh.n_cells == 16384
    assert np.isclose(mesh.h_min, 0.0078125)
    assert not mesh.constraints


def test_refine_zero_is_identity():
    mesh = refine_global(QuadMesh.unit_square(), 2)
    again = refine_global(mesh, 0)
    assert again.n_cells == mesh.n_cells
    assert np.array_equal(again.cells, mesh.cells)
    assert np.allclose(again.vertices, mesh.vertices)


def test_single_refine_area():
    mesh = refine_global(QuadMesh.unit_square(), 1)
    assert mesh.n_cells == 4
    assert np.allclose(mesh.cell_size ** 2, 0.25)
    assert np.isclose(mesh.total_area(), 1.0)


def test_area_conserved_after_mixed_refinement():
    mesh = refine_global(QuadMesh.unit_square(), 3)
    mesh = refine_where(mesh, lambda x, y: x + y < 0.4, 2)
    mesh = refine_where(mesh, lambda x, y: (x - 0.9) ** 2 + (y - 0.9) ** 2 < 0.01, 1)
    assert abs(mesh.total_area() - 1.0) < 1e-12


def test_marker_false_is_identity():
    mesh = refine_global(QuadMesh.unit_square(), 3)
    again = refine_where(mesh, lambda x, y: False, 2)
    assert again.n_cells == mesh.n_cells


def test_corner_cascade_balances():
    mesh = refine_global(QuadMesh.unit_square(), 2)
    mesh = refine_where(mesh, lambda x, y: x < 0.25 and y < 0.25, 2)
    assert balanced(mesh)
    assert abs(mesh.total_area() - 1.0) < 1e-12


def test_constraint_weights_half():
    mesh = refine_global(QuadMesh.unit_square(), 2)
    mesh = refine_where(mesh, lambda x, y: x < 0.3, 1)
    assert mesh.constraints
    for slave, (masters, weights) in mesh.constraints.items():
        assert weights == (0.5, 0.5)
        mid = 0.5 * (mesh.vertices[masters[0]] + mesh.vertices[masters[1]])
        assert np.allclose(mesh.vertices[slave], mid)


def test_hanging_vertices_on_interfaces_only():
    mesh = refine_global(QuadMesh.unit_square(), 2)
    mesh = refine_where(mesh, lambda x, y: y > 0.7, 1)
    # every hanging vertex sits on the horizontal interface band y ~ 0.75
    for slave in mesh.constraints:
        assert mesh.vertices[slave][1] >= 0.5


def test_example3_mesh_hmin():
    band = 2.0 ** -7
    mesh = refine_global(QuadMesh.unit_square(), 7)
    mesh = refine_where(
        mesh, lambda x, y: (0.5 - band <= x <= 1.0
                            and 0.5 - band <= y <= 0.5 + band), 3)
    assert np.isclose(mesh.h_min, 0.0009765625)
    assert balanced(mesh)
    assert abs(mesh.total_area() - 1.0) < 1e-12


def test_refine_twice_vs_levels_2():
    marker = (lambda x, y: x < 0.28 and y < 0.28)
    base = refine_global(QuadMesh.unit_square(), 2)
    once = refine_where(refine_where(base, marker, 1), marker, 1)
    twice = refine_where(base, marker, 2)
    assert once.n_cells == twice.n_cells
    assert np.allclose(once.vertices, twice.vertices)


def test_hmin_matches_max_level():
    mesh = refine_global(QuadMesh.unit_square(), 4)
    mesh = refine_where(mesh, lambda x, y: x > 0.9, 2)
    max_level = int(mesh.cell_level.max())
    assert np.isclose(mesh.h_min, 1.0 / 2 ** max_level)


def test_rectangle_multi_root():
    mesh = QuadMesh.rectangle(0.0, 0.0, 2.0, 1.0, nx=2, ny=1)
    assert mesh.n_cells == 2
    mesh = refine_global(mesh, 2)
    assert mesh.n_cells == 32
    assert abs(mesh.total_area() - 2.0) < 1e-12
    with pytest.raises(ValueError):
        QuadMesh.rectangle(0.0, 0.0, 2.0, 1.0, nx=1, ny=1)


def test_split_slit_duplicates_vertices():
    mesh = refine_global(QuadMesh.unit_square(), 3)  # h = 0.125, line y=0.5 on grid
    nv0 = mesh.n_vertices
    slit = split_slit(mesh, 0.5, 0.5, 1.0)
    # interior line vertices at x in (0.5, 1.0]: x = 0.625..1.0 -> 4 vertices
    assert slit.n_vertices == nv0 + 4
    # tip vertex at (0.5, 0.5) is shared: below-cells still reference it
    tip = np.nonzero(np.isclose(slit.vertices[:, 0], 0.5)
                     & np.isclose(slit.vertices[:, 1], 0.5))[0]
    assert len(tip) == 1
    # cells below the slit reference the duplicated ids
    below = np.nonzero(slit.centroids()[:, 1] < 0.5)[0]
    dup_ids = set(range(nv0, slit.n_vertices))
    used_below = set(slit.cells[below].ravel())
    assert dup_ids <= used_below
    above = np.nonzero(slit.centroids()[:, 1] > 0.5)[0]
    assert not (dup_ids & set(slit.cells[above].ravel()))


def test_vtk_mesh_snapshot(tmp_path):
    mesh = refine_global(QuadMesh.unit_square(), 2)
    path = tmp_path / "mesh.vtk"
    mesh.save_vtk(str(path))
    pts, _, _ = read_vtk_points_and_scalars(str(path))
    assert len(pts) == mesh.n_vertices
    assert np.allclose(pts, mesh.vertices)
    header = path.read_text().splitlines()[0]
    assert header == "# vtk DataFile Version 3.0"
