import numpy as np
import pytest
from hypothesis import given, strategies as st

from chmhd.mesh import (GeometryError, TopologyError, build_periodic_map, build_unit_square_mesh,
                        cell_geometry, mesh_from_cells)


def test_single_square_counts():
    m = build_unit_square_mesh(1)
    assert (m.n_vertices, m.n_cells, m.n_edges) == (4, 2, 5)
    assert len(m.all_boundary_edges()) == 4


def test_n8_counts_and_h():
    m = build_unit_square_mesh(8)
    assert m.n_vertices == 81 and m.n_cells == 128
    assert m.h == pytest.approx(np.sqrt(2) / 8, rel=1e-14)


def test_zero_subdivisions_rejected():
    with pytest.raises(ValueError):
        build_unit_square_mesh(0)


@given(st.integers(1, 12))
def test_mesh_invariants(n):
    m = build_unit_square_mesh(n)
    assert abs(m.areas().sum() - 1.0) < 1e-13
    assert np.all(m.jacobians()[1] > 0)
    assert m.n_vertices - m.n_edges + m.n_cells == 1
    assert np.all(m.edges[:, 0] < m.edges[:, 1])
    ec = m.edge_cells()
    interior = ec[:, 1] >= 0
    assert set(np.flatnonzero(~interior)) == set(m.all_boundary_edges())
    # opposite local orientation across interior edges
    for e in np.flatnonzero(interior)[:50]:
        c0, c1 = ec[e]
        s0 = m.cell_edge_signs[c0][list(m.cell_edges[c0]).index(e)]
        s1 = m.cell_edge_signs[c1][list(m.cell_edges[c1]).index(e)]
        assert s0 == -s1
    d = m.diameters()
    assert d.max() / d.min() <= 2


@given(st.integers(1, 8))
def test_refinement_quarters_area(n):
    a = build_unit_square_mesh(n).areas()
    b = build_unit_square_mesh(2 * n).areas()
    assert np.allclose(b, a[0] / 4, rtol=0, atol=1e-15)


def test_boundary_sides_tagged():
    m = build_unit_square_mesh(3)
    for side, (k, v) in {"x0": (0, 0), "x1": (0, 1), "y0": (1, 0), "y1": (1, 1)}.items():
        e = m.boundary_edges[side]
        assert len(e) == 3
        assert np.allclose(m.vertices[m.edges[e]][..., k], v)


def test_periodic_map_n2():
    m = build_unit_square_mesh(2)
    pm = build_periodic_map(m)
    assert len(pm.vertex_master) == 3
    for s, t in pm.vertex_master.items():
        assert m.vertices[s, 0] == 1.0 and m.vertices[t, 0] == 0.0
        assert abs(m.vertices[s, 1] - m.vertices[t, 1]) < 1e-12
    assert len(pm.edge_master) == 2
    assert set(pm.master_of) == {"vertex", "edge"}


def test_periodic_map_mismatch():
    v = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [1, 0.5]], float)
    cells = np.array([[0, 1, 4], [0, 4, 2], [0, 2, 3]])
    with pytest.raises(TopologyError):
        build_periodic_map(mesh_from_cells(v, cells))


def test_cell_geometry_reference_and_scaled():
    v = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    m = mesh_from_cells(v, np.array([[0, 1, 2], [1, 3, 2]]))
    J, det, invT = cell_geometry(m, 0)
    assert np.allclose(J, np.eye(2)) and det == 1.0 and np.allclose(invT, np.eye(2))
    n = 5
    m5 = build_unit_square_mesh(n)
    assert cell_geometry(m5, 7)[1] == pytest.approx(1 / n ** 2, rel=1e-13)


def test_cell_geometry_random_affine(rng):
    for _ in range(10):
        p = rng.random((3, 2))
        area = 0.5 * ((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1]))
        if area < 0:
            p = p[[0, 2, 1]]
            area = -area
        m = mesh_from_cells(p, np.array([[0, 1, 2]]))
        assert cell_geometry(m, 0)[1] == pytest.approx(2 * area, abs=1e-13)


def test_degenerate_cell_rejected():
    m = mesh_from_cells(np.array([[0, 0], [1, 0], [2, 0]], float), np.array([[0, 1, 2]]))
    with pytest.raises(GeometryError):
        cell_geometry(m, 0)
