"""Structured triangulations of the unit square with an oriented edge table."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

SIDES = ("x0", "x1", "y0", "y1")


class GeometryError(ValueError):
    pass


class TopologyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangle mesh.

    Attributes
    ----------
    vertices : (nv, 2) float array
    cells : (nc, 3) int array, counter-clockwise
    edges : (ne, 2) int array, lower vertex index first
    cell_edges : (nc, 3) int array; local edge k joins local vertices k+1 -> k+2
    cell_edge_signs : (nc, 3) array of +-1; +1 when the local (counter-clockwise)
        direction agrees with the global low-to-high edge direction
    boundary_edges : dict side -> sorted edge indices
    """

    vertices: np.ndarray
    cells: np.ndarray
    edges: np.ndarray
    cell_edges: np.ndarray
    cell_edge_signs: np.ndarray
    boundary_edges: Dict[str, np.ndarray]
    n: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def h(self) -> float:
        """Maximum cell diameter."""
        return float(self.diameters().max())

    def diameters(self) -> np.ndarray:
        p = self.vertices[self.cells]
        lens = np.stack([np.linalg.norm(p[:, (k + 2) % 3] - p[:, (k + 1) % 3], axis=1) for k in range(3)], axis=1)
        return lens.max(axis=1)

    def areas(self) -> np.ndarray:
        return 0.5 * self.jacobians()[1]

    def jacobians(self) -> Tuple[np.ndarray, np.ndarray]:
        """Affine map data for every cell: J (nc, 2, 2) and det J (nc,)."""
        if "jac" not in self._cache:
            p = self.vertices[self.cells]
            J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            self._cache["jac"] = (J, det)
        return self._cache["jac"]

    def barycentric_gradients(self) -> np.ndarray:
        """Constant gradients of the three barycentric coordinates, shape (nc, 3, 2)."""
        if "grad_lambda" not in self._cache:
            J, det = self.jacobians()
            if np.any(det <= 0):
                bad = int(np.flatnonzero(det <= 0)[0])
                raise GeometryError(f"cell {bad} is degenerate or clockwise (det={det[bad]:.3e})")
            invT = np.linalg.inv(J).transpose(0, 2, 1)
            ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
            self._cache["grad_lambda"] = np.einsum("cij,aj->cai", invT, ref)
        return self._cache["grad_lambda"]

    def edge_cells(self) -> np.ndarray:
        """(ne, 2) incident cells per edge, -1 for the missing neighbour of a boundary edge."""
        if "edge_cells" not in self._cache:
            ec = -np.ones((self.n_edges, 2), np.int64)
            count = np.zeros(self.n_edges, np.int64)
            for c, es in enumerate(self.cell_edges):
                for e in es:
                    ec[e, count[e]] = c
                    count[e] += 1
            self._cache["edge_cells"] = ec
        return self._cache["edge_cells"]

    def all_boundary_edges(self) -> np.ndarray:
        return np.unique(np.concatenate([self.boundary_edges[s] for s in SIDES]))

    def boundary_vertices(self, side: str) -> np.ndarray:
        return np.unique(self.edges[self.boundary_edges[side]])

    def map_points(self, bary: np.ndarray) -> np.ndarray:
        """Physical coordinates of barycentric points in every cell: (nc, nq, 2)."""
        p = self.vertices[self.cells]
        return np.einsum("qa,cad->cqd", np.atleast_2d(bary), p)


def cell_geometry(mesh: Mesh, cell: int) -> Tuple[np.ndarray, float, np.ndarray]:
    """Jacobian, determinant and inverse-transpose of the map from the reference triangle."""
    if not 0 <= cell < mesh.n_cells:
        raise IndexError(f"cell {cell} out of range")
    p = mesh.vertices[mesh.cells[cell]]
    J = np.column_stack([p[1] - p[0], p[2] - p[0]])
    det = float(np.linalg.det(J))
    if det <= 0:
        raise GeometryError(f"cell {cell} has non-positive Jacobian determinant {det:.3e}")
    return J, det, np.linalg.inv(J).T


def mesh_from_cells(vertices: np.ndarray, cells: np.ndarray, n: int = 0, tol: float = 1e-12) -> Mesh:
    """Build the edge table and boundary tags for a triangulation of the unit square."""
    vertices = np.asarray(vertices, float)
    cells = np.asarray(cells, np.int64)
    local = np.array([[1, 2], [2, 0], [0, 1]])
    directed = cells[:, local]                               # (nc, 3, 2)
    lo = directed.min(axis=2)
    hi = directed.max(axis=2)
    keys = np.stack([lo.ravel(), hi.ravel()], axis=1)
    edges, inverse = np.unique(keys, axis=0, return_inverse=True)
    cell_edges = inverse.reshape(-1, 3)
    signs = np.where(directed[:, :, 0] < directed[:, :, 1], 1, -1).astype(np.int64)

    counts = np.bincount(cell_edges.ravel(), minlength=len(edges))
    if counts.max() > 2:
        raise TopologyError("an edge is shared by more than two cells")
    bnd = np.flatnonzero(counts == 1)
    mid = vertices[edges[bnd]].mean(axis=1)
    boundary = {
        "x0": bnd[np.abs(mid[:, 0]) < tol],
        "x1": bnd[np.abs(mid[:, 0] - 1.0) < tol],
        "y0": bnd[np.abs(mid[:, 1]) < tol],
        "y1": bnd[np.abs(mid[:, 1] - 1.0) < tol],
    }
    return Mesh(vertices, cells, edges, cell_edges, signs, boundary, n=n)


def build_unit_square_mesh(n: int) -> Mesh:
    """Uniform n x n grid of squares, each split by its (0,0)-(1,1) diagonal.

    Vertex (i, j) sits at (i/n, j/n) with index j*(n+1) + i.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"need at least one subdivision per side, got n={n}")
    n = int(n)
    s = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(s, s)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    a = (j * (n + 1) + i).ravel()
    b, c, d = a + 1, a + n + 2, a + n + 1
    lower = np.stack([a, b, c], axis=1)
    upper = np.stack([a, c, d], axis=1)
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return mesh_from_cells(vertices, cells, n=n)


@dataclass(frozen=True)
class PeriodicMap:
    """Identification of x = 1 entities with their x = 0 partners."""

    vertex_master: Dict[int, int]
    edge_master: Dict[int, int]
    edge_sign: Dict[int, int]

    @property
    def master_of(self) -> Dict[str, Dict[int, int]]:
        return {"vertex": self.vertex_master, "edge": self.edge_master}


def build_periodic_map(mesh: Mesh, direction: str = "x", tol: float = 1e-12) -> PeriodicMap:
    if direction != "x":
        raise ValueError("only periodicity in x is supported")
    v = mesh.vertices
    left = np.flatnonzero(np.abs(v[:, 0]) < tol)
    right = np.flatnonzero(np.abs(v[:, 0] - 1.0) < tol)
    if len(left) != len(right):
        raise TopologyError("left and right boundaries carry different vertex counts")
    left_by_y = left[np.argsort(v[left, 1])]
    right_by_y = right[np.argsort(v[right, 1])]
    if np.max(np.abs(v[left_by_y, 1] - v[right_by_y, 1]), initial=0.0) > tol:
        raise TopologyError("left and right boundary vertices do not match in y")
    vmap = {int(r): int(l) for r, l in zip(right_by_y, left_by_y)}

    edge_index = {tuple(e): k for k, e in enumerate(mesh.edges.tolist())}
    emap, esign = {}, {}
    for e in mesh.boundary_edges["x1"]:
        a, b = mesh.edges[e]
        ma, mb = vmap[int(a)], vmap[int(b)]
        key = (min(ma, mb), max(ma, mb))
        if key not in edge_index:
            raise TopologyError(f"edge {e} on x=1 has no partner on x=0")
        emap[int(e)] = edge_index[key]
        esign[int(e)] = 1 if ma < mb else -1
    return PeriodicMap(vmap, emap, esign)
