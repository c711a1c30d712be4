"""Reference elements, DOF maps and finite element fields on triangle meshes.

Supported element kinds: continuous P1 and P2, the MINI element (P1 plus a
cubic bubble, value 1 at the centroid), lowest-order first-kind Nedelec edge
elements and piecewise constants.  Vector-valued Lagrange/MINI spaces store
components blockwise: global dof = component * n_scalar + scalar dof.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Union

import numpy as np

from .mesh import SIDES, Mesh, PeriodicMap
from .quadrature import gauss_legendre_01, quadrature_rule


class ElementKind(str, enum.Enum):
    LAGRANGE1 = "Lagrange1"
    LAGRANGE2 = "Lagrange2"
    MINI = "Mini"
    NEDELEC0 = "Nedelec0"
    DG0 = "DG0"


class ConstraintError(ValueError):
    pass


# gradients of the barycentric coordinates on the reference triangle
REF_GRAD_LAMBDA = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
BUBBLE_SCALE = 27.0
# local edge k runs from local vertex k+1 to k+2 (counter-clockwise)
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


@dataclass(frozen=True)
class AnalyticField:
    """A closed-form field given by callables of physical coordinates.

    ``value(x, y)`` returns an array of shape ``x.shape`` (scalar) or
    ``x.shape + (2,)`` (vector).  ``grad`` adds a trailing direction axis and
    ``curl`` returns the scalar 2D curl.
    """

    value: Callable
    grad: Optional[Callable] = None
    curl: Optional[Callable] = None


def constant_field(c) -> AnalyticField:
    c = np.asarray(c, float)
    if c.ndim == 0:
        return AnalyticField(lambda x, y: np.full(np.shape(x), float(c)),
                             lambda x, y: np.zeros(np.shape(x) + (2,)))
    return AnalyticField(lambda x, y: np.broadcast_to(c, np.shape(x) + (2,)).copy(),
                         lambda x, y: np.zeros(np.shape(x) + (2, 2)),
                         lambda x, y: np.zeros(np.shape(x)))


# ---------------------------------------------------------------------------
# reference bases

def _scalar_table(kind: ElementKind, bary: np.ndarray):
    """Values (nq, nb) and barycentric derivatives (nq, nb, 3) of scalar bases."""
    L = np.atleast_2d(np.asarray(bary, float))
    nq = len(L)
    if kind is ElementKind.LAGRANGE1:
        return L.copy(), np.broadcast_to(np.eye(3), (nq, 3, 3)).copy()
    if kind is ElementKind.MINI:
        b = BUBBLE_SCALE * L[:, 0] * L[:, 1] * L[:, 2]
        db = BUBBLE_SCALE * np.stack([L[:, 1] * L[:, 2], L[:, 0] * L[:, 2], L[:, 0] * L[:, 1]], axis=1)
        vals = np.column_stack([L, b])
        d = np.zeros((nq, 4, 3))
        d[:, :3, :] = np.eye(3)
        d[:, 3, :] = db
        return vals, d
    if kind is ElementKind.LAGRANGE2:
        vals = np.zeros((nq, 6))
        d = np.zeros((nq, 6, 3))
        for i in range(3):
            vals[:, i] = L[:, i] * (2 * L[:, i] - 1)
            d[:, i, i] = 4 * L[:, i] - 1
        for k, (a, b) in enumerate(LOCAL_EDGES):
            vals[:, 3 + k] = 4 * L[:, a] * L[:, b]
            d[:, 3 + k, a] = 4 * L[:, b]
            d[:, 3 + k, b] = 4 * L[:, a]
        return vals, d
    if kind is ElementKind.DG0:
        return np.ones((nq, 1)), np.zeros((nq, 1, 3))
    raise ValueError(f"{kind} is not a scalar element")


def reference_basis(kind: Union[ElementKind, str], point):
    """Basis values and derivatives at one barycentric point of the reference triangle.

    Returns ``(values, gradients)`` for scalar kinds and ``(values, curls)``
    for Nedelec0, whose three vector functions are
    ``lambda_a grad lambda_b - lambda_b grad lambda_a`` along the
    counter-clockwise local edges; each has constant curl 2.
    """
    kind = ElementKind(kind)
    L = np.asarray(point, float).reshape(1, 3)
    if kind is ElementKind.NEDELEC0:
        vals = np.zeros((3, 2))
        for k, (a, b) in enumerate(LOCAL_EDGES):
            vals[k] = L[0, a] * REF_GRAD_LAMBDA[b] - L[0, b] * REF_GRAD_LAMBDA[a]
        curls = np.array([2 * _cross(REF_GRAD_LAMBDA[a], REF_GRAD_LAMBDA[b]) for a, b in LOCAL_EDGES])
        return vals, curls
    v, d = _scalar_table(kind, L)
    return v[0], d[0] @ REF_GRAD_LAMBDA


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


# ---------------------------------------------------------------------------
# dof maps

_LOCAL_SIZE = {ElementKind.LAGRANGE1: 3, ElementKind.LAGRANGE2: 6, ElementKind.MINI: 4,
               ElementKind.NEDELEC0: 3, ElementKind.DG0: 1}


@dataclass(frozen=True, eq=False)
class DofMap:
    mesh: Mesh
    kind: ElementKind
    components: int
    n_scalar: int
    cell_dofs: np.ndarray        # (nc, nloc) global indices
    cell_signs: np.ndarray       # (nc, nloc) +-1 (Nedelec orientation), else ones
    dirichlet: np.ndarray        # sorted constrained dofs
    mean_zero: bool
    periodic: Dict[int, int]     # aliased entity -> master entity (informational)
    node_coords: Optional[np.ndarray] = None   # (n_scalar, 2) for nodal kinds
    node_is_bubble: Optional[np.ndarray] = None
    dof_edges: Optional[np.ndarray] = None     # (n_scalar,) representative edge per Nedelec dof
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_dofs(self) -> int:
        return self.n_scalar * self.components

    @property
    def n_local(self) -> int:
        return self.cell_dofs.shape[1]

    @property
    def is_vector(self) -> bool:
        return self.kind is ElementKind.NEDELEC0 or self.components == 2

    @property
    def constraints(self):
        out = [(int(d), "dirichlet", None) for d in self.dirichlet]
        out += [(int(s), "periodic", int(m)) for s, m in self.periodic.items()]
        if self.mean_zero:
            out.append((None, "mean_zero_group", None))
        return out

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, bool)
        mask[self.dirichlet] = False
        return np.flatnonzero(mask)


def _compact(master: np.ndarray):
    """Renumber an entity -> master array onto 0..k-1 following master order."""
    uniq, inv = np.unique(master, return_inverse=True)
    return inv, len(uniq), uniq


def _sides_per_component(dirichlet, components) -> Dict[int, frozenset]:
    if dirichlet is None:
        return {c: frozenset() for c in range(components)}
    if isinstance(dirichlet, Mapping):
        out = {c: frozenset(dirichlet.get(c, ())) for c in range(components)}
    else:
        sides = frozenset([dirichlet] if isinstance(dirichlet, str) else dirichlet)
        out = {c: sides for c in range(components)}
    for sides in out.values():
        unknown = set(sides) - set(SIDES)
        if unknown:
            raise ConstraintError(f"unknown boundary side(s) {sorted(unknown)}")
    return out


def build_dof_map(mesh: Mesh, kind: Union[ElementKind, str], components: int = 1,
                  dirichlet: Union[None, str, Iterable[str], Mapping[int, Iterable[str]]] = None,
                  mean_zero: bool = False, periodic: Optional[PeriodicMap] = None) -> DofMap:
    """Global numbering for one finite element space.

    ``dirichlet`` lists boundary sides whose dofs are essential: for nodal
    kinds per component (a mapping ``component -> sides`` or one set for all
    components), for Nedelec0 the sides with prescribed tangential trace.
    Periodic partners are aliased onto their x = 0 masters.
    """
    kind = ElementKind(kind)
    if kind is ElementKind.NEDELEC0 and components != 1:
        raise ValueError("Nedelec0 is already vector valued; use components=1")
    sides = _sides_per_component(dirichlet, components)
    if mean_zero and any(sides.values()):
        raise ConstraintError("a space cannot carry both Dirichlet and mean-zero constraints")
    if periodic is not None and any(s & {"x0", "x1"} for s in sides.values()):
        raise ConstraintError("Dirichlet data on x-sides conflicts with periodicity in x")

    nv, nc, ne = mesh.n_vertices, mesh.n_cells, mesh.n_edges
    vmaster = np.arange(nv)
    emaster = np.arange(ne)
    esign = np.ones(ne, np.int64)
    aliases: Dict[int, int] = {}
    if periodic is not None:
        for s, m in periodic.vertex_master.items():
            vmaster[s] = m
        for s, m in periodic.edge_master.items():
            emaster[s] = m
            esign[s] = periodic.edge_sign[s]

    node_coords = node_bubble = dof_edges = None
    signs = np.ones((nc, _LOCAL_SIZE[kind]), np.int64)
    boundary_scalar: Dict[str, np.ndarray] = {}

    if kind in (ElementKind.LAGRANGE1, ElementKind.MINI, ElementKind.LAGRANGE2):
        vnum, nvd, vuniq = _compact(vmaster)
        cell_dofs = vnum[mesh.cells]
        coords = [mesh.vertices[vuniq]]
        bubble = [np.zeros(nvd, bool)]
        n_scalar = nvd
        for s in SIDES:
            boundary_scalar[s] = np.unique(vnum[mesh.boundary_vertices(s)])
        if kind is ElementKind.MINI:
            cell_dofs = np.column_stack([cell_dofs, nvd + np.arange(nc)])
            coords.append(mesh.vertices[mesh.cells].mean(axis=1))
            bubble.append(np.ones(nc, bool))
            n_scalar += nc
        elif kind is ElementKind.LAGRANGE2:
            enum_, ned, euniq = _compact(emaster)
            cell_dofs = np.column_stack([cell_dofs, nvd + enum_[mesh.cell_edges]])
            coords.append(mesh.vertices[mesh.edges[euniq]].mean(axis=1))
            bubble.append(np.zeros(ned, bool))
            n_scalar += ned
            for s in SIDES:
                boundary_scalar[s] = np.concatenate(
                    [boundary_scalar[s], nvd + np.unique(enum_[mesh.boundary_edges[s]])])
        node_coords = np.vstack(coords)
        node_bubble = np.concatenate(bubble)
        aliases = {int(s): int(m) for s, m in enumerate(vmaster) if s != m}
    elif kind is ElementKind.NEDELEC0:
        enum_, n_scalar, euniq = _compact(emaster)
        cell_dofs = enum_[mesh.cell_edges]
        signs = mesh.cell_edge_signs * esign[mesh.cell_edges]
        dof_edges = euniq
        for s in SIDES:
            boundary_scalar[s] = np.unique(enum_[mesh.boundary_edges[s]])
        aliases = {int(s): int(m) for s, m in enumerate(emaster) if s != m}
    else:  # DG0
        cell_dofs = np.arange(nc)[:, None]
        n_scalar = nc
        node_coords = mesh.vertices[mesh.cells].mean(axis=1)
        node_bubble = np.zeros(nc, bool)

    if components > 1:
        nloc = cell_dofs.shape[1]
        cell_dofs = np.concatenate([cell_dofs + c * n_scalar for c in range(components)], axis=1)
        signs = np.ones((nc, nloc * components), np.int64)

    constrained = []
    for c, ss in sides.items():
        for s in sorted(ss):
            if kind is ElementKind.DG0:
                raise ConstraintError("DG0 spaces carry no boundary dofs")
            constrained.append(boundary_scalar[s] + c * n_scalar)
    dirichlet_dofs = np.unique(np.concatenate(constrained)) if constrained else np.zeros(0, np.int64)

    return DofMap(mesh=mesh, kind=kind, components=components, n_scalar=int(n_scalar),
                  cell_dofs=np.ascontiguousarray(cell_dofs, dtype=np.int64),
                  cell_signs=np.ascontiguousarray(signs), dirichlet=dirichlet_dofs.astype(np.int64),
                  mean_zero=mean_zero, periodic=aliases, node_coords=node_coords,
                  node_is_bubble=node_bubble, dof_edges=dof_edges)


# ---------------------------------------------------------------------------
# tabulation on physical cells

@dataclass
class Tabulation:
    values: np.ndarray                  # (nc, nq, nloc) or (nc, nq, nloc, 2)
    grads: Optional[np.ndarray] = None  # (nc, nq, nloc, 2) or (nc, nq, nloc, 2, 2) [comp, dir]
    curls: Optional[np.ndarray] = None  # (nc, nq, nloc), Nedelec only

    @property
    def div(self) -> np.ndarray:
        return self.grads[..., 0, 0] + self.grads[..., 1, 1]


def tabulate(space: DofMap, bary: np.ndarray, cells: Optional[np.ndarray] = None) -> Tabulation:
    """Physical basis functions of ``space`` at barycentric points in each cell.

    Orientation signs are folded in, so coefficients can be contracted directly.
    """
    mesh = space.mesh
    bary = np.atleast_2d(np.asarray(bary, float))
    G = mesh.barycentric_gradients()
    signs = space.cell_signs
    if cells is not None:
        G, signs = G[cells], signs[cells]
    nc, nq = len(G), len(bary)

    if space.kind is ElementKind.NEDELEC0:
        s = signs[:, None, :]
        vals = np.zeros((nc, nq, 3, 2))
        curls = np.zeros((nc, 3))
        for k, (a, b) in enumerate(LOCAL_EDGES):
            vals[:, :, k, :] = (bary[None, :, a, None] * G[:, None, b, :]
                                - bary[None, :, b, None] * G[:, None, a, :])
            curls[:, k] = 2.0 * _cross(G[:, a], G[:, b])
        vals = vals * s[..., None]
        curls = np.broadcast_to((curls * signs)[:, None, :], (nc, nq, 3))
        return Tabulation(values=vals, curls=curls)

    v, d = _scalar_table(space.kind, bary)
    grads = np.einsum("qba,cad->cqbd", d, G)
    vals = np.broadcast_to(v[None], (nc, nq, v.shape[1]))
    if space.components == 1:
        return Tabulation(values=vals, grads=grads)
    nb = v.shape[1]
    vv = np.zeros((nc, nq, 2 * nb, 2))
    gg = np.zeros((nc, nq, 2 * nb, 2, 2))
    for c in range(2):
        vv[:, :, c * nb:(c + 1) * nb, c] = vals
        gg[:, :, c * nb:(c + 1) * nb, c, :] = grads
    return Tabulation(values=vv, grads=gg)


@dataclass
class FEField:
    dofmap: DofMap
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, float)
        if self.coefficients.shape != (self.dofmap.n_dofs,):
            raise ValueError(f"expected {self.dofmap.n_dofs} coefficients, got {self.coefficients.shape}")

    def local(self, cells: Optional[np.ndarray] = None) -> np.ndarray:
        cd = self.dofmap.cell_dofs if cells is None else self.dofmap.cell_dofs[cells]
        return self.coefficients[cd]

    def at(self, bary: np.ndarray, what: str = "value", cells: Optional[np.ndarray] = None) -> np.ndarray:
        """Evaluate on every (or the given) cell at barycentric points: (nc, nq, ...)."""
        tab = tabulate(self.dofmap, bary, cells) if cells is not None else cached_tabulation(self.dofmap, bary)
        coef = self.local(cells)
        if what == "value":
            arr = tab.values
        elif what == "grad":
            if tab.grads is None:
                raise ValueError("Nedelec fields have no full gradient; use 'curl'")
            arr = tab.grads
        elif what == "curl":
            if tab.curls is None:
                raise ValueError("curl is only available for Nedelec fields")
            arr = tab.curls
        elif what == "div":
            arr = tab.div
        else:
            raise ValueError(f"unknown evaluation request {what!r}")
        return contract(arr, coef)


def cached_tabulation(space: DofMap, bary: np.ndarray) -> Tabulation:
    """:func:`tabulate` on all cells, memoized on the dof map per point set."""
    bary = np.atleast_2d(np.asarray(bary, float))
    key = ("tab", bary.shape, bary.tobytes())
    if key not in space._cache:
        space._cache[key] = tabulate(space, bary)
    return space._cache[key]


def contract(arr: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """sum_b arr[c, q, b, ...] coef[c, b] as a batched matmul."""
    nc, nq, nb = arr.shape[:3]
    out = np.matmul(coef[:, None, None, :], arr.reshape(nc, nq, nb, -1))
    return out.reshape((nc, nq) + arr.shape[3:])


def evaluate(field: FEField, cell: int, point, what: str = "value") -> np.ndarray:
    """Value, gradient, divergence or scalar curl of ``field`` at one barycentric point of one cell."""
    return field.at(np.asarray(point, float).reshape(1, 3), what, cells=np.array([cell]))[0, 0]


def sample(target, space_or_mesh, bary: np.ndarray, what: str = "value") -> np.ndarray:
    """Evaluate an AnalyticField, plain callable or FEField at barycentric points of every cell."""
    if isinstance(target, FEField):
        return target.at(bary, what)
    mesh = space_or_mesh.mesh if isinstance(space_or_mesh, DofMap) else space_or_mesh
    pts = mesh.map_points(bary)
    x, y = pts[..., 0], pts[..., 1]
    if callable(target) and not isinstance(target, AnalyticField):
        if what != "value":
            raise ValueError(f"a bare callable cannot provide {what!r}; wrap it in AnalyticField")
        return np.asarray(target(x, y), float)
    fn = {"value": target.value, "grad": target.grad, "curl": target.curl}.get(what)
    if what == "div" and target.grad is not None:
        g = np.asarray(target.grad(x, y), float)
        return g[..., 0, 0] + g[..., 1, 1]
    if fn is None:
        raise ValueError(f"analytic field does not provide {what!r}")
    return np.asarray(fn(x, y), float)


def _call_value(target, x, y):
    fn = target.value if isinstance(target, AnalyticField) else target
    return np.asarray(fn(x, y), float)


def interpolate(target, space: DofMap) -> FEField:
    """Canonical interpolant: nodal values (bubble coefficients 0) or edge tangential moments."""
    if isinstance(target, FEField):
        return _interpolate_fe(target, space)
    coef = np.zeros(space.n_dofs)
    if space.kind is ElementKind.NEDELEC0:
        coef[:] = edge_moments(target, space.mesh, space.dof_edges)
        return FEField(space, coef)
    xy = space.node_coords
    vals = _call_value(target, xy[:, 0], xy[:, 1])
    if space.components == 1:
        coef[:] = vals
    else:
        coef[:] = np.concatenate([vals[:, 0], vals[:, 1]])
    if space.kind is ElementKind.MINI:
        mask = np.tile(space.node_is_bubble, space.components)
        coef[mask] = 0.0
    return FEField(space, coef)


def _interpolate_fe(fe: FEField, space: DofMap) -> FEField:
    """Interpolate a finite element field by evaluating it cellwise."""
    if space.kind is ElementKind.NEDELEC0:
        mesh = space.mesh
        ec = mesh.edge_cells()
        s, w = gauss_legendre_01(3)
        coef = np.zeros(space.n_dofs)
        for dof, e in enumerate(space.dof_edges):
            c = ec[e, 0]
            a, b = mesh.edges[e]
            loc = list(mesh.cells[c])
            ia, ib = loc.index(a), loc.index(b)
            bary = np.zeros((len(s), 3))
            bary[:, ia] = 1 - s
            bary[:, ib] = s
            vals = fe.at(bary, "value", cells=np.array([c]))[0]
            coef[dof] = np.sum(w[:, None] * vals * (mesh.vertices[b] - mesh.vertices[a])[None, :])
        return FEField(space, coef)
    raise NotImplementedError("interpolating FE fields is only needed for Nedelec targets")


def edge_moments(target, mesh: Mesh, edges: np.ndarray, npts: int = 6) -> np.ndarray:
    """Tangential line integrals along edges oriented low -> high vertex index."""
    s, w = gauss_legendre_01(npts)
    a = mesh.vertices[mesh.edges[edges, 0]]
    b = mesh.vertices[mesh.edges[edges, 1]]
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    vals = _call_value(target, pts[..., 0], pts[..., 1])
    return np.einsum("q,eqd,ed->e", w, vals, b - a)


def boundary_values(target, space: DofMap) -> np.ndarray:
    """Interpolated values of ``target`` on the Dirichlet dofs of ``space``."""
    if len(space.dirichlet) == 0:
        return np.zeros(0)
    if isinstance(target, FEField) and target.dofmap is space:
        return target.coefficients[space.dirichlet].copy()
    if space.kind is ElementKind.NEDELEC0:
        return edge_moments(target, space.mesh, space.dof_edges[space.dirichlet])
    return interpolate(target, space).coefficients[space.dirichlet]


def integrate(field: FEField, quad_degree: int = 8) -> np.ndarray:
    q = quadrature_rule(quad_degree)
    vals = field.at(q.points)
    det = field.dofmap.mesh.jacobians()[1]
    return np.einsum("q,c,cq...->...", q.weights, det, vals)


def error_norm(field: FEField, exact, norm: str = "L2", quad_degree: int = 8) -> float:
    """Norm of ``field - exact``; ``norm`` is one of L2, H1_semi, Hcurl."""
    q = quadrature_rule(quad_degree)
    mesh = field.dofmap.mesh
    det = mesh.jacobians()[1]

    def sq(what):
        diff = field.at(q.points, what) - sample(exact, mesh, q.points, what)
        diff = diff.reshape(diff.shape[0], diff.shape[1], -1)
        return float(np.einsum("q,c,cqk->", q.weights, det, diff * diff))

    if norm == "L2":
        return np.sqrt(sq("value"))
    if norm == "H1_semi":
        return np.sqrt(sq("grad"))
    if norm == "Hcurl":
        return np.sqrt(sq("value") + sq("curl"))
    raise ValueError(f"unknown norm {norm!r}")

