"""Element kernels and global assembly for the convex-splitting CH-MHD step.

Every form is first computed as a stack of element matrices (one per cell,
vectorized over cells and quadrature points) and then scattered.  Stand-alone
matrices go through :func:`chmhd.linalg.triplets_to_csr`; the monolithic step
matrix uses a fixed sparsity pattern whose scatter map is built once per set
of spaces and reused for every time step and Newton iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .fem import DofMap, ElementKind, FEField, cached_tabulation, contract, sample
from .linalg import SparseMatrix, Triplets, triplets_to_csr
from .quadrature import quadrature_rule

QUAD_DEGREE = 6
FIELDS = ("phi", "omega", "u", "p", "B")


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class CoefficientModel:
    """Phase-dependent coefficient ``(v2 - v1)/2 * phi + (v2 + v1)/2``.

    Values are clamped from below at ``min(v1, v2) / 10`` to survive phase
    overshoot outside [-1, 1].
    """

    v1: float
    v2: float

    @classmethod
    def constant(cls, c: float) -> "CoefficientModel":
        return cls(float(c), float(c))

    @classmethod
    def linear_in_phi(cls, v1: float, v2: float) -> "CoefficientModel":
        return cls(float(v1), float(v2))

    @property
    def is_constant(self) -> bool:
        return self.v1 == self.v2

    @property
    def floor(self) -> float:
        return min(self.v1, self.v2) / 10.0

    def __call__(self, phi) -> np.ndarray:
        if self.floor <= 0:
            raise ParameterError(f"coefficient model {self} is not positive")
        if self.is_constant:
            return np.full(np.shape(phi), self.v1)
        val = 0.5 * (self.v2 - self.v1) * np.asarray(phi) + 0.5 * (self.v2 + self.v1)
        return np.maximum(val, self.floor)

    def __str__(self):
        return f"{self.v1:.17g}" if self.is_constant else f"{self.v1:.17g}, {self.v2:.17g}"


UNIT = CoefficientModel.constant(1.0)


# ---------------------------------------------------------------------------
# quadrature context

@dataclass
class QuadData:
    bary: np.ndarray
    W: np.ndarray   # (nc, nq) weight * |det J|


def quad_data(mesh, degree: int = QUAD_DEGREE) -> QuadData:
    key = ("quad", degree)
    if key not in mesh._cache:
        q = quadrature_rule(degree)
        det = mesh.jacobians()[1]
        mesh._cache[key] = QuadData(q.points, det[:, None] * q.weights[None, :])
    return mesh._cache[key]


def _tab(space: DofMap, degree: int = QUAD_DEGREE):
    return cached_tabulation(space, quad_data(space.mesh, degree).bary)


def _coef_at_q(model: Optional[CoefficientModel], phi_lag: Optional[FEField], mesh, degree=QUAD_DEGREE):
    qd = quad_data(mesh, degree)
    if model is None or model.is_constant:
        c = 1.0 if model is None else model.v1
        if c <= 0:
            raise ParameterError(f"non-positive coefficient {c}")
        return np.full(qd.W.shape, c)
    if phi_lag is None:
        raise ParameterError("a phase-dependent coefficient needs the lagged phase field")
    return model(phi_lag.at(qd.bary))


# ---------------------------------------------------------------------------
# element kernels: each returns (nc, n_test, n_trial)

def _gram(A: np.ndarray, B: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum over q (and trailing axes) of w[c,q] A[c,q,i,...] B[c,q,j,...] as a batched matmul."""
    nc, nq, ni = A.shape[:3]
    nj = B.shape[2]
    Aw = A * w.reshape(nc, nq, *([1] * (A.ndim - 2)))
    A2 = np.moveaxis(Aw, 2, 1).reshape(nc, ni, -1)
    B2 = np.moveaxis(B, 2, 1).reshape(nc, nj, -1)
    return A2 @ B2.transpose(0, 2, 1)


def _at(field: FEField, what: str = "value") -> np.ndarray:
    """Field values at the assembly quadrature points, using the cached tabulation."""
    t = _tab(field.dofmap)
    arr = {"value": t.values, "grad": t.grads, "curl": t.curls}[what]
    return contract(arr, field.local())


def local_mass(space: DofMap, weight=None) -> np.ndarray:
    W = quad_data(space.mesh).W if weight is None else quad_data(space.mesh).W * weight
    v = _tab(space).values
    return _gram(v, v, W)


def local_stiffness(space: DofMap, coef_q: np.ndarray) -> np.ndarray:
    g = _tab(space).grads
    return _gram(g, g, quad_data(space.mesh).W * coef_q)


def local_curl_curl(space: DofMap, coef_q: np.ndarray) -> np.ndarray:
    cu = _tab(space).curls
    return _gram(cu, cu, quad_data(space.mesh).W * coef_q)


def local_convection(u_space: DofMap, u_lag_q: np.ndarray) -> np.ndarray:
    """Skew form 1/2[(w . grad v_j, v_i) - (w . grad v_i, v_j)] for the lagged velocity w."""
    t = _tab(u_space)
    wg = np.einsum("cqjad,cqd->cqja", t.grads, u_lag_q)
    T = _gram(t.values, wg, quad_data(u_space.mesh).W)
    return 0.5 * (T - T.transpose(0, 2, 1))


def local_phase_transport(phi_space: DofMap, u_space: DofMap, grad_phi_q: np.ndarray) -> np.ndarray:
    """(grad phi_lag . v_j, varphi_i): rows phase test functions, columns velocity."""
    gv = np.einsum("cqjd,cqd->cqj", _tab(u_space).values, grad_phi_q)
    return _gram(_tab(phi_space).values, gv, quad_data(phi_space.mesh).W)


def local_lorentz(u_space: DofMap, B_space: DofMap, B_lag_q: np.ndarray) -> np.ndarray:
    """(curl zeta_j, v_i x B_lag): rows velocity, columns magnetic field."""
    v = _tab(u_space).values
    cross = v[..., 0] * B_lag_q[:, :, None, 1] - v[..., 1] * B_lag_q[:, :, None, 0]
    return _gram(cross, _tab(B_space).curls, quad_data(u_space.mesh).W)


def local_divergence(u_space: DofMap, p_space: DofMap) -> np.ndarray:
    """(div v_j, q_i): rows pressure, columns velocity."""
    return _gram(_tab(p_space).values, _tab(u_space).div, quad_data(u_space.mesh).W)


def local_load(space: DofMap, f_q: np.ndarray) -> np.ndarray:
    W = quad_data(space.mesh).W
    v = _tab(space).values
    if v.ndim == 3:
        return np.einsum("cq,cqi->ci", W * f_q, v)
    return np.einsum("cqd,cqid->ci", W[..., None] * f_q, v)


def local_cubic(space: DofMap, phi_q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Element vectors of (phi^3, psi_i) and matrices of (3 phi^2 psi_j, psi_i)."""
    W = quad_data(space.mesh).W
    v = _tab(space).values
    res = np.einsum("cq,cqi->ci", W * phi_q ** 3, v)
    return res, _gram(v, v, 3.0 * W * phi_q ** 2)


# ---------------------------------------------------------------------------
# global scatter for stand-alone matrices

def scatter_matrix(local: np.ndarray, rows: DofMap, cols: DofMap) -> SparseMatrix:
    nc, ni, nj = local.shape
    r = np.broadcast_to(rows.cell_dofs[:, :, None], (nc, ni, nj))
    c = np.broadcast_to(cols.cell_dofs[:, None, :], (nc, ni, nj))
    return triplets_to_csr(Triplets(r.ravel(), c.ravel(), local.ravel()), rows.n_dofs, cols.n_dofs)


def scatter_vector(local: np.ndarray, space: DofMap) -> np.ndarray:
    return np.bincount(space.cell_dofs.ravel(), weights=local.ravel(), minlength=space.n_dofs)


def assemble_mass(space: DofMap) -> SparseMatrix:
    return scatter_matrix(local_mass(space), space, space)


def assemble_stiffness(space: DofMap, coefficient: Optional[CoefficientModel] = None,
                       phi_lag: Optional[FEField] = None) -> SparseMatrix:
    """(c(phi_lag) grad u_j, grad v_i); unit coefficient when ``coefficient`` is None."""
    return scatter_matrix(local_stiffness(space, _coef_at_q(coefficient, phi_lag, space.mesh)), space, space)


def assemble_curl_curl(B_space: DofMap, sigma_model: Optional[CoefficientModel] = None,
                       phi_lag: Optional[FEField] = None) -> SparseMatrix:
    """(sigma(phi_lag)^-1 curl B_j, curl zeta_i)."""
    inv = 1.0 / _coef_at_q(sigma_model, phi_lag, B_space.mesh)
    return scatter_matrix(local_curl_curl(B_space, inv), B_space, B_space)


def assemble_convection(u_lag: FEField, u_space: DofMap) -> SparseMatrix:
    w = u_lag.at(quad_data(u_space.mesh).bary)
    return scatter_matrix(local_convection(u_space, w), u_space, u_space)


def assemble_phase_velocity_coupling(phi_lag: FEField, omega_space: DofMap,
                                     u_space: DofMap) -> Tuple[SparseMatrix, SparseMatrix]:
    """Transport block (u -> phase equation) and capillary block (omega -> momentum).

    The second is ``-(omega_j grad phi_lag, v_i)``, the negative transpose of
    the first; the capillary coefficient is applied by the caller.
    """
    g = phi_lag.at(quad_data(u_space.mesh).bary, "grad")
    A = local_phase_transport(omega_space, u_space, g)
    return scatter_matrix(A, omega_space, u_space), scatter_matrix(-A.transpose(0, 2, 1), u_space, omega_space)


def assemble_lorentz_coupling(B_lag: FEField, u_space: DofMap, B_space: DofMap,
                              mu: float = 1.0) -> Tuple[SparseMatrix, SparseMatrix]:
    """``mu^-1 (curl zeta_j, v_i x B_lag)`` and its transpose ``mu^-1 (v_j x B_lag, curl zeta_i)``.

    The scheme adds the first to the momentum rows and subtracts the second
    from the (mu^-1 scaled) induction rows.
    """
    Bq = B_lag.at(quad_data(u_space.mesh).bary)
    K = local_lorentz(u_space, B_space, Bq) / mu
    return scatter_matrix(K, u_space, B_space), scatter_matrix(K.transpose(0, 2, 1), B_space, u_space)


def assemble_divergence(u_space: DofMap, p_space: DofMap) -> SparseMatrix:
    """D[i, j] = (div v_j, q_i).  Momentum rows carry -D^T, continuity rows -D."""
    return scatter_matrix(local_divergence(u_space, p_space), p_space, u_space)


def assemble_load(space: DofMap, f) -> np.ndarray:
    f_q = sample(f, space.mesh, quad_data(space.mesh).bary)
    return scatter_vector(local_load(space, f_q), space)


def assemble_cubic(phi_new: FEField, phi_old: FEField, gamma: float = 1.0) -> Tuple[np.ndarray, SparseMatrix]:
    """Residual gamma^-1 (phi_new^3 - phi_old, psi_i) and its Jacobian in phi_new."""
    space = phi_new.dofmap
    bary = quad_data(space.mesh).bary
    res, jac = local_cubic(space, phi_new.at(bary))
    old = local_load(space, phi_old.at(bary))
    return scatter_vector(res - old, space) / gamma, scatter_matrix(jac / gamma, space, space)


# ---------------------------------------------------------------------------
# spaces and the monolithic system

@dataclass(frozen=True, eq=False)
class Spaces:
    """Element set: P1 phase/potential, MINI velocity, P1 pressure, Nedelec0 field."""

    phi: DofMap
    u: DofMap
    p: DofMap
    B: DofMap
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def omega(self) -> DofMap:
        return self.phi

    @property
    def mesh(self):
        return self.phi.mesh

    def space(self, name: str) -> DofMap:
        return getattr(self, name)

    @property
    def sizes(self) -> Dict[str, int]:
        return {f: self.space(f).n_dofs for f in FIELDS}

    @property
    def offsets(self) -> Dict[str, int]:
        off, acc = {}, 0
        for f in FIELDS:
            off[f] = acc
            acc += self.space(f).n_dofs
        off["mult"] = acc
        return off

    @property
    def n_total(self) -> int:
        return self.offsets["mult"] + 1


def build_spaces(mesh, velocity_dirichlet=("x0", "x1", "y0", "y1"),
                 B_dirichlet=("x0", "x1", "y0", "y1"), periodic=None) -> Spaces:
    from .fem import build_dof_map
    return Spaces(
        phi=build_dof_map(mesh, ElementKind.LAGRANGE1, periodic=periodic),
        u=build_dof_map(mesh, ElementKind.MINI, components=2, dirichlet=velocity_dirichlet, periodic=periodic),
        p=build_dof_map(mesh, ElementKind.LAGRANGE1, mean_zero=True, periodic=periodic),
        B=build_dof_map(mesh, ElementKind.NEDELEC0, dirichlet=B_dirichlet, periodic=periodic),
    )


# positions of each field inside the 20-dof element vector
LOCAL = {"phi": slice(0, 3), "omega": slice(3, 6), "u": slice(6, 14), "p": slice(14, 17), "B": slice(17, 20)}
N_LOCAL = 20
BUBBLES = np.array([9, 13])           # MINI bubble of each velocity component
KEPT = np.setdiff1d(np.arange(N_LOCAL), BUBBLES)

# (test field, trial field) pairs that carry nonzero element blocks
COUPLED_BLOCKS = (("phi", "phi"), ("phi", "omega"), ("phi", "u"),
                  ("omega", "phi"), ("omega", "omega"),
                  ("u", "u"), ("u", "p"), ("u", "B"), ("u", "omega"),
                  ("p", "u"),
                  ("B", "u"), ("B", "B"))


def _local_mask() -> np.ndarray:
    mask = np.zeros((N_LOCAL, N_LOCAL), bool)
    for tf, cf in COUPLED_BLOCKS:
        mask[LOCAL[tf], LOCAL[cf]] = True
    return mask


def _csr_pattern(keys: np.ndarray, n: int):
    uniq, inverse = np.unique(keys, return_inverse=True)
    rows, cols = uniq // n, uniq % n
    indptr = np.zeros(n + 1, np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), cols, rows, inverse


class MonolithicLayout:
    """Global numbering, sparsity patterns and scatter maps of the step system.

    Global ordering is [phi | omega | u | p | B | pressure multiplier].  Two
    patterns are kept: the full block pattern (for inspection and residuals),
    and the reduced pattern the linear solver factorizes, in which velocity
    bubbles are condensed out cell by cell and the Dirichlet dofs, the
    multiplier and one pinned pressure dof are removed.
    """

    def __init__(self, spaces: Spaces):
        self.spaces = spaces
        self.offsets = spaces.offsets
        self.n = n = spaces.n_total
        mult = self.offsets["mult"]
        self.cell_global = np.concatenate(
            [spaces.space(f).cell_dofs + self.offsets[f] for f in FIELDS], axis=1)
        nc = len(self.cell_global)

        # full pattern
        mask = _local_mask()
        li, lj = np.nonzero(mask)
        r = self.cell_global[:, li].ravel()
        c = self.cell_global[:, lj].ravel()
        p_dofs = np.arange(spaces.p.n_dofs) + self.offsets["p"]
        npd = len(p_dofs)
        keys = np.concatenate([r * n + c, p_dofs * n + mult, mult * n + p_dofs, [mult * n + mult]])
        self.indptr, self.indices, self.pattern_rows, inverse = _csr_pattern(keys, n)
        self.nnz = len(self.indices)
        self.local_pairs = (li, lj)
        self.full_index = inverse[: nc * len(li)].reshape(nc, len(li))
        pos = nc * len(li)
        self.mult_col_index = inverse[pos:pos + npd]
        self.mult_row_index = inverse[pos + npd:pos + 2 * npd]
        self.block_index: Dict[Tuple[str, str], np.ndarray] = {}
        for tf, cf in COUPLED_BLOCKS:
            sel = np.full((N_LOCAL, N_LOCAL), -1)
            sel[li, lj] = np.arange(len(li))
            self.block_index[(tf, cf)] = self.full_index[:, sel[LOCAL[tf], LOCAL[cf]]]

        # constraints
        self.dirichlet = np.concatenate([spaces.u.dirichlet + self.offsets["u"],
                                         spaces.B.dirichlet + self.offsets["B"]]).astype(np.int64)
        self.is_dirichlet = np.zeros(n, bool)
        self.is_dirichlet[self.dirichlet] = True
        self.keep = ~(self.is_dirichlet[self.pattern_rows] | self.is_dirichlet[self.indices])
        self.diag_positions = np.flatnonzero((self.pattern_rows == self.indices)
                                             & self.is_dirichlet[self.pattern_rows])
        self.bubbles = np.flatnonzero(np.tile(spaces.u.node_is_bubble, 2)) + self.offsets["u"]
        self.pinned = self.offsets["p"]

        # reduced pattern
        dropped = np.zeros(n, bool)
        dropped[self.dirichlet] = True
        dropped[self.bubbles] = True
        dropped[[mult, self.pinned]] = True
        self.solve_dofs = np.flatnonzero(~dropped)
        self.n_solve = len(self.solve_dofs)
        sid = -np.ones(n, np.int64)
        sid[self.solve_dofs] = np.arange(self.n_solve)
        self.kept_global = self.cell_global[:, KEPT]
        ksid = sid[self.kept_global]
        cmask = mask[np.ix_(KEPT, KEPT)] | (mask[np.ix_(KEPT, BUBBLES)].astype(int)
                                            @ mask[np.ix_(BUBBLES, KEPT)].astype(int) > 0)
        valid = (ksid[:, :, None] >= 0) & (ksid[:, None, :] >= 0) & cmask[None]
        rk = (np.broadcast_to(ksid[:, :, None], valid.shape)[valid] * self.n_solve
              + np.broadcast_to(ksid[:, None, :], valid.shape)[valid])
        self.red_indptr, self.red_indices, _, self.red_index = _csr_pattern(rk, self.n_solve)
        self.red_nnz = len(self.red_indices)
        # sums flattened (nc, 20, 20) element matrices into the reduced pattern
        flat = (np.arange(nc)[:, None, None] * N_LOCAL ** 2 + KEPT[:, None] * N_LOCAL + KEPT[None, :])[valid]
        self.red_sum = sp.csr_matrix((np.ones(len(flat)), (self.red_index, flat)),
                                     shape=(self.red_nnz, nc * N_LOCAL ** 2))
        om, ph = np.arange(3, 6), np.arange(0, 3)      # (omega, phi) block inside KEPT
        cub = np.full((nc, 18, 18), -1, np.int64)
        cub[valid] = self.red_index
        self.red_cubic_index = cub[:, om][:, :, ph]

    # -- full pattern ------------------------------------------------------
    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def constrained_matrix(self, data: np.ndarray) -> sp.csr_matrix:
        """Rows and columns of Dirichlet dofs replaced by the identity."""
        d = np.where(self.keep, data, 0.0)
        d[self.diag_positions] = 1.0
        return self.matrix(d)

    def reduced_matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.red_indices, self.red_indptr), shape=(self.n_solve, self.n_solve))

    def split(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        out = {f: x[self.offsets[f]:self.offsets[f] + self.spaces.space(f).n_dofs] for f in FIELDS}
        out["mult"] = x[self.offsets["mult"]:]
        return out

    def join(self, parts: Dict[str, np.ndarray]) -> np.ndarray:
        x = np.zeros(self.n)
        for f in FIELDS:
            x[self.offsets[f]:self.offsets[f] + self.spaces.space(f).n_dofs] = parts[f]
        return x


def layout_for(spaces: Spaces) -> MonolithicLayout:
    if "layout" not in spaces._cache:
        spaces._cache["layout"] = MonolithicLayout(spaces)
    return spaces._cache["layout"]


@dataclass
class BlockSystem:
    """Linear part of one time step, held as element matrices, plus cubic-term data.

    ``local`` is the (nc, 20, 20) stack of element matrices and ``local_rhs``
    the element load vectors; ``mult`` holds the integrals of the pressure
    basis functions coupling the zero-mean multiplier.
    """

    layout: MonolithicLayout
    local: np.ndarray
    local_rhs: np.ndarray
    mult: np.ndarray
    gamma: float
    dirichlet_values: np.ndarray     # aligned with layout.dirichlet
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def offsets(self) -> Dict[str, int]:
        return self.layout.offsets

    @property
    def data(self) -> np.ndarray:
        """Matrix values on the full pattern."""
        if "data" not in self._cache:
            L = self.layout
            li, lj = L.local_pairs
            self._cache["data"] = np.bincount(
                np.concatenate([L.full_index.ravel(), L.mult_col_index, L.mult_row_index]),
                weights=np.concatenate([self.local[:, li, lj].ravel(), self.mult, self.mult]),
                minlength=L.nnz)
        return self._cache["data"]

    @property
    def matrix(self) -> sp.csr_matrix:
        return self.layout.matrix(self.data)

    @property
    def rhs(self) -> np.ndarray:
        if "rhs" not in self._cache:
            self._cache["rhs"] = np.bincount(self.layout.cell_global.ravel(), weights=self.local_rhs.ravel(),
                                             minlength=self.layout.n)
        return self._cache["rhs"]

    def rhs_parts(self) -> Dict[str, np.ndarray]:
        return self.layout.split(self.rhs)

    @property
    def blocks(self) -> Dict[Tuple[str, str], SparseMatrix]:
        A = self.matrix
        names = list(FIELDS) + ["mult"]
        sizes = dict(self.layout.spaces.sizes, mult=1)
        out = {}
        for a in names:
            for b in names:
                sub = A[self.offsets[a]:self.offsets[a] + sizes[a], self.offsets[b]:self.offsets[b] + sizes[b]]
                if sub.nnz:
                    out[(a, b)] = SparseMatrix.from_scipy(sub)
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Linear part times ``x`` evaluated element by element."""
        L = self.layout
        y = np.bincount(L.cell_global.ravel(),
                        weights=(self.local @ x[L.cell_global][:, :, None]).ravel(), minlength=L.n)
        mult = L.offsets["mult"]
        sl = slice(L.offsets["p"], L.offsets["p"] + len(self.mult))
        y[sl] += self.mult * x[mult]
        y[mult] += self.mult @ x[sl]
        return y

    def cubic_local(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        sp_ = self.layout.spaces
        phi = FEField(sp_.phi, x[:sp_.phi.n_dofs])
        res, jac = local_cubic(sp_.phi, _at(phi))
        return res / self.gamma, jac / self.gamma

    def cubic(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Cubic residual (full-length vector) and its Jacobian values on the full pattern."""
        res_l, jac_l = self.cubic_local(x)
        sp_ = self.layout.spaces
        res = np.zeros(self.layout.n)
        off = self.offsets["omega"]
        res[off:off + sp_.phi.n_dofs] = scatter_vector(res_l, sp_.phi)
        jac = np.bincount(self.layout.block_index[("omega", "phi")].ravel(), weights=jac_l.ravel(),
                          minlength=self.layout.nnz)
        return res, jac

    def residual(self, x: np.ndarray) -> np.ndarray:
        """Residual of every equation; rows of Dirichlet dofs are zeroed."""
        r = self.apply(x) - self.rhs + self.cubic(x)[0]
        r[self.layout.dirichlet] = 0.0
        return r

    # -- condensed solve -----------------------------------------------------
    def _condensation(self):
        if "cond" not in self._cache:
            E = self.local
            Eb = E[:, :, BUBBLES]                                          # (nc, 20, 2)
            Ebb_inv = np.linalg.inv(Eb[:, BUBBLES])
            G = Eb @ Ebb_inv                                               # identity on bubble rows
            Ebr = E[:, BUBBLES, :]                                         # (nc, 2, 20)
            data = self.layout.red_sum @ (E - G @ Ebr).ravel()
            self._cache["cond"] = (Ebb_inv, G, Ebr, data)
        return self._cache["cond"]

    def reduced_jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        """Condensed Jacobian on the solve dofs at the iterate ``x``."""
        data = self._condensation()[3]
        _, jac_l = self.cubic_local(x)
        data = data + np.bincount(self.layout.red_cubic_index.ravel(), weights=jac_l.ravel(),
                                  minlength=self.layout.red_nnz)
        return self.layout.reduced_matrix(data)

    def newton_increment(self, r: np.ndarray, solve) -> np.ndarray:
        """Increment dx with J dx = -r; ``solve`` maps a reduced right-hand side to its solution.

        Bubble unknowns are recovered cell by cell, Dirichlet, multiplier and
        pinned pressure increments are zero, and the pressure is then shifted
        to zero mean.
        """
        L = self.layout
        Ebb_inv, G, Ebr, _ = self._condensation()
        bub = L.cell_global[:, BUBBLES]
        rb = r[bub]                                                        # (nc, 2)
        rr = r - np.bincount(L.cell_global.ravel(), weights=(G @ rb[:, :, None]).ravel(), minlength=L.n)
        dx = np.zeros(L.n)
        dx[L.solve_dofs] = solve(-rr[L.solve_dofs])
        # bubble increments are still zero here, so Ebr sees only the kept dofs
        rhs = -rb - (Ebr @ dx[L.cell_global][:, :, None])[:, :, 0]
        dx[bub] = (Ebb_inv @ rhs[:, :, None])[:, :, 0]
        return dx

    def normalize_pressure(self, x: np.ndarray) -> None:
        L = self.layout
        sl = slice(L.offsets["p"], L.offsets["p"] + len(self.mult))
        x[sl] -= (self.mult @ x[sl]) / self.mult.sum()


def _constant_locals(spaces: Spaces) -> Dict[str, np.ndarray]:
    """Element matrices that do not depend on the lagged state."""
    if "const_locals" not in spaces._cache:
        one = np.ones_like(quad_data(spaces.mesh).W)
        spaces._cache["const_locals"] = {
            "M_phi": local_mass(spaces.phi),
            "M_u": local_mass(spaces.u),
            "M_B": local_mass(spaces.B),
            "K_phi": local_stiffness(spaces.phi, one),
            "K_u": local_stiffness(spaces.u, one),
            "CC": local_curl_curl(spaces.B, one),
            "D": local_divergence(spaces.u, spaces.p),
            "p_mass": scatter_vector(local_load(spaces.p, one), spaces.p),
        }
    return spaces._cache["const_locals"]


def _weighted(model: CoefficientModel, phi_q, unit_local, kernel, space, invert=False):
    if model.is_constant:
        c = model.v1
        if c <= 0:
            raise ParameterError(f"non-positive coefficient {c}")
        return unit_local * (1.0 / c if invert else c)
    w = model(phi_q)
    return kernel(space, 1.0 / w if invert else w)


def build_monolithic(state, params, spaces: Spaces, forcing=None, bc=None) -> BlockSystem:
    """Assemble the lagged-coefficient linear part of one step.

    ``state`` supplies the lagged phi^k, u^k and B^k.  ``forcing`` supplies the
    sources at t_{k+1}: either an object with ``evaluate(x, y) -> dict`` or
    attributes ``phi``, ``u``, ``B`` holding callables (any may be None).
    ``bc`` maps ``"u"`` and ``"B"`` to values on the Dirichlet dofs.
    """
    layout = layout_for(spaces)
    mesh = spaces.mesh
    qd = quad_data(mesh)
    dt, gamma, mu, lam = params.dt, params.gamma, params.mu, params.lam
    cl = _constant_locals(spaces)

    phi_k = FEField(spaces.phi, state.phi)
    u_k = FEField(spaces.u, state.u)
    B_k = FEField(spaces.B, state.B)
    phi_q = _at(phi_k)

    K_M = _weighted(params.M, phi_q, cl["K_phi"], local_stiffness, spaces.phi)
    K_nu = _weighted(params.nu, phi_q, cl["K_u"], local_stiffness, spaces.u)
    CC = _weighted(params.sigma, phi_q, cl["CC"], local_curl_curl, spaces.B, invert=True)
    C = local_convection(spaces.u, _at(u_k))
    A = local_phase_transport(spaces.phi, spaces.u, _at(phi_k, "grad"))
    K = local_lorentz(spaces.u, spaces.B, _at(B_k))
    D = cl["D"]

    blocks = {
        ("phi", "phi"): cl["M_phi"] / dt,
        ("phi", "omega"): gamma * K_M,
        ("phi", "u"): A,
        ("omega", "phi"): gamma * cl["K_phi"],
        ("omega", "omega"): -cl["M_phi"],
        ("u", "u"): cl["M_u"] / dt + C + K_nu,
        ("u", "p"): -D.transpose(0, 2, 1),
        ("u", "B"): K / mu,
        ("u", "omega"): -lam * A.transpose(0, 2, 1),
        ("p", "u"): -D,
        ("B", "u"): -K.transpose(0, 2, 1) / mu,
        ("B", "B"): cl["M_B"] / (mu * dt) + CC / mu ** 2,
    }
    E = np.zeros((mesh.n_cells, N_LOCAL, N_LOCAL))
    for (tf, cf), blk in blocks.items():
        E[:, LOCAL[tf], LOCAL[cf]] = blk

    e = np.zeros((mesh.n_cells, N_LOCAL))
    mphi = np.einsum("cij,cj->ci", cl["M_phi"], phi_k.local())
    e[:, LOCAL["phi"]] = mphi / dt
    e[:, LOCAL["omega"]] = mphi / gamma
    e[:, LOCAL["u"]] = np.einsum("cij,cj->ci", cl["M_u"], u_k.local()) / dt
    e[:, LOCAL["B"]] = np.einsum("cij,cj->ci", cl["M_B"], B_k.local()) / (mu * dt)
    if forcing is not None:
        if "points" not in mesh._cache:
            mesh._cache["points"] = mesh.map_points(qd.bary)
        pts = mesh._cache["points"]
        x, y = pts[..., 0], pts[..., 1]
        if hasattr(forcing, "evaluate"):
            f = forcing.evaluate(x, y)
        else:
            f = {k: (getattr(forcing, k)(x, y) if getattr(forcing, k, None) is not None else None)
                 for k in ("phi", "u", "B")}
        if f.get("phi") is not None:
            e[:, LOCAL["phi"]] += local_load(spaces.phi, f["phi"])
        if f.get("u") is not None:
            e[:, LOCAL["u"]] += local_load(spaces.u, f["u"])
        if f.get("B") is not None:
            e[:, LOCAL["B"]] += local_load(spaces.B, f["B"]) / mu

    bc = bc or {}
    g_u = np.asarray(bc.get("u", np.zeros(len(spaces.u.dirichlet))), float)
    g_B = np.asarray(bc.get("B", np.zeros(len(spaces.B.dirichlet))), float)
    if g_u.shape != spaces.u.dirichlet.shape or g_B.shape != spaces.B.dirichlet.shape:
        raise ValueError("boundary data does not match the constrained dofs")
    return BlockSystem(layout=layout, local=E, local_rhs=e, mult=cl["p_mass"], gamma=gamma,
                       dirichlet_values=np.concatenate([g_u, g_B]))
