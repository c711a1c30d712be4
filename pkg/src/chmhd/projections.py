"""Projections used to build discrete initial data.

* :func:`ritz_project` - H1-seminorm orthogonal projection onto P1, mean preserved
  through a Lagrange multiplier.
* :func:`l2_project` - L2 projection onto a (possibly constrained) space.
* :func:`maxwell_quasi_project` - curl-curl projection onto Nedelec0 with a
  velocity-weighted convective term and a weighted mass term.

Targets may be :class:`~chmhd.fem.AnalyticField` objects, bare callables (when
no derivatives are required) or :class:`~chmhd.fem.FEField` objects.  All
right-hand sides are integrated with a degree-8 rule.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .fem import DofMap, ElementKind, FEField, boundary_values, sample, tabulate
from .linalg import sparse_lu_solve
from .quadrature import quadrature_rule

PROJECTION_QUAD_DEGREE = 8
MAXWELL_WEIGHT = 7.0


@dataclass
class ProjectionProblem:
    """Matrix, right-hand side and constraint data of one projection."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    space: DofMap
    boundary: np.ndarray

    def residual(self, coefficients: np.ndarray) -> np.ndarray:
        """Defining-equation residual against every unconstrained test function."""
        r = self.matrix @ coefficients[: self.matrix.shape[1]] - self.rhs
        free = np.setdiff1d(np.arange(len(r)), self.space.dirichlet)
        return r[free]


def _quad(space: DofMap, degree: int):
    q = quadrature_rule(degree)
    W = space.mesh.jacobians()[1][:, None] * q.weights[None, :]
    return q.points, W


def _scatter_local(space: DofMap, local: np.ndarray, cols: Optional[DofMap] = None) -> sp.csr_matrix:
    cols = cols or space
    nc, ni, nj = local.shape
    r = np.broadcast_to(space.cell_dofs[:, :, None], local.shape).ravel()
    c = np.broadcast_to(cols.cell_dofs[:, None, :], local.shape).ravel()
    A = sp.coo_matrix((local.ravel(), (r, c)), shape=(space.n_dofs, cols.n_dofs)).tocsr()
    A.sum_duplicates()
    return A


def _scatter_vec(space: DofMap, local: np.ndarray) -> np.ndarray:
    return np.bincount(space.cell_dofs.ravel(), weights=local.ravel(), minlength=space.n_dofs)


def solve_constrained(A: sp.csr_matrix, b: np.ndarray, dirichlet: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve with prescribed values ``g`` on ``dirichlet`` rows by elimination and lifting."""
    n = A.shape[0]
    x = np.zeros(n)
    x[dirichlet] = g
    free = np.setdiff1d(np.arange(n), dirichlet)
    A = sp.csr_matrix(A)
    rhs = b[free] - A[free][:, dirichlet] @ g
    x[free] = sparse_lu_solve(A[free][:, free], rhs)
    return x


# ---------------------------------------------------------------------------

def ritz_problem(phi0, space: DofMap, degree: int = PROJECTION_QUAD_DEGREE) -> ProjectionProblem:
    if space.kind not in (ElementKind.LAGRANGE1, ElementKind.LAGRANGE2) or space.components != 1:
        raise ValueError("the Ritz projection needs a scalar Lagrange space")
    bary, W = _quad(space, degree)
    tab = tabulate(space, bary)
    K = _scatter_local(space, np.einsum("cq,cqid,cqjd->cij", W, tab.grads, tab.grads))
    m = _scatter_vec(space, np.einsum("cq,cqi->ci", W, tab.values))
    rhs = _scatter_vec(space, np.einsum("cq,cqd,cqid->ci", W, sample(phi0, space, bary, "grad"), tab.grads))
    mean = float(np.sum(W * sample(phi0, space, bary)))
    A = sp.bmat([[K, sp.csr_matrix(m[:, None])], [sp.csr_matrix(m[None, :]), None]], format="csr")
    return ProjectionProblem(A, np.append(rhs, mean), space, np.zeros(0))


def ritz_project(phi0, space: DofMap) -> FEField:
    """P1 field with (grad(phi0 - R phi0), grad psi) = 0 for all psi and equal mean."""
    prob = ritz_problem(phi0, space)
    x = sparse_lu_solve(prob.matrix, prob.rhs)
    return FEField(space, x[: space.n_dofs])


def l2_problem(u0, space: DofMap, degree: int = PROJECTION_QUAD_DEGREE) -> ProjectionProblem:
    bary, W = _quad(space, degree)
    v = tabulate(space, bary).values
    f = sample(u0, space, bary)
    if v.ndim == 3:
        M = np.einsum("cq,cqi,cqj->cij", W, v, v)
        rhs = np.einsum("cq,cq,cqi->ci", W, f, v)
    else:
        M = np.einsum("cq,cqid,cqjd->cij", W, v, v)
        rhs = np.einsum("cq,cqd,cqid->ci", W, f, v)
    return ProjectionProblem(_scatter_local(space, M), _scatter_vec(space, rhs), space,
                             boundary_values(u0, space))


def l2_project(u0, space: DofMap) -> FEField:
    """L2 projection; constrained dofs take the interpolated boundary values of ``u0``."""
    prob = l2_problem(u0, space)
    return FEField(space, solve_constrained(prob.matrix, prob.rhs, space.dirichlet, prob.boundary))


def maxwell_problem(B0, u0, space: DofMap, degree: int = PROJECTION_QUAD_DEGREE) -> ProjectionProblem:
    """Bilinear form a(e, zeta) = (curl e, curl zeta) + (curl zeta, e x u) + 7((|u|^2 + 1) e, zeta).

    The 2D reduction of ((curl zeta) x e) . u is curl(zeta) (e1 u2 - e2 u1).
    """
    if space.kind is not ElementKind.NEDELEC0:
        raise ValueError("the Maxwell quasi-projection needs a Nedelec space")
    if u0 is None:
        raise ValueError("the Maxwell quasi-projection needs an auxiliary velocity")
    bary, W = _quad(space, degree)
    tab = tabulate(space, bary)
    v, cu = tab.values, tab.curls
    uq = sample(u0, space, bary)
    wt = MAXWELL_WEIGHT * (np.sum(uq * uq, axis=-1) + 1.0)
    cross = v[..., 0] * uq[:, :, None, 1] - v[..., 1] * uq[:, :, None, 0]   # zeta_j x u
    local = (np.einsum("cq,cqi,cqj->cij", W, cu, cu)
             + np.einsum("cq,cqi,cqj->cij", W, cu, cross)
             + np.einsum("cq,cqid,cqjd->cij", W * wt, v, v))
    Bq = sample(B0, space, bary)
    Bc = sample(B0, space, bary, "curl")
    Bx = Bq[..., 0] * uq[..., 1] - Bq[..., 1] * uq[..., 0]
    rhs = (np.einsum("cq,cq,cqi->ci", W, Bc + Bx, cu)
           + np.einsum("cq,cqd,cqid->ci", W * wt, Bq, v))
    return ProjectionProblem(_scatter_local(space, local), _scatter_vec(space, rhs), space,
                             boundary_values(B0, space))


def maxwell_quasi_project(B0, u0, space: DofMap) -> FEField:
    """Nedelec0 field with a(B0 - Pi B0, zeta) = 0 for every unconstrained zeta."""
    prob = maxwell_problem(B0, u0, space)
    return FEField(space, solve_constrained(prob.matrix, prob.rhs, space.dirichlet, prob.boundary))
