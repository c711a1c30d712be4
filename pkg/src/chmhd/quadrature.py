"""Quadrature rules on the reference triangle, in barycentric coordinates.

Weights are normalized to the reference area 1/2.  Degrees 1, 2, 4, 5, 6 and 8
use fully symmetric Gauss rules (Dunavant's tables); degrees 3 and 7 reuse the
next symmetric rule up, and 9-10 fall back to a collapsed Gauss-Jacobi product.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 10


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # (nq, 3) barycentric
    weights: np.ndarray  # (nq,), sums to 1/2
    exact_degree: int

    def __len__(self):
        return len(self.weights)


def _orbit(kind: str, *coords) -> np.ndarray:
    if kind == "s3":
        return np.array([[1 / 3, 1 / 3, 1 / 3]])
    if kind == "s21":
        a, = coords
        b = 1.0 - 2.0 * a
        return np.array([[a, a, b], [a, b, a], [b, a, a]])
    a, b = coords
    c = 1.0 - a - b
    return np.array([[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]])


# (orbit kind, orbit parameters, weight relative to area)
_SYMMETRIC = {
    1: [("s3", (), 1.0)],
    2: [("s21", (1 / 6,), 1 / 3)],
    4: [("s21", (0.445948490915965,), 0.223381589678011),
        ("s21", (0.091576213509771,), 0.109951743655322)],
    5: [("s3", (), 0.225),
        ("s21", (0.470142064105115,), 0.132394152788506),
        ("s21", (0.101286507323456,), 0.125939180544827)],
    6: [("s21", (0.249286745170910,), 0.116786275726379),
        ("s21", (0.063089014491502,), 0.050844906370207),
        ("s111", (0.053145049844817, 0.310352451033784), 0.082851075618374)],
    8: [("s3", (), 0.144315607677787),
        ("s21", (0.459292588292723,), 0.095091634267285),
        ("s21", (0.170569307751760,), 0.103217370534718),
        ("s21", (0.050547228317031,), 0.032458497623198),
        ("s111", (0.263112829634638, 0.008394777409958), 0.027230314174435)],
}


def _symmetric_rule(table) -> Tuple[np.ndarray, np.ndarray]:
    pts: List[np.ndarray] = []
    wts: List[np.ndarray] = []
    for kind, coords, w in table:
        orbit = _orbit(kind, *coords)
        pts.append(orbit)
        wts.append(np.full(len(orbit), w))
    w = np.concatenate(wts)
    return np.vstack(pts), 0.5 * w / w.sum()


def _collapsed_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    m = degree // 2 + 1
    s, ws = roots_jacobi(m, 1.0, 0.0)  # weight (1 - s) absorbs the Duffy Jacobian
    r, wr = np.polynomial.legendre.leggauss(m)
    x = (1 + s) / 2
    y = (1 + r) / 2
    X = x[:, None] * np.ones_like(y)[None, :]
    Y = (1 - x)[:, None] * y[None, :]
    W = (ws[:, None] / 4) * (wr[None, :] / 2)
    xx, yy = X.ravel(), Y.ravel()
    pts = np.column_stack([1 - xx - yy, xx, yy])
    return pts, W.ravel()


@lru_cache(maxsize=None)
def quadrature_rule(exact_degree: int) -> QuadratureRule:
    """Rule integrating every polynomial of total degree <= ``exact_degree`` exactly."""
    if int(exact_degree) != exact_degree or not 0 <= exact_degree <= MAX_DEGREE:
        raise ValueError(f"unsupported quadrature degree {exact_degree!r} (0..{MAX_DEGREE})")
    d = max(1, int(exact_degree))
    for cand in sorted(_SYMMETRIC):
        if cand >= d:
            pts, w = _symmetric_rule(_SYMMETRIC[cand])
            return QuadratureRule(pts, w, cand)
    pts, w = _collapsed_rule(d)
    return QuadratureRule(pts, w, d)


def gauss_legendre_01(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """n-point Gauss rule on [0, 1]."""
    s, w = np.polynomial.legendre.leggauss(n)
    return (s + 1) / 2, w / 2
