"""Cech bookkeeping on CP^1 and contour extraction of the cubic obstruction coefficient.

The two-chart cover is U_0 = {pi_1 != 0}, U_1 = {pi_2 != 0} with overlap
coordinate ``w = pi_2 / pi_1``.  A section of O(m) over U_0 is ``pi_1^m f(w)``
with ``f`` holomorphic at 0, over U_1 it is ``pi_1^m w^m g(1/w)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .spinor_core import IndexSignature, SpinorTensor


class PreconditionError(ValueError):
    pass


def _cech_map(m: int, window: int) -> tuple[np.ndarray, int]:
    """Matrix of (s0, s1) -> s0 - s1 on the Laurent window [-window, window]."""
    modes = np.arange(-window, window + 1)
    cols = []
    for k in range(0, window + 1):                  # U_0: w^k, k >= 0
        cols.append((modes == k).astype(float))
    n0 = len(cols)
    for j in range(0, 2 * window + 1):              # U_1: w^(m-j), j >= 0
        k = m - j
        if -window <= k <= window:
            cols.append(-(modes == k).astype(float))
    return np.array(cols).T, n0


def h1_dimension(m: int) -> int:
    """dim H^1(CP^1, O(m)) as the cokernel of the Cech differential on a Laurent window."""
    if abs(m) > 20:
        raise ValueError("|m| must be at most 20")
    window = abs(m) + 3
    M, _ = _cech_map(m, window)
    return int(M.shape[0] - np.linalg.matrix_rank(M))


def h0_dimension(m: int) -> int:
    """dim H^0(CP^1, O(m)): pairs of chart sections that agree on the overlap."""
    if abs(m) > 20:
        raise ValueError("|m| must be at most 20")
    window = abs(m) + 3
    M, _ = _cech_map(m, window)
    return int(M.shape[1] - np.linalg.matrix_rank(M))


def wronskian(u, v) -> complex:
    """Coefficient of pi_1 dpi_2 - pi_2 dpi_1 in u dv - v du for linear u, v.

    ``u = (u1, u2)`` stands for ``u1 pi_1 + u2 pi_2``.
    """
    u = np.asarray(u, dtype=complex)
    v = np.asarray(v, dtype=complex)
    # form = sum_{ij} c[i, j] pi_i dpi_j
    c = np.outer(u, v) - np.outer(v, u)
    assert abs(c[0, 0]) == 0 and abs(c[1, 1]) == 0 and abs(c[0, 1] + c[1, 0]) < 1e-15 * (1 + abs(c[0, 1]))
    return complex(c[0, 1])


@dataclass
class CechRepresentative:
    """``F^D(mu / pi_1) * g(pi)`` on the overlap of the two charts.

    ``taylor`` maps an exponent tuple (length p) in ``y = mu / pi_1`` to the
    vector coefficient of ``F^D``.  ``laurent`` gives ``g(1, w)`` as
    {power of w: coefficient}; the default ``{-1: 1}`` is ``pi_1^2 / pi_2``.
    """

    taylor: dict
    p: int
    twist: int = 1
    laurent: dict = field(default_factory=lambda: {-1: 1.0})

    def __post_init__(self):
        for e, c in self.taylor.items():
            if len(e) != self.p or np.shape(c) != (self.p,):
                raise ValueError("taylor keys must have length p and values shape (p,)")
        degs = list(self.laurent)
        if degs and max(degs) - min(degs) > 200:
            raise ValueError("Laurent window too wide")

    def window(self) -> tuple[int, int]:
        d = list(self.laurent)
        return min(d), max(d)

    def g(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=complex)
        return sum(c * w ** k for k, c in self.laurent.items())

    def lower_order_norm(self) -> float:
        return max((float(np.max(np.abs(c))) for e, c in self.taylor.items() if sum(e) < 3), default=0.0)


def cubic_representative(F: np.ndarray, extra: dict | None = None) -> CechRepresentative:
    """Representative of F_ABC^D mu^A mu^B mu^C / pi_1^3 (F symmetric in ABC), plus optional terms."""
    p = F.shape[0]
    taylor: dict = {}
    for idx in itertools.product(range(p), repeat=3):
        e = tuple(np.bincount(idx, minlength=p))
        taylor[e] = taylor.get(e, np.zeros(p, dtype=complex)) + F[idx]
    for e, c in (extra or {}).items():
        taylor[tuple(e)] = taylor.get(tuple(e), np.zeros(p, dtype=complex)) + np.asarray(c)
    return CechRepresentative(taylor, p)


def _third_derivative(rep: CechRepresentative) -> np.ndarray:
    """d^3 F^D / dmu^A dmu^B dmu^C at mu = 0 and pi_1 = 1, shape (p, p, p, p)."""
    p = rep.p
    out = np.zeros((p,) * 4, dtype=complex)
    for idx in itertools.product(range(p), repeat=3):
        e = tuple(np.bincount(idx, minlength=p))
        c = rep.taylor.get(e)
        if c is not None:
            out[idx] = np.prod([math.factorial(k) for k in e]) * np.asarray(c)
    return out


def contour_integral(values: np.ndarray, nodes: np.ndarray) -> complex:
    """(1/2 pi i) times the trapezoid rule for the integral of values dw on |w| = 1."""
    n = len(nodes)
    return complex(np.sum(values * nodes) / n)


def contour_extract(rep: CechRepresentative, xi: complex = 1.0, n_nodes: int = 64,
                    strict: bool = True, tol: float = 1e-9) -> SpinorTensor:
    """Symmetric cubic coefficient F_(ABC)^D times xi.

    The triple mu-derivative is taken from the stored Taylor coefficients; the
    remaining pi-integral ``(1/2 pi i) oint g(pi) / pi_1^3 (pi_1 dpi_2 - pi_2 dpi_1)``
    is done by the trapezoid rule on pi_1 = 1, pi_2 = e^{i theta}.  The third
    derivative of the cubic carries a factor 3!, removed here.
    """
    lo, hi = rep.window()
    if n_nodes <= max(abs(lo), abs(hi)) + 1:
        raise ValueError("too few contour nodes for the Laurent window")
    if strict and rep.lower_order_norm() > tol:
        raise PreconditionError(
            f"representative does not vanish to second order (lower-order size {rep.lower_order_norm():.2e})"
        )
    theta = 2 * np.pi * np.arange(n_nodes) / n_nodes
    w = np.exp(1j * theta)
    # on pi_1 = 1 the 1-form is dw; the integrand is g(1, w) dw
    period = contour_integral(rep.g(w), w)
    d3 = _third_derivative(rep) / math.factorial(3)
    sym = np.zeros_like(d3)
    for perm in itertools.permutations(range(3)):
        sym += np.transpose(d3, perm + (3,))
    sym /= 6
    return SpinorTensor(IndexSignature.parse("aaaA", rep.p, weight=-1), sym * period * xi)
