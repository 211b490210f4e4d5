"""Correspondence space P(H) over a q = 2 chart and its distribution of lifted alpha-planes.

A fibre point is ``(x, zeta)``.  In chart 0 the primed direction is
``[h_1 + zeta h_2]``, in chart 1 it is ``[zeta h_1 + h_2]``.  Complex vector
fields are stored by components in the real-coordinate basis
``(d/dx_1, ..., d/dx_n, d/dzeta, d/dzetabar)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import subspace_angles

from .ag_chart import AGStructure, ChartField, DegenerateStructureError


@dataclass(frozen=True)
class FiberPoint:
    x: np.ndarray
    zeta: complex
    chart: int = 0

    def other_chart(self) -> "FiberPoint":
        if self.zeta == 0:
            raise ValueError("zeta = 0 is not in the overlap of the fibre charts")
        return FiberPoint(self.x, 1 / self.zeta, 1 - self.chart)


def _spinor(zeta: complex, chart: int) -> np.ndarray:
    return np.array([1.0, zeta]) if chart == 0 else np.array([zeta, 1.0])


def _vertical(gp: np.ndarray, X: np.ndarray, zeta: complex, chart: int) -> complex:
    """d zeta along the horizontal lift of X (frame components)."""
    pi = _spinor(zeta, chart)
    dpi = -np.einsum("a,aCB,B->C", X, gp, pi)
    num, den = (1, 0) if chart == 0 else (0, 1)
    return dpi[num] - zeta * dpi[den]


def _horizontal(p: int, zeta: complex, chart: int, q: int = 2) -> np.ndarray:
    """Frame components of pi (x) e_j, shape (p, p*q)."""
    pi = _spinor(zeta, chart)
    return np.stack([np.kron(np.eye(p)[j], pi) for j in range(p)])


def q_polynomials(ag: AGStructure, x, zeta: complex, chart: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Vertical components Q_j and their ascending coefficients in zeta, shape (p, 4)."""
    if ag.q != 2:
        raise ValueError("correspondence space needs q = 2")
    x = np.asarray(x, dtype=float)
    if ag.sigma_condition(x) > 1e12:
        raise DegenerateStructureError(f"frame degenerate at {x}")
    _, gp = ag.connection(x)
    p = ag.p
    # sample the cubic at four nodes and interpolate; exact for polynomials of degree <= 3
    nodes = np.array([0.0, 1.0, -1.0, 2.0])
    V = np.vander(nodes, 4, increasing=True)
    coeffs = np.zeros((p, 4), dtype=complex)
    for j in range(p):
        vals = [_vertical(gp, _horizontal(p, z, chart)[j], z, chart) for z in nodes]
        coeffs[j] = np.linalg.solve(V, np.array(vals, dtype=complex))
    values = np.array([np.polyval(c[::-1], zeta) for c in coeffs])
    return values, coeffs


@dataclass
class DistributionFrame:
    horizontal: np.ndarray      # (p, n) frame components of (h1 + zeta h2) (x) e_j
    vertical: np.ndarray        # (p,) Q_j
    coords: np.ndarray          # (p+1, n+2) components incl. the d/dzetabar row

    @property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.coords, tol=1e-10))


def frame_matrix(ag: AGStructure, x, zeta: complex, chart: int = 0) -> np.ndarray:
    p, n = ag.p, ag.dim
    x = np.asarray(x, dtype=float)
    _, gp = ag.connection(x)
    E = ag.frames(x)
    H = _horizontal(p, zeta, chart)
    W = np.zeros((p + 1, n + 2), dtype=complex)
    for j in range(p):
        W[j, :n] = E @ H[j]
        W[j, n] = _vertical(gp, H[j], zeta, chart)
    W[p, n + 1] = 1.0
    return W


def distribution_frame(ag: AGStructure, fp: FiberPoint) -> DistributionFrame:
    x = ag.check_point(fp.x)
    W = frame_matrix(ag, x, fp.zeta, fp.chart)
    df = DistributionFrame(_horizontal(ag.p, fp.zeta, fp.chart), W[:-1, ag.dim], W)
    if df.rank < ag.p + 1:
        raise DegenerateStructureError("distribution frame is not of full rank")
    return df


# -- brackets --------------------------------------------------------------

FrameFn = Callable[[np.ndarray, complex], np.ndarray]


def _jet(fn: FrameFn, x: np.ndarray, zeta: complex, h: float):
    """Value and derivatives of fn along x_i, d/dzeta and d/dzetabar (Richardson central)."""
    n = len(x)

    def central(shift_x, shift_z, hh):
        return (fn(x + hh * shift_x, zeta + hh * shift_z) - fn(x - hh * shift_x, zeta - hh * shift_z)) / (2 * hh)

    def rich(sx, sz):
        return (4 * central(sx, sz, h / 2) - central(sx, sz, h)) / 3

    zero = np.zeros(n)
    ders = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        ders.append(rich(e, 0.0))
    du, dv = rich(zero, 1.0), rich(zero, 1j)
    ders.append(0.5 * (du - 1j * dv))
    ders.append(0.5 * (du + 1j * dv))
    return fn(x, zeta), np.array(ders)


def bracket_table(fn: FrameFn, x, zeta: complex, h: float = 1e-4) -> np.ndarray:
    """All brackets [W_r, W_s] of the frame rows, shape (r, r, n+2)."""
    W, D = _jet(fn, np.asarray(x, dtype=float), zeta, h)
    # [U, V]^k = U^l d_l V^k - V^l d_l U^k
    UdV = np.einsum("rl,lsk->rsk", W, D)
    return UdV - UdV.transpose(1, 0, 2)


def mod_distribution(vectors: np.ndarray, frame: np.ndarray, cond_max: float = 1e10) -> np.ndarray:
    """Least-squares remainder of ``vectors`` (..., m) modulo the row span of ``frame``."""
    gram = frame.conj() @ frame.T
    if np.linalg.cond(gram) > cond_max:
        raise DegenerateStructureError("projection onto the distribution is ill-conditioned")
    flat = vectors.reshape(-1, vectors.shape[-1])
    coef = np.linalg.solve(gram, frame.conj() @ flat.T)
    return (flat - (frame.T @ coef).T).reshape(vectors.shape)


def oneill_tensor(ag: AGStructure, fp: FiberPoint, mixer: Callable | None = None,
                  h: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Brackets of frame rows modulo the distribution, and the frame used.

    ``mixer(x, zeta)`` optionally returns an invertible (p+1, p+1) matrix that
    recombines the frame rows before bracketing.
    """
    ag.check_point(fp.x, 2 * ag.sigma.reach() + h)

    def fn(x, z):
        W = frame_matrix(ag, x, z, fp.chart)
        return W if mixer is None else mixer(x, z) @ W

    frame = fn(np.asarray(fp.x, dtype=float), fp.zeta)
    return mod_distribution(bracket_table(fn, fp.x, fp.zeta, h), frame), frame


def oneill_residual(ag: AGStructure, fp: FiberPoint, h: float = 1e-4) -> float:
    """Sup norm of [u, v] mod D over frame pairs; zero iff D is involutive at fp."""
    A, _ = oneill_tensor(ag, fp, h=h)
    return float(np.max(np.abs(A)))


def real_lift_defect(ag: AGStructure, x, zeta: float, h: float = 1e-4) -> float:
    """Involutivity defect of the real lifted alpha-plane distribution in real coordinates (x, zeta)."""
    p, n = ag.p, ag.dim

    def fields(y):
        W = frame_matrix(ag, y[:n], float(y[n]), 0)[:p, : n + 1]
        if np.max(np.abs(W.imag)) > 1e-10:
            raise ValueError("lifted frame is not real at real zeta")
        return W.real

    y0 = np.concatenate([np.asarray(x, dtype=float), [zeta]])
    F0 = fields(y0)
    J = []
    for k in range(n + 1):
        e = np.zeros(n + 1)
        e[k] = 1.0
        c = lambda hh: (fields(y0 + hh * e) - fields(y0 - hh * e)) / (2 * hh)
        J.append((4 * c(h / 2) - c(h)) / 3)
    J = np.array(J)  # [k, r, m] = d_k F[r, m]
    br = np.einsum("rk,ksm->rsm", F0, J)
    br = br - br.transpose(1, 0, 2)
    coef, *_ = np.linalg.lstsq(F0.T, br.reshape(-1, n + 1).T, rcond=None)
    rem = br.reshape(-1, n + 1) - (F0.T @ coef).T
    return float(np.max(np.abs(rem)))


def scale_independence_residual(ag: AGStructure, f: ChartField, fibers) -> float:
    """Largest principal angle between D built in scale eps and in scale f*eps."""
    agf = ag.rescaled(f)
    worst = 0.0
    for fp in fibers:
        W0 = frame_matrix(ag, fp.x, fp.zeta, fp.chart)
        W1 = frame_matrix(agf, fp.x, fp.zeta, fp.chart)
        if not np.array_equal(W0, W1):
            worst = max(worst, float(np.max(subspace_angles(W0.T, W1.T))))
    return worst


def conjugate_intersection_angle(ag: AGStructure, fp: FiberPoint) -> float:
    """Smallest principal angle between D and its conjugate; zero iff they meet."""
    W = frame_matrix(ag, fp.x, fp.zeta, fp.chart)
    # conjugation swaps d/dzeta and d/dzetabar components
    Wc = W.conj()
    Wc[:, [-2, -1]] = Wc[:, [-1, -2]]
    return float(np.min(subspace_angles(W.T, Wc.T)))


def random_fiber_points(ag: AGStructure, count: int, seed: int = 0, margin: float = 0.05,
                        zeta_radius: float = 2.0, min_imag: float = 0.0) -> list[FiberPoint]:
    rng = np.random.default_rng(seed)
    lo, hi = ag.lo + margin, ag.hi - margin
    pts = []
    while len(pts) < count:
        x = rng.uniform(lo, hi)
        z = complex(rng.uniform(-zeta_radius, zeta_radius), rng.uniform(-zeta_radius, zeta_radius))
        if abs(z.imag) < min_imag:
            continue
        pts.append(FiberPoint(x, z))
    return pts


# -- blow-down -------------------------------------------------------------

def blowdown_chart(point, xhat, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Collapse map (p, xhat, t) -> (p, t xhat) near the boundary of F_+."""
    if not 0.0 <= t < 1.0:
        raise ValueError("t must lie in [0, 1)")
    xhat = np.asarray(xhat, dtype=float)
    return np.asarray(point, dtype=float), t * xhat
