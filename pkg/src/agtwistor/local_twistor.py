"""Local twistor bundle of a chart structure with q = 2.

A local twistor is a pair ``V = (omega^B, pi_B')`` in ``C^(p+q)``.  In a fixed
scale the connection reads ``D_a V = E_a V + A_a V`` with

    A_a = [[ Gamma_a ,  N_a        ],
           [ -P_a    , -Gamma~_a^T ]]

where ``N_a[D, B'] = delta_A^D delta_A'^B'`` and ``P_a[B', B] = P_{a B B'}``.
``P`` is fixed by asking the omega-block of the tractor curvature to have
vanishing ``delta``-contraction, a square linear system with a unique
solution whenever ``p > 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import subspace_angles

from .ag_chart import AGStructure, ChartField, DegenerateStructureError
from .spinor_core import IndexSignature, SpinorTensor


class TransportError(RuntimeError):
    pass


class NotFlatError(RuntimeError):
    pass


@dataclass
class LocalTwistor:
    omega: np.ndarray
    pi: np.ndarray
    scale_ref: str = ""

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=complex)
        self.pi = np.asarray(self.pi, dtype=complex)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.pi])

    @classmethod
    def from_vector(cls, v, p: int, scale_ref: str = "") -> "LocalTwistor":
        v = np.asarray(v)
        return cls(v[:p], v[p:], scale_ref)

    def __mul__(self, c) -> "LocalTwistor":
        return LocalTwistor(self.omega * c, self.pi * c, self.scale_ref)

    __rmul__ = __mul__


# -- P tensor --------------------------------------------------------------

def _incidence(p: int, q: int) -> np.ndarray:
    """N[a, D, B'] = delta_A^D delta_A'^B'."""
    n = p * q
    N = np.zeros((n, p, q))
    for A in range(p):
        for Ap in range(q):
            N[A * q + Ap, A, Ap] = 1.0
    return N


def spin_curvature(ag: AGStructure, x) -> np.ndarray:
    """R[a, b, D, E] of the unprimed connection in frame components."""
    if ag.gamma_unprimed is None:
        ag = ag.with_canonical()
    gu = ag.gamma_unprimed
    G = gu(x)
    dG = gu.jacobian(x)
    E = ag.frames(x)
    EG = np.einsum("ia,ibde->abde", E, dG)
    c = ag.brackets(x)
    R = EG - EG.transpose(1, 0, 2, 3)
    R = R + np.einsum("ade,beg->abdg", G, G) - np.einsum("bde,aeg->abdg", G, G)
    return R - np.einsum("abc,cde->abde", c, G)


def _schouten_matrix(p: int, q: int) -> np.ndarray:
    # linear map P[b, (E, e')] -> equations (A', b, E):
    #   -p P_{(B,B') E A'} + P_{(B,A') E B'}
    n = p * q
    M = np.zeros((q, n, p, n, p * q))
    for Ap in range(q):
        for B in range(p):
            for Bp in range(q):
                b = B * q + Bp
                for Ee in range(p):
                    M[Ap, b, Ee, b, Ee * q + Ap] -= p
                    M[Ap, b, Ee, B * q + Ap, Ee * q + Bp] += 1.0
    return M.reshape(q * n * p, n * n)


def schouten_at(ag: AGStructure, x) -> np.ndarray:
    p, q, n = ag.p, ag.q, ag.dim
    R = spin_curvature(ag, x)
    # sum_A R[(A,A'), b, A, E]
    Rr = R.reshape(p, q, n, p, p)
    rhs = -np.einsum("AXbAE->XbE", Rr).reshape(-1)
    M = _schouten_matrix(p, q)
    sol, _, rank, _ = np.linalg.lstsq(M, rhs, rcond=None)
    if rank < n * n:
        raise DegenerateStructureError("P normalization system is rank deficient")
    return sol.reshape(n, n)


@dataclass(frozen=True)
class SchoutenField:
    """P_{AA'BB'} as an (n, n) array P[a, b] with a = (A, A'), b = (B, B')."""

    p_tensor: ChartField
    p: int
    q: int = 2

    def __call__(self, x) -> np.ndarray:
        return self.p_tensor(x)

    def tensor(self, x) -> SpinorTensor:
        return SpinorTensor(IndexSignature.parse("apap", self.p, self.q),
                            self(x).reshape(self.p, self.q, self.p, self.q))


def schouten(ag: AGStructure) -> SchoutenField:
    if ag.q != 2:
        raise ValueError("local twistor construction needs q = 2")
    if ag.gamma_unprimed is None:
        ag = ag.with_canonical()
    memo: dict[bytes, np.ndarray] = {}

    def ev(x):
        key = np.asarray(x, dtype=float).tobytes()
        if key not in memo:
            if len(memo) > 512:
                memo.clear()
            memo[key] = schouten_at(ag, x)
        return memo[key]

    return SchoutenField(ChartField(ev, ag.dim, ag.sigma.h, ag.sigma.order), ag.p, ag.q)


def tractor_connection(ag: AGStructure, pf: SchoutenField, x) -> np.ndarray:
    """Connection matrices A[a] of shape (n, p+q, p+q)."""
    p, q, n = ag.p, ag.q, ag.dim
    gu, gp = ag.connection(x)
    P = pf(x).reshape(n, p, q).transpose(0, 2, 1)
    A = np.zeros((n, p + q, p + q), dtype=np.result_type(gu, gp, P, float))
    A[:, :p, :p] = gu
    A[:, :p, p:] = _incidence(p, q)
    A[:, p:, :p] = -P
    A[:, p:, p:] = -gp.transpose(0, 2, 1)
    return A


def tractor_curvature(ag: AGStructure, pf: SchoutenField, x) -> np.ndarray:
    """F[a, b] = E_a A_b - E_b A_a + [A_a, A_b] - c_ab^c A_c."""
    field_ = ChartField(lambda y: tractor_connection(ag, pf, y), ag.dim, ag.sigma.h, ag.sigma.order)
    A = field_(x)
    E = ag.frames(x)
    EA = np.einsum("ia,ibjk->abjk", E, field_.jacobian(x))
    F = EA - EA.transpose(1, 0, 2, 3)
    F = F + np.einsum("ajk,bkl->abjl", A, A) - np.einsum("bjk,akl->abjl", A, A)
    return F - np.einsum("abc,cjk->abjk", ag.brackets(x), A)


# -- curves and transport --------------------------------------------------

@dataclass(frozen=True)
class CurveOnM:
    """Piecewise-linear path through ``vertices``; ``steps`` RK4 steps per unit parameter."""

    vertices: np.ndarray
    steps: int = 200

    def segments(self):
        v = np.asarray(self.vertices, dtype=float)
        return list(zip(v[:-1], v[1:]))


def segment(x0, x1, steps: int = 200) -> CurveOnM:
    return CurveOnM(np.array([x0, x1], dtype=float), steps)


def square_loop(center, i: int, j: int, side: float, steps: int = 200) -> CurveOnM:
    c = np.asarray(center, dtype=float)
    ei, ej = np.zeros_like(c), np.zeros_like(c)
    ei[i] = ej[j] = side / 2
    pts = [c - ei - ej, c + ei - ej, c + ei + ej, c - ei + ej, c - ei - ej]
    return CurveOnM(np.array(pts), steps)


def _transport_matrix(ag: AGStructure, pf: SchoutenField, curve: CurveOnM, V: np.ndarray) -> np.ndarray:
    V = np.array(V, dtype=complex)
    scale0 = max(1.0, float(np.max(np.abs(V))))
    for x0, x1 in curve.segments():
        if not np.any(x1 != x0):
            continue
        for pt in (x0, x1):
            ag.check_point(pt, 2 * ag.sigma.reach())
        dx = x1 - x0
        nsteps = max(1, int(curve.steps))
        h = 1.0 / nsteps

        def rhs(s, W):
            x = x0 + s * dx
            v = ag.sigma(x) @ dx
            return -np.einsum("a,ajk->jk", v, tractor_connection(ag, pf, x)) @ W

        s = 0.0
        for _ in range(nsteps):
            k1 = rhs(s, V)
            k2 = rhs(s + h / 2, V + h / 2 * k1)
            k3 = rhs(s + h / 2, V + h / 2 * k2)
            k4 = rhs(s + h, V + h * k3)
            V = V + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            s += h
        if not np.all(np.isfinite(V)) or np.max(np.abs(V)) > 1e12 * scale0:
            raise TransportError("transport diverged")
    return V


def transport(ag: AGStructure, pf: SchoutenField, curve: CurveOnM, t0: LocalTwistor) -> LocalTwistor:
    """Parallel transport of a local twistor along ``curve`` (classical RK4)."""
    v = _transport_matrix(ag, pf, curve, t0.vector[:, None])[:, 0]
    return LocalTwistor.from_vector(v, ag.p, t0.scale_ref)


def holonomy(ag: AGStructure, pf: SchoutenField, loop: CurveOnM) -> np.ndarray:
    return _transport_matrix(ag, pf, loop, np.eye(ag.p + ag.q))


def holonomy_defect(ag: AGStructure, pf: SchoutenField, loop: CurveOnM) -> float:
    H = holonomy(ag, pf, loop)
    return float(np.max(np.abs(H - np.eye(len(H)))))


def refinement_order(ag, pf, loop: CurveOnM, steps: Sequence[int] = (4, 8, 16)) -> tuple[list, float]:
    """Holonomy defects at successive step counts and the mean observed order."""
    defects = [holonomy_defect(ag, pf, CurveOnM(loop.vertices, s)) for s in steps]
    ratios = [np.log2(a / b) for a, b in zip(defects[:-1], defects[1:]) if a > 0 and b > 0]
    return defects, float(np.mean(ratios)) if ratios else float("inf")


# -- rescaling -------------------------------------------------------------

def log_gradient(f: ChartField, x, ag: AGStructure | None = None) -> np.ndarray:
    """Upsilon_a = f^-1 E_a f in frame components (coordinate frame if ``ag`` is None)."""
    fx = f(x)
    if np.any(np.abs(fx) == 0):
        raise ValueError("rescaling factor vanishes")
    d = f.jacobian(x).reshape(-1) / fx
    return d if ag is None else ag.frames(x).T @ d


def rescale_twistor(t: LocalTwistor, f: ChartField, x, ag: AGStructure | None = None) -> LocalTwistor:
    """(omega, pi) -> (omega, pi_A' - Upsilon_{AA'} omega^A) under eps -> f eps."""
    p = len(t.omega)
    ups = log_gradient(f, np.asarray(x, dtype=float), ag)
    q = len(ups) // p
    Y = ups.reshape(p, q)
    return LocalTwistor(t.omega, t.pi - Y.T @ t.omega, t.scale_ref + "*f")


def gauge_matrix(ups: np.ndarray, p: int, q: int) -> np.ndarray:
    G = np.eye(p + q)
    G[p:, :p] = -np.asarray(ups).reshape(p, q).T
    return G


# -- alpha-surfaces and the Ward pair --------------------------------------

@dataclass
class AlphaFamily:
    """A one-parameter family of alpha-surfaces.

    ``point(s, mu)`` gives the chart point with surface coordinates ``mu``
    (length p) on the surface with label ``s``; ``pi(s)`` is the
    auto-parallel primed spinor of that surface.
    """

    point: Callable[[float, np.ndarray], np.ndarray]
    pi: Callable[[float], np.ndarray]
    p: int


@dataclass
class WardReport:
    residual: float
    omega_norm: float
    eta_pi_residual: float
    autoparallel_residual: float
    omega: np.ndarray = field(repr=False, default=None)
    eta: np.ndarray = field(repr=False, default=None)


def _ward_pair(ag, family: AlphaFamily, s0: float, mu, ds: float = 1e-4):
    x = family.point(s0, mu)
    J = (family.point(s0 + ds, mu) - family.point(s0 - ds, mu)) / (2 * ds)
    J = ag.sigma(x) @ J
    pi = np.asarray(family.pi(s0), dtype=complex)
    dpi = (np.asarray(family.pi(s0 + ds)) - np.asarray(family.pi(s0 - ds))) / (2 * ds)
    p, q = ag.p, ag.q
    omega = J.reshape(p, q) @ pi
    _, gp = ag.connection(x)
    eta = dpi - np.einsum("a,aCB,C->B", J, gp, pi)
    return np.concatenate([omega, eta])


def ward_pair_check(ag: AGStructure, pf: SchoutenField, family: AlphaFamily, mus: np.ndarray,
                    s0: float = 0.0, tol: float = 1e-6, h: float = 1e-4) -> WardReport:
    """Parallelism of (omega, eta) built from the variation of an alpha-surface family."""
    p, q = ag.p, ag.q
    worst, auto, wnorm, epar = 0.0, 0.0, 0.0, 0.0
    omegas, etas = [], []
    pi = np.asarray(family.pi(s0), dtype=complex)
    for mu in np.atleast_2d(mus):
        x = family.point(s0, mu)
        V = _ward_pair(ag, family, s0, mu)
        omegas.append(V[:p])
        etas.append(V[p:])
        A = tractor_connection(ag, pf, x)
        _, gp = ag.connection(x)
        for i in range(p):
            e = np.zeros(p)
            e[i] = h
            xp, xm = family.point(s0, mu + e), family.point(s0, mu - e)
            v = ag.sigma(x) @ ((xp - xm) / (2 * h))
            auto = max(auto, float(np.max(np.abs(v.reshape(p, q) @ pi))),
                       float(np.max(np.abs(np.einsum("a,aCB,C->B", v, gp, pi)))))
            dV = (_ward_pair(ag, family, s0, mu + e) - _ward_pair(ag, family, s0, mu - e)) / (2 * h)
            worst = max(worst, float(np.max(np.abs(dV + np.einsum("a,ajk->jk", v, A) @ V))))
        wnorm = max(wnorm, float(np.max(np.abs(V[:p]))))
        eta = V[p:]
        epar = max(epar, abs(eta[0] * pi[1] - eta[1] * pi[0]) / max(np.linalg.norm(pi) ** 2, 1e-300))
    if auto > tol:
        raise ValueError(f"pi is not auto-parallel along the surface (residual {auto:.2e})")
    return WardReport(worst, wnorm, float(epar), auto, np.array(omegas), np.array(etas))


@dataclass
class AlphaSurfaceSample:
    points: np.ndarray
    tangents: np.ndarray
    pi_values: np.ndarray
    alpha_residual: float
    empty: bool


class DegenerateTwistorError(ValueError):
    pass


def _omega_from_seed(ag, pf, t0: LocalTwistor, seed, x, steps):
    if np.allclose(x, seed):
        return t0.vector
    return transport(ag, pf, segment(seed, x, steps), t0).vector


def alpha_surface_from_parallel(ag: AGStructure, pf: SchoutenField, t0: LocalTwistor, seed,
                                starts: np.ndarray | None = None, steps: int = 200,
                                zero_tol: float = 1e-9, max_iter: int = 30) -> AlphaSurfaceSample:
    """Sample the zero set of omega for the parallel extension of ``t0`` from ``seed``.

    Newton iterations with minimum-norm steps start from ``starts`` (default:
    a small grid around the seed); points with ``|omega| < zero_tol`` are kept.
    """
    p, q, n = ag.p, ag.q, ag.dim
    seed = np.asarray(seed, dtype=float)
    if np.max(np.abs(t0.vector)) == 0:
        raise DegenerateTwistorError("zero local twistor has no zero set")
    if starts is None:
        rng = np.random.default_rng(0)
        starts = seed + rng.uniform(-0.1, 0.1, size=(8, n))
    lo, hi = ag.lo + 2 * ag.sigma.reach(), ag.hi - 2 * ag.sigma.reach()
    pts, tans, pis = [], [], []
    alpha_res = 0.0
    fd = 1e-6

    def w(x):
        return _omega_from_seed(ag, pf, t0, seed, x, steps)

    def jac(x):
        cols = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = fd
            cols.append((w(x + e)[:p] - w(x - e)[:p]) / (2 * fd))
        return np.array(cols).T

    for x in np.atleast_2d(starts):
        x = np.clip(np.asarray(x, dtype=float), lo, hi)
        ok = False
        for _ in range(max_iter):
            V = w(x)
            if np.max(np.abs(V)) < 1e-14:
                raise DegenerateTwistorError("(omega, pi) vanishes at a point")
            if np.linalg.norm(V[:p]) < zero_tol:
                ok = True
                break
            Jm = jac(x)
            # real coordinates: stack real and imaginary parts
            Jr = np.vstack([Jm.real, Jm.imag])
            r = np.concatenate([V[:p].real, V[:p].imag])
            dx, *_ = np.linalg.lstsq(Jr, -r, rcond=None)
            x = x + dx
            if np.any(x < lo) or np.any(x > hi):
                break
        if not ok:
            continue
        V = w(x)
        pi = V[p:]
        if np.linalg.norm(pi) < 1e-12:
            raise DegenerateTwistorError("pi vanishes on the zero set")
        Jm = jac(x)
        Jr = np.vstack([Jm.real, Jm.imag])
        _, sv, vt = np.linalg.svd(Jr)
        rank = int(np.sum(sv > 1e-8 * max(sv[0], 1.0)))
        T = vt[rank:]
        frame_t = T @ ag.sigma(x).T
        alpha_res = max(alpha_res, float(np.max(np.abs(frame_t.reshape(-1, p, q) @ pi), initial=0.0)))
        pts.append(x)
        tans.append(T)
        pis.append(pi)
    if not pts:
        return AlphaSurfaceSample(np.zeros((0, n)), np.zeros((0, 0, n)), np.zeros((0, q)), 0.0, True)
    return AlphaSurfaceSample(np.array(pts), np.array(tans), np.array(pis), alpha_res, False)


# -- flattening map --------------------------------------------------------

@dataclass
class FlatteningSample:
    points: np.ndarray
    planes: np.ndarray          # (m, p+q, q) orthonormal bases in the fibre at base
    path_residual: float


def _orth(M):
    Q, _ = np.linalg.qr(M)
    return Q


def flattening_map(ag: AGStructure, pf: SchoutenField, base, grid: np.ndarray, steps: int = 200,
                   detour: float = 0.05, threshold: float = 1e-6) -> FlatteningSample:
    """Transport the plane {omega = 0} at each grid point to ``base``.

    Path independence is measured against a two-segment detour path.
    """
    p, q, n = ag.p, ag.q, ag.dim
    base = np.asarray(base, dtype=float)
    W0 = np.vstack([np.zeros((p, q)), np.eye(q)])
    planes, worst = [], 0.0
    for k, x in enumerate(np.atleast_2d(grid)):
        x = np.asarray(x, dtype=float)
        W = _transport_matrix(ag, pf, CurveOnM(np.array([x, base]), steps), W0)
        planes.append(_orth(W))
        if np.allclose(x, base):
            continue
        off = np.zeros(n)
        off[k % n] = detour
        mid = 0.5 * (x + base) + off
        W2 = _transport_matrix(ag, pf, CurveOnM(np.array([x, mid, base]), steps), W0)
        worst = max(worst, float(np.max(subspace_angles(W, W2))))
    if worst > threshold:
        raise NotFlatError(f"flattening map is path dependent (max principal angle {worst:.2e})")
    return FlatteningSample(np.atleast_2d(grid), np.array(planes), worst)
