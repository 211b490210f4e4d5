"""Chart-level almost-Grassmannian structures.

Conventions used across the package
-----------------------------------
* A chart has real coordinates ``x`` in an axis-aligned box of ``R^(p*q)``.
  A tangent index ``a`` is identified with the spinor pair ``(A, A')`` via
  ``a = A*q + A'``.
* ``sigma(x)`` is the matrix ``S[alpha, i] = sigma_i^alpha`` sending
  coordinate components of a vector to its ``E (x) H`` components.  The
  columns of ``inv(S)`` are the frame vectors ``E_alpha``.
* ``scale(x)`` is the coefficient ``s`` of ``eps = s e^1 ^ ... ^ e^p`` and
  ``alpha(x)`` the coefficient of the top-power identification, so that
  ``alpha(eps)`` has coefficient ``s * alpha`` on ``h^1 ^ ... ^ h^q``.
* Connection coefficients are matrices acting on upper-index components:
  ``gu[a, D, E] = Gamma_{aE}^D`` (unprimed) and ``gp[a, C', B'] =
  Gamma~_{aB'}^{C'}`` (primed), i.e. ``nabla_a w^D = E_a w^D + gu[a] @ w``.
* Torsion follows ``(nabla_a nabla_b - nabla_b nabla_a) f = T_ab^c nabla_c f``,
  giving ``T_ab^c = c_ab^c - Gamma_ab^c + Gamma_ba^c`` with
  ``[E_a, E_b] = c_ab^c E_c``.  Torsion arrays have shape
  ``(p, q, p, q, p, q)`` in slot order ``(A, A', B, B', C, C')``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .spinor_core import (
    SpinorTensor,
    _trace_vec,
    contractible_pairs,
    pure_trace_part,
    torsion_signature,
)


class DegenerateStructureError(RuntimeError):
    """The pointwise linear system defining a canonical object is rank deficient."""


class ChartDomainError(ValueError):
    """A finite-difference stencil leaves the chart box."""


class NotSupportedError(NotImplementedError):
    pass


@dataclass(frozen=True)
class ChartField:
    """A smooth field on a chart, differentiated by Richardson-extrapolated central differences."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    domain_dim: int
    h: float = 1e-3
    order: int = 4
    constant: bool = False

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(x, dtype=float)))

    def reach(self) -> float:
        return self.h

    def derivative(self, x, direction: int | np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.constant:
            return np.zeros_like(self(x))
        if np.ndim(direction) == 0:
            e = np.zeros(self.domain_dim)
            e[int(direction)] = 1.0
        else:
            e = np.asarray(direction, dtype=float)

        def central(h):
            return (self(x + h * e) - self(x - h * e)) / (2 * h)

        if self.order == 2:
            return central(self.h)
        if self.order == 4:
            return (4 * central(self.h / 2) - central(self.h)) / 3
        raise ValueError("derivative order must be 2 or 4")

    def jacobian(self, x) -> np.ndarray:
        """Stack of partial derivatives, leading axis = coordinate."""
        if self.constant:
            v = self(x)
            return np.zeros((self.domain_dim,) + v.shape, dtype=v.dtype)
        return np.stack([self.derivative(x, i) for i in range(self.domain_dim)])


def constant_field(value, domain_dim: int) -> ChartField:
    value = np.asarray(value)
    return ChartField(lambda x: value, domain_dim, constant=True)


@dataclass(frozen=True)
class AGStructure:
    p: int
    q: int
    sigma: ChartField
    scale: ChartField
    alpha: ChartField
    lo: np.ndarray
    hi: np.ndarray
    gamma_unprimed: ChartField | None = None
    gamma_primed: ChartField | None = None
    base: "AGStructure | None" = None
    phi: ChartField | None = None
    t: float = 0.0
    name: str = ""

    @property
    def dim(self) -> int:
        return self.p * self.q

    def check_point(self, x, reach: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ChartDomainError(f"point must have shape ({self.dim},)")
        if np.any(x - reach < self.lo - 1e-15) or np.any(x + reach > self.hi + 1e-15):
            raise ChartDomainError(f"stencil of reach {reach} at {x} leaves the chart")
        return x

    def sigma_condition(self, x) -> float:
        return float(np.linalg.cond(self.sigma(x)))

    def frames(self, x) -> np.ndarray:
        return np.linalg.inv(self.sigma(x))

    def brackets(self, x) -> np.ndarray:
        """Structure functions c[a, b, c] with [E_a, E_b] = c_ab^c E_c."""
        return frame_brackets(self.sigma, x)

    def connection(self, x) -> tuple[np.ndarray, np.ndarray]:
        if self.gamma_unprimed is None:
            gu, gp = canonical_connections(self.sigma, self.scale, self.alpha, self.p, self.q)
            return gu(x), gp(x)
        return self.gamma_unprimed(x), self.gamma_primed(x)

    def with_canonical(self) -> "AGStructure":
        gu, gp = canonical_connections(self.sigma, self.scale, self.alpha, self.p, self.q)
        return replace(self, gamma_unprimed=gu, gamma_primed=gp)

    def rescaled(self, f: ChartField) -> "AGStructure":
        """Same structure with scale eps -> f * eps and re-derived canonical connections."""
        s = self.scale
        new_scale = ChartField(lambda x: f(x) * s(x), self.dim, s.h, s.order)
        return replace(self, scale=new_scale, gamma_unprimed=None, gamma_primed=None).with_canonical()


# -- frame algebra ---------------------------------------------------------

def frame_brackets(sigma: ChartField, x) -> np.ndarray:
    S = sigma(x)
    E = np.linalg.inv(S)
    dS = sigma.jacobian(x)
    dE = -np.einsum("ij,kjl,lm->kim", E, dS, E)
    # [E_a, E_b]^j = E^i_a d_i E^j_b - E^i_b d_i E^j_a
    br = np.einsum("ia,ijb->abj", E, dE)
    br = br - np.transpose(br, (1, 0, 2))
    return np.einsum("cj,abj->abc", S, br)


def tm_connection(gu: np.ndarray, gp: np.ndarray, p: int, q: int) -> np.ndarray:
    """Gamma[a, b, c] = Gamma_{ab}^c built from the two spin connections."""
    n = p * q
    G = np.einsum("aCB,XY->aBXCY", gu, np.eye(q)) + np.einsum("aYX,BC->aBXCY", gp, np.eye(p))
    return G.reshape(n, n, n)


def torsion_from(c: np.ndarray, G: np.ndarray) -> np.ndarray:
    return c - G + np.transpose(G, (1, 0, 2))


def _pieces(T: np.ndarray, p: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    T6 = T.reshape(p, q, p, q, p, q)
    f = 0.5 * (T6 + np.transpose(T6, (2, 1, 0, 3, 4, 5)))
    return f, T6 - f


@lru_cache(maxsize=8)
def _canonical_system(p: int, q: int):
    n = p * q
    nu, npr = n * p * p, n * q * q
    pairs = tuple(contractible_pairs(torsion_signature(p, q)))
    cols = []
    for k in range(nu + npr):
        g = np.zeros(nu + npr)
        g[k] = 1.0
        gu = g[:nu].reshape(n, p, p)
        gp = g[nu:].reshape(n, q, q)
        T = torsion_from(np.zeros((n, n, n)), tm_connection(gu, gp, p, q))
        f, ft = _pieces(T, p, q)
        tr_rows = np.concatenate([_trace_vec(f, pairs), _trace_vec(ft, pairs)])
        trace_u = np.einsum("aBB->a", gu)
        trace_p = np.einsum("aBB->a", gp)
        cols.append(np.concatenate([tr_rows, trace_u, trace_p]))
    M = np.array(cols).T
    sv = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    if rank < M.shape[1]:
        raise DegenerateStructureError(
            f"canonical connection system for (p,q)=({p},{q}) has rank {rank} < {M.shape[1]}"
        )
    pinv = np.linalg.pinv(M)
    return M, pinv, pairs, float(sv[0] / sv[-1])


def canonical_system_condition(p: int, q: int) -> float:
    return _canonical_system(p, q)[3]


def canonical_connection_at(sigma: ChartField, scale: ChartField, alpha: ChartField,
                            p: int, q: int, x) -> tuple[np.ndarray, np.ndarray]:
    n = p * q
    M, pinv, pairs, _ = _canonical_system(p, q)
    S = sigma(x)
    if np.linalg.cond(S) > 1e12:
        raise DegenerateStructureError(f"sigma is singular at {x}")
    E = np.linalg.inv(S)
    c = frame_brackets(sigma, x)
    f, ft = _pieces(c, p, q)
    s = scale(x)
    ds = scale.jacobian(x)
    a = alpha(x)
    da = alpha.jacobian(x)
    dlog_s = (ds / s).real if np.isrealobj(ds) else ds / s
    dlog_sa = dlog_s + da / a
    rhs = np.concatenate([
        -_trace_vec(f, pairs), -_trace_vec(ft, pairs),
        E.T @ dlog_s, E.T @ dlog_sa,
    ])
    g = pinv @ rhs
    resid = M @ g - rhs
    if np.max(np.abs(resid)) > 1e-8 * max(1.0, np.max(np.abs(rhs))):
        raise DegenerateStructureError("canonical connection system is inconsistent")
    nu = n * p * p
    return g[:nu].reshape(n, p, p), g[nu:].reshape(n, q, q)


def canonical_connections(sigma: ChartField, scale: ChartField, alpha: ChartField | None = None,
                          p: int | None = None, q: int = 2) -> tuple[ChartField, ChartField]:
    """Unique spin connections with trace-free F, F~ and parallel eps, alpha(eps).

    The defining conditions are linear in the connection coefficients at
    each point; they are solved by least squares after a one-off full-rank
    check of the constant coefficient matrix.
    """
    n = sigma.domain_dim
    if p is None:
        p = n // q
    if alpha is None:
        alpha = constant_field(1.0, n)

    memo: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def both(x):
        key = np.asarray(x, dtype=float).tobytes()
        if key not in memo:
            if len(memo) > 256:
                memo.clear()
            memo[key] = canonical_connection_at(sigma, scale, alpha, p, q, x)
        return memo[key]

    def gu(x):
        return both(x)[0]

    def gp(x):
        return both(x)[1]

    return ChartField(gu, n, sigma.h, sigma.order), ChartField(gp, n, sigma.h, sigma.order)


# -- flat model ------------------------------------------------------------

def flat_model(p: int, q: int = 2, half_width: float = 0.5) -> AGStructure:
    """Big affine cell of Gr(q, C^{p+q}): planes rowspan[I_q | x], x a q-by-p matrix.

    The tangent space Hom(gamma, C^{p+q}/gamma) is framed by the rows of
    [I | x] (for gamma) and the last p coordinates (for the quotient), so
    ``sigma`` is the identity in the coordinates ``x[A', A] -> a = A*q + A'``.
    """
    if p < 2 or q < 2:
        raise ValueError("flat model needs p, q >= 2")
    n = p * q
    lo, hi = -half_width * np.ones(n), half_width * np.ones(n)
    ag = AGStructure(
        p, q,
        sigma=constant_field(np.eye(n), n),
        scale=constant_field(1.0, n),
        alpha=constant_field(1.0, n),
        lo=lo, hi=hi, name=f"flat({p},{q})",
    )
    zero_u = constant_field(np.zeros((n, p, p)), n)
    zero_p = constant_field(np.zeros((n, q, q)), n)
    return replace(ag, gamma_unprimed=zero_u, gamma_primed=zero_p)


def chart_matrix(x, p: int, q: int) -> np.ndarray:
    """Coordinates as the q-by-p matrix x[A', A]."""
    return np.asarray(x).reshape(p, q).T


def flat_plane(x, p: int, q: int) -> np.ndarray:
    """The q-plane rowspan[I_q | x] as a (q, p+q) matrix."""
    return np.hstack([np.eye(q), chart_matrix(x, p, q)])


def alpha_plane(p: int, q: int, primed: np.ndarray) -> np.ndarray:
    """Frame-component basis (p vectors of length pq) of the alpha-plane {mu^A pi^A'}."""
    primed = np.asarray(primed)
    return np.stack([np.kron(np.eye(p)[A], primed) for A in range(p)])


# -- torsion and invariants ------------------------------------------------

def torsion(ag: AGStructure, x) -> SpinorTensor:
    x = ag.check_point(x, ag.sigma.reach())
    T = torsion_array(ag, x)
    return SpinorTensor(torsion_signature(ag.p, ag.q), T.reshape(ag.p, ag.q, ag.p, ag.q, ag.p, ag.q))


def torsion_array(ag: AGStructure, x) -> np.ndarray:
    gu, gp = ag.connection(x)
    c = ag.brackets(x)
    return torsion_from(c, tm_connection(gu, gp, ag.p, ag.q))


@dataclass
class TorsionReport:
    torsion: list
    f: list
    f_tilde: list
    f_norm: float
    f_tilde_norm: float
    trace_residual: float
    points: np.ndarray = field(repr=False, default=None)


def torsion_report(ag: AGStructure, grid: np.ndarray) -> TorsionReport:
    p, q = ag.p, ag.q
    pairs = contractible_pairs(torsion_signature(p, q))
    Ts, Fs, Fts = [], [], []
    tr = 0.0
    for x in grid:
        T = torsion_array(ag, ag.check_point(x, ag.sigma.reach()))
        f, ft = _pieces(T, p, q)
        Ts.append(T)
        Fs.append(f)
        Fts.append(ft)
        tr = max(tr, float(np.max(np.abs(_trace_vec(f, pairs)), initial=0.0)),
                 float(np.max(np.abs(_trace_vec(ft, pairs)), initial=0.0)))
    sup = lambda arrs: max((float(np.max(np.abs(a))) for a in arrs), default=0.0)
    return TorsionReport(Ts, Fs, Fts, sup(Fs), sup(Fts), tr, np.asarray(grid))


def trace_free_pieces(T: np.ndarray, p: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Totally trace-free parts of the F and F~ pieces of a torsion-shaped array."""
    sig = torsion_signature(p, q)
    f, ft = _pieces(T, p, q)
    return f - pure_trace_part(f, sig), ft - pure_trace_part(ft, sig)


def right_flat_residual(ag: AGStructure, grid: np.ndarray) -> float:
    """Sup norm of the totally trace-free F~ over the grid (p > 2 only)."""
    if ag.p == 2:
        raise NotSupportedError(
            "p = 2 right-flatness is governed by a curvature component not available here"
        )
    if ag.q != 2:
        raise NotSupportedError("right-flat test is implemented for q = 2")
    worst = 0.0
    for x in grid:
        T = torsion_array(ag, ag.check_point(x, ag.sigma.reach()))
        _, ft = trace_free_pieces(T, ag.p, ag.q)
        worst = max(worst, float(np.max(np.abs(ft))))
    return worst


def covariant_derivative_endo(ag: AGStructure, phi: ChartField, x) -> np.ndarray:
    """nabla_a phi_b^c in frame components, shape (n, n, n) = [a, b, c].

    ``phi`` returns coordinate components ``phi[i, j] = phi_i^j``.
    """
    S = ag.sigma(x)
    E = np.linalg.inv(S)

    def frame_phi(y):
        Sy = ag.sigma(y)
        return np.linalg.inv(Sy).T @ phi(y) @ Sy.T

    field_ = ChartField(frame_phi, ag.dim, phi.h, phi.order)
    dphi = field_.jacobian(x)                       # [i, b, c]
    ephi = np.einsum("ia,ibc->abc", E, dphi)        # E_a(phi_b^c)
    gu, gp = ag.connection(x)
    G = tm_connection(gu, gp, ag.p, ag.q)
    ph = frame_phi(x)
    return ephi - np.einsum("abd,dc->abc", G, ph) + np.einsum("adc,bd->abc", G, ph)


def skew_derivative(ag: AGStructure, phi: ChartField, x) -> np.ndarray:
    """nabla_[a phi_b]^c with unit-weight antisymmetrization."""
    D = covariant_derivative_endo(ag, phi, x)
    return 0.5 * (D - np.transpose(D, (1, 0, 2)))


@dataclass
class LinearizedReport:
    full: float
    reduced: float | None


def linearized_rightflat_residual(ag: AGStructure, phi: ChartField, grid: np.ndarray,
                                  report: bool = False):
    """Sup norm of the trace-free part of nabla_[a phi_b]^c over the grid.

    For q = 2 the reduced (primed-symmetric) piece is reported as well.
    """
    n = ag.dim
    probe = np.asarray(phi(np.asarray(grid[0], dtype=float)))
    if probe.shape != (n, n):
        raise ValueError(f"phi must be an ({n}, {n}) endomorphism field")
    full, reduced = 0.0, 0.0
    for x in grid:
        K = skew_derivative(ag, phi, ag.check_point(x, 2 * ag.sigma.reach()))
        f, ft = trace_free_pieces(K, ag.p, ag.q)
        full = max(full, float(np.max(np.abs(f))), float(np.max(np.abs(ft))))
        reduced = max(reduced, float(np.max(np.abs(ft))))
    if report:
        return LinearizedReport(full, reduced if ag.q == 2 else None)
    return full


def deform(ag: AGStructure, phi: ChartField, t: float) -> AGStructure:
    """sigma-hat = sigma o (delta + t phi), connections re-derived canonically."""
    if t == 0:
        return ag
    n = ag.dim
    sig = ag.sigma

    def sigma_hat(x):
        m = np.eye(n) + t * phi(x)
        return sig(x) @ m.T

    probe = np.eye(n) + t * phi(np.asarray(0.5 * (ag.lo + ag.hi)))
    if np.linalg.cond(probe) > 1e12:
        raise DegenerateStructureError("1 + t*phi is not invertible")
    new = replace(
        ag, sigma=ChartField(sigma_hat, n, sig.h, sig.order),
        gamma_unprimed=None, gamma_primed=None, base=ag, phi=phi, t=t,
        name=f"{ag.name}+{t:g}phi",
    )
    return new.with_canonical()


def contorsion(deformed: AGStructure, x) -> np.ndarray:
    """Q_ab^c = (Gamma-hat - Gamma)/t relative to the stored base structure."""
    base = deformed.base
    if base is None:
        raise ValueError("structure carries no base")
    G1 = tm_connection(*deformed.connection(x), deformed.p, deformed.q)
    G0 = tm_connection(*base.connection(x), base.p, base.q)
    return (G1 - G0) / deformed.t


# -- grids -----------------------------------------------------------------

def chart_grid(ag: AGStructure, per_axis: int = 5, cap: int = 2000, margin: float = 0.05,
               seed: int = 0) -> np.ndarray:
    """Uniform grid in the chart box shrunk by ``margin``; deterministically subsampled to ``cap``."""
    axes = [np.linspace(l + margin, h - margin, per_axis) for l, h in zip(ag.lo, ag.hi)]
    total = per_axis ** ag.dim
    if total <= cap:
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=cap, replace=False)
    flat.sort()
    idx = np.array(np.unravel_index(flat, (per_axis,) * ag.dim)).T
    return np.array([[axes[k][i] for k, i in enumerate(row)] for row in idx])


# -- polynomial deformation fields -----------------------------------------

def polynomial_field(coeffs: dict, n: int, h: float = 1e-3) -> ChartField:
    """Endomorphism field from a table {monomial exponent tuple: (n, n) coefficient}.

    Exponent tuples have length ``n``; the empty key ``()`` means constant.
    """
    items = []
    for k, v in coeffs.items():
        k = tuple(k) if len(k) else (0,) * n
        items.append((np.array(k), np.asarray(v, dtype=float)))

    def ev(x):
        out = np.zeros_like(items[0][1])
        for e, c in items:
            out = out + np.prod(x ** e) * c
        return out

    return ChartField(ev, n, h)
