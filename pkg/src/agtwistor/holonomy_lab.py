"""Residue of the meromorphic volume form along the disk family, and holonomy reduction.

On ``CP^{2m+1}`` the form ``Omega = nu / q^{m+1}`` (``nu`` the Euler-contracted
volume form) has a pole of order ``m+1`` along the quadric.  Pulling it back
by the disk family and integrating over the boundary circles gives a p-form
on the moduli chart of type ``omega_{A'...D'} (x) f eps``; ``omega`` is the
m-th symmetric power of a quadratic form ``omega~`` on ``H``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import null_space

from .ag_chart import AGStructure, ChartField
from .disk_moduli import (
    DiskFamily,
    RealSliceEmbedding,
    RecoveredStructure,
    VectorField,
    quadric,
    recover_ag,
)
from .local_twistor import CurveOnM, square_loop


class ContourError(ValueError):
    pass


class DivergenceError(ValueError):
    pass


# -- compatible complex structure and the root omega~ -----------------------------

@dataclass(frozen=True)
class CompatibleJ:
    """Complex structure on H acting through the H factor of E (x) H."""

    matrix: np.ndarray = field(default_factory=lambda: np.array([[0.0, -1.0], [1.0, 0.0]]))
    zeta: complex = 1j          # fibre point of the (1,0) alpha-planes

    def __post_init__(self):
        if np.max(np.abs(self.matrix @ self.matrix + np.eye(2))) > 1e-12:
            raise ValueError("J^2 != -1")

    def on_tangent(self, p: int) -> np.ndarray:
        return np.kron(np.eye(p), self.matrix)


def root_from_J(J: CompatibleJ, h=(1.0, 0.0)) -> np.ndarray:
    """omega~_{A'B'} = h h + J(h) J(h) for the covector h (J acting on H*)."""
    h = np.asarray(h, dtype=float)
    Jh = J.matrix.T @ h
    return np.outer(h, h) + np.outer(Jh, Jh)


def sym_power(root: np.ndarray, m: int) -> np.ndarray:
    """Symmetrized m-th tensor power of a symmetric 2x2 form, shape (2,)*2m."""
    T = root
    for _ in range(m - 1):
        T = np.multiply.outer(T, root)
    axes = list(range(2 * m))
    perms = list(itertools.permutations(axes))
    return sum(np.transpose(T, p) for p in perms) / len(perms)


def contract_pi(omega: np.ndarray, pi: np.ndarray) -> complex:
    out = omega
    for _ in range(omega.ndim):
        out = np.tensordot(out, pi, axes=([0], [0]))
    return complex(out)


def contraction_identity_residual(J: CompatibleJ, zetas, m: int = 1) -> float:
    """sup |pi...pi omega - (1 + zeta^2)^m| with pi = (1, zeta)."""
    omega = sym_power(root_from_J(J), m)
    return max(abs(contract_pi(omega, np.array([1.0, z])) - (1 + z * z) ** m) for z in np.atleast_1d(zetas))


# -- Omega -----------------------------------------------------------------------------

@dataclass(frozen=True)
class OmegaForm:
    m: int

    @property
    def n(self) -> int:
        return 2 * self.m + 2

    @property
    def pole_order(self) -> int:
        return self.m + 1

    def __call__(self, z: np.ndarray, vectors: np.ndarray) -> complex:
        """Omega at [z] on 2m+1 homogeneous tangent vectors (columns)."""
        M = np.column_stack([z, vectors])
        return np.linalg.det(M) / quadric(z) ** self.pole_order


def reality_residual(P: RealSliceEmbedding, samples: np.ndarray) -> float:
    """sup |Im Omega| / |Omega| on real tangent frames of the slice."""
    if P.p % 2:
        raise ValueError("Omega needs p = 2m even")
    om = OmegaForm(P.p // 2)
    samples = np.asarray(samples, dtype=float)
    samples = samples / np.linalg.norm(samples, axis=1, keepdims=True)
    Z, D = P.psi(samples)
    worst = 0.0
    for u, z, Dz in zip(samples, Z, D):
        val = om(z, Dz @ null_space(u[None, :]))
        worst = max(worst, abs(val.imag) / abs(val))
    return worst


# -- residue ------------------------------------------------------------------------

@dataclass
class OmegaSpinor:
    omega: np.ndarray           # (2,)*2m, normalized so that det(root) = 1
    root: np.ndarray            # omega~, symmetric 2x2
    f: float
    m: int
    raw: np.ndarray             # Omega-hat on frame vectors, complex (2,)*2m
    imag_ratio: float           # |Im raw| / |raw|
    fit_residual: float         # |raw - f sym_power(root)| / |raw|


def _root_of_form(coeffs: np.ndarray, m: int) -> np.ndarray:
    """S(zeta) = s0 + s1 zeta + s2 zeta^2 with S^m matching the low coefficients of P."""
    p0, p1, p2 = coeffs[:3]
    s0 = np.sign(p0) * abs(p0) ** (1.0 / m) if m % 2 else abs(p0) ** (1.0 / m)
    s1 = p1 / (m * s0 ** (m - 1))
    s2 = (p2 - comb(m, 2) * s0 ** (m - 2) * s1 ** 2) / (m * s0 ** (m - 1))
    return np.array([[s0, s1 / 2], [s1 / 2, s2]])


def _binary_coeffs(T: np.ndarray) -> np.ndarray:
    """Coefficients of T(pi, ..., pi) in zeta for pi = (1, zeta)."""
    d = T.ndim
    out = np.zeros(d + 1)
    for idx in itertools.product((0, 1), repeat=d):
        out[sum(idx)] += T[idx]
    return out


def omega_residue(disk, frames: np.ndarray, m: int, n_nodes: int = 128, radius: float = 1.0) -> OmegaSpinor:
    """Residue of Psi*Omega on the frame vectors u_(j, A') and its spinor factorization."""
    p = 2 * m
    theta = 2 * np.pi * np.arange(n_nodes) / n_nodes
    w = radius * np.exp(1j * theta)
    F, dF, Fs = disk.F(w), disk.dF(w), disk.Fs(w)
    qF = quadric(F)
    if np.min(np.abs(qF) / np.sum(np.abs(F) ** 2, axis=1)) < 1e-8:
        raise ContourError("contour passes through the pole locus")
    V = np.einsum("wns,sa->wna", Fs, frames)            # pushed frame vectors
    raw = np.zeros((2,) * p, dtype=complex)
    for idx in itertools.product((0, 1), repeat=p):
        cols = [V[:, :, 2 * j + idx[j]] for j in range(p)]
        M = np.stack([F] + cols + [dF], axis=2)
        integrand = np.linalg.det(M) / qF ** (m + 1)
        # (1/2 pi) \oint Psi*Omega(., d/dtheta) dtheta, d/dtheta = i w d/dw; real on a real slice
        raw[idx] = np.mean(integrand * 1j * w)
    scale = np.max(np.abs(raw))
    imag_ratio = float(np.max(np.abs(raw.imag)) / scale)
    R = raw.real
    root = _root_of_form(_binary_coeffs(R), m)
    det = np.linalg.det(root)
    if det <= 0:
        raise ValueError("omega~ is not definite")
    root = root / math.sqrt(det)
    sp = sym_power(root, m)
    f = float(np.sum(R * sp) / np.sum(sp * sp))
    fit = float(np.max(np.abs(R - f * sp)) / scale)
    if f < 0:
        f, root = -f, (-root if m % 2 else root)
        sp = sym_power(root, m)
    return OmegaSpinor(sp, root, f, m, raw, imag_ratio, fit)


def contour_variation(disk, frames, m: int, radii=(0.5, 0.75, 1.0), n_nodes: int = 128) -> float:
    """Relative spread of the residue over concentric contours (zero for a single pole)."""
    vals = [omega_residue(disk, frames, m, n_nodes, r).raw for r in radii]
    scale = np.max(np.abs(vals[-1]))
    return float(max(np.max(np.abs(v - vals[-1])) for v in vals) / scale)


# -- fields on the recovered structure ------------------------------------------------

class OmegaField:
    """x -> Omega-hat data on a recovered structure.

    Writing Omega-hat = f (omega~_0)^m (x) eps_frame with det omega~_0 = 1, the
    scale g eps_frame with g = f^{1/(m+1)} is the one in which
    Omega-hat = omega (x) g eps_frame and omega~ = g omega~_0 has unit
    determinant against the area form preserved by the connection.
    """

    def __init__(self, rec: RecoveredStructure, n_nodes: int = 128, h: float = 1e-3):
        self.rec = rec
        self.m = rec.p // 2
        if rec.p % 2:
            raise ValueError("holonomy pipeline needs p = 2m even")
        self.n_nodes = n_nodes
        self._cache: dict[bytes, OmegaSpinor] = {}
        n = 2 * rec.p
        m = self.m
        self.f = ChartField(lambda x: np.array(self.at(x).f), n, h=h)
        self.scale = ChartField(lambda x: np.array(self.at(x).f ** (1 / (m + 1))), n, h=h)
        self.omega = ChartField(lambda x: self.at(x).f ** (m / (m + 1)) * self.at(x).omega, n, h=h)
        self.root = ChartField(lambda x: self.at(x).f ** (1 / (m + 1)) * self.at(x).root, n, h=h)

    def at(self, x) -> OmegaSpinor:
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        if key not in self._cache:
            disk = self.rec.family.solve(x)
            self._cache[key] = omega_residue(disk, self.rec.frames(x), self.m, self.n_nodes)
        return self._cache[key]


def _primed_symmetrize(T: np.ndarray) -> np.ndarray:
    """Symmetrize axes 1.. of T (axis 0 is the unprimed index)."""
    axes = list(range(1, T.ndim))
    perms = list(itertools.permutations(axes))
    return sum(np.transpose(T, [0] + list(p)) for p in perms) / len(perms)


def nabla_omega(ag: AGStructure, omega: ChartField, x) -> np.ndarray:
    """nabla_{A A'} omega_{B'...}, shape (p, 2, 2, ..., 2)."""
    x = np.asarray(x, dtype=float)
    _, gp = ag.connection(x)
    E = ag.frames(x)
    w = omega(x)
    dw = omega.jacobian(x)                      # (n, 2, ..., 2)
    out = np.tensordot(E.T, dw, axes=([1], [0]))  # frame derivatives E_a omega
    k = w.ndim
    for slot in range(k):
        # - Gamma~_{a B'}^{C'} omega_{.. C' ..}
        moved = np.moveaxis(w, slot, 0)
        term = np.tensordot(gp, moved, axes=([1], [0]))      # (a, B', rest...)
        out = out - np.moveaxis(term, 1, slot + 1)
    return out.reshape((ag.p, 2) + w.shape)


def twistor_parts(ag: AGStructure, omega: ChartField, x) -> tuple[np.ndarray, np.ndarray]:
    """Primed-symmetric part and the remainder of nabla omega."""
    N = nabla_omega(ag, omega, x)
    sym = _primed_symmetrize(N)
    return sym, N - sym


def twistor_equation_residual(ag: AGStructure, omega: ChartField, grid) -> float:
    return max(float(np.max(np.abs(twistor_parts(ag, omega, x)[0]))) for x in np.atleast_2d(grid))


def zrm_residual(ag: AGStructure, omega: ChartField, grid) -> float:
    return max(float(np.max(np.abs(twistor_parts(ag, omega, x)[1]))) for x in np.atleast_2d(grid))


# -- holonomy ----------------------------------------------------------------------------

@dataclass
class HolonomyResult:
    defect: float
    det_defect: float
    verdict: str              # "reduced", "not-reduced" or "hypothesis-failed"
    holonomies: list


def primed_holonomy(ag: AGStructure, curve: CurveOnM) -> np.ndarray:
    """RK4 transport of upper primed spinors, d pi/ds = -(S x')^a Gamma~_a pi."""
    H = np.eye(2)
    V = curve.vertices
    for a, b in zip(V[:-1], V[1:]):
        h = 1.0 / curve.steps
        vel = b - a

        def rhs(s, Y):
            x = a + s * vel
            _, gp = ag.connection(x)
            v = ag.sigma(x) @ vel
            return -np.einsum("a,aCB->CB", v, gp) @ Y

        for k in range(curve.steps):
            s = k * h
            k1 = rhs(s, H)
            k2 = rhs(s + h / 2, H + h / 2 * k1)
            k3 = rhs(s + h / 2, H + h / 2 * k2)
            k4 = rhs(s + h, H + h * k3)
            H = H + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return H


def parallel_holonomy_test(ag: AGStructure, root: ChartField, loops: Sequence[CurveOnM],
                           threshold: float = 1e-4, reality: float | None = None,
                           gate: float = 1e-6) -> HolonomyResult:
    """Transport around loops; omega~ and det must be preserved for a reduction."""
    if reality is not None and reality > gate:
        return HolonomyResult(float("nan"), float("nan"), "hypothesis-failed", [])
    defect, det_defect, hols = 0.0, 0.0, []
    for loop in loops:
        x0 = loop.vertices[0]
        w = root(x0)
        if abs(np.linalg.det(w)) < 1e-8:
            raise ValueError("omega~ degenerate on loop")
        H = primed_holonomy(ag, loop)
        hols.append(H)
        defect = max(defect, float(np.max(np.abs(H.T @ w @ H - w))))
        det_defect = max(det_defect, abs(np.linalg.det(H) - 1))
    ok = defect < threshold and det_defect < threshold
    return HolonomyResult(defect, det_defect, "reduced" if ok else "not-reduced", hols)


def loop_family(center, side: float = 0.1, n_random: int = 20, steps: int = 2, seed: int = 0) -> list[CurveOnM]:
    """Coordinate squares in consecutive planes plus random parallelograms."""
    center = np.asarray(center, dtype=float)
    n = len(center)
    loops = [square_loop(center, i, i + 1, side, steps) for i in range(n - 1)]
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        u, v = rng.normal(size=(2, n))
        u *= side / np.linalg.norm(u)
        v *= side / np.linalg.norm(v)
        c = center - 0.5 * (u + v)
        loops.append(CurveOnM(np.array([c, c + u, c + u + v, c + v, c]), steps))
    return loops


# -- divergence-free flows ------------------------------------------------------------------

def divergence(v: VectorField, points) -> np.ndarray:
    """Round-sphere divergence of the tangential part of v at unit points.

    For x on the unit sphere S^n and v_T = v - (x.v) x:
        div v_T = tr Dv - x.Dv x - n x.v.
    """
    X = np.asarray(points, dtype=float)
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    n = X.shape[1] - 1
    val = v.value(X.astype(complex)).real
    J = v.jacobian(X.astype(complex)).real
    tr = np.trace(J, axis1=-2, axis2=-1)
    return tr - np.einsum("ki,kij,kj->k", X, J, X) - n * np.einsum("ki,ki->k", X, val)


def divfree_flow(v: VectorField | None, t: float, p: int, samples: int = 64, tol: float = 1e-10,
                 seed: int = 0, steps: int = 8) -> RealSliceEmbedding:
    """Slice psi_t from the flow of the holomorphic extension of i v; v is checked to be divergence free."""
    if v is None:
        return RealSliceEmbedding(p)
    pts = np.random.default_rng(seed).normal(size=(samples, p + 2))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    tangency = np.max(np.abs(np.einsum("ki,ki->k", pts, v.value(pts.astype(complex)).real)))
    if tangency > tol:
        raise DivergenceError(f"v is not tangent to the sphere (|x.v| = {tangency:.1e})")
    div = np.max(np.abs(divergence(v, pts)))
    if div > tol:
        raise DivergenceError(f"v is not divergence free (|div v| = {div:.1e})")
    return RealSliceEmbedding(p, v, t, steps)


# -- end-to-end ----------------------------------------------------------------------------------

@dataclass
class HolonomyLab:
    """Recovered structure in the scale determined by Omega-hat, together with the omega fields."""

    P: RealSliceEmbedding
    half_width: float = 0.3
    K: int = 16

    def __post_init__(self):
        self.family = DiskFamily(self.P, self.K)
        base, self.rec = recover_ag(self.P, self.half_width, self.K, family=self.family)
        self.base = base
        self.fields = OmegaField(self.rec)
        self.ag = base.rescaled(self.fields.scale)
