"""Holomorphic disks in CP^{p+1} with boundary on a deformed real slice.

Disks are lifted to homogeneous coordinates, ``F(w) = sum_k a_k w^k`` in
``C^{p+2}``.  The boundary condition is written as

    F(e^{i theta}) = e^{i theta / 2} psi(u(theta)),

with ``u`` a real antiperiodic curve in ``R^{p+2}`` (half-integer Fourier
modes) and ``psi`` an odd, degree-one homogeneous lift of the slice.  The
standard disk through a quadric point ``z = a + ib`` is ``F(w) = z + conj(z) w``
with ``u(theta) = 2 (a cos(theta/2) + b sin(theta/2))``.

Unknowns are the ``K`` half-integer cosine/sine coefficients of ``u``.  The
equations ask the Fourier modes ``-1 ... -(K-1)`` of the right-hand side to
vanish and pin the zero mode, ``F(0) = z``; this fixes the disk through ``[z]``
together with its Moebius and scaling freedom and gives a square system.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import null_space, subspace_angles


class ContinuationError(RuntimeError):
    """Newton failed to converge; the continuation step was too large."""


class JacobianSingularError(RuntimeError):
    pass


class ExtensionRadiusError(ValueError):
    pass


class DegenerateCurveError(ValueError):
    def __init__(self, msg, common_subspace=None):
        super().__init__(msg)
        self.common_subspace = common_subspace


def quadric(z: np.ndarray) -> np.ndarray:
    return np.sum(np.asarray(z) ** 2, axis=-1)


# -- holomorphic vector fields on C^{n} (homogeneous of degree one) ----------

class VectorField:
    """Holomorphic field v(z) on C^n, rows of ``z`` are points; real on real points."""

    n: int

    def value(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def descriptor(self) -> dict:
        return {"type": type(self).__name__}


@dataclass
class LinearField(VectorField):
    A: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.n = self.A.shape[0]

    def value(self, z):
        return z @ self.A.T

    def jacobian(self, z):
        return np.broadcast_to(self.A, z.shape[:-1] + self.A.shape).astype(complex)

    def descriptor(self):
        return {"type": "linear", "A": self.A.tolist()}


@dataclass
class RotationCurlField(VectorField):
    """v(x) = x_k x_l K x / |x|^2 with K the rotation generator of the (i, j) plane.

    Tangent to spheres and divergence free for k, l outside {i, j}; the
    holomorphic extension replaces |x|^2 by the quadric q(z).
    """

    n: int
    i: int = 0
    j: int = 1
    k: int = 2
    l: int = 3
    scale: float = 1.0

    def __post_init__(self):
        K = np.zeros((self.n, self.n))
        K[self.i, self.j], K[self.j, self.i] = -1.0, 1.0
        self.K = K * self.scale

    def value(self, z):
        q = quadric(z)[..., None]
        return z[..., [self.k]] * z[..., [self.l]] * (z @ self.K.T) / q

    def jacobian(self, z):
        n = self.n
        q = quadric(z)[..., None, None]
        Kz = z @ self.K.T
        zk, zl = z[..., self.k], z[..., self.l]
        dmono = np.zeros(z.shape, dtype=complex)
        dmono[..., self.k] += zl
        dmono[..., self.l] += zk
        mono = (zk * zl)[..., None, None]
        J = Kz[..., :, None] * dmono[..., None, :] / q
        J = J + mono * self.K / q
        J = J - mono * Kz[..., :, None] * 2 * z[..., None, :] / q ** 2
        return J

    def descriptor(self):
        return {"type": "rotation_curl", "n": self.n, "plane": [self.i, self.j],
                "monomial": [self.k, self.l], "scale": self.scale}


@dataclass
class TangentialLinearField(VectorField):
    """v(x) = A x - (x.Ax) x / |x|^2, the sphere-tangential part of a linear field."""

    A: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.n = self.A.shape[0]

    def value(self, z):
        Az = z @ self.A.T
        q = quadric(z)[..., None]
        return Az - np.sum(z * Az, axis=-1)[..., None] * z / q

    def jacobian(self, z):
        A = self.A
        Az = z @ A.T
        s = np.sum(z * Az, axis=-1)[..., None, None]
        q = quadric(z)[..., None, None]
        ds = z @ (A + A.T)                      # d(z.Az)/dz
        eye = np.eye(self.n)
        J = A - (z[..., :, None] * ds[..., None, :] + s * eye) / q
        return J + s * z[..., :, None] * 2 * z[..., None, :] / q ** 2

    def descriptor(self):
        return {"type": "tangential_linear", "A": self.A.tolist()}


@dataclass
class SumField(VectorField):
    fields: list

    def __post_init__(self):
        self.n = self.fields[0].n

    def value(self, z):
        return sum(f.value(z) for f in self.fields)

    def jacobian(self, z):
        return sum(f.jacobian(z) for f in self.fields)

    def descriptor(self):
        return {"type": "sum", "fields": [f.descriptor() for f in self.fields]}


def field_from_descriptor(d: dict) -> VectorField:
    kind = d["type"]
    if kind == "linear":
        return LinearField(np.array(d["A"]))
    if kind == "rotation_curl":
        i, j = d["plane"]
        k, l = d["monomial"]
        return RotationCurlField(d["n"], i, j, k, l, d.get("scale", 1.0))
    if kind == "tangential_linear":
        return TangentialLinearField(np.array(d["A"]))
    if kind == "sum":
        return SumField([field_from_descriptor(x) for x in d["fields"]])
    raise ValueError(f"unknown vector field type {kind!r}")


# -- real slice ------------------------------------------------------------

@dataclass(frozen=True)
class RealSliceEmbedding:
    """psi_t: RP^{p+1} -> CP^{p+1}, the time-t flow of the holomorphic field i v.

    ``psi`` acts on homogeneous real points and is odd and homogeneous of
    degree one, so it descends to projective space.  The flow is integrated
    by RK4 together with its variational equation.
    """

    p: int
    generator: VectorField | None = None
    t: float = 0.0
    steps: int = 8
    max_imag_ratio: float = 0.5

    @property
    def n(self) -> int:
        return self.p + 2

    def at(self, t: float) -> "RealSliceEmbedding":
        return RealSliceEmbedding(self.p, self.generator, t, self.steps, self.max_imag_ratio)

    def descriptor(self) -> dict:
        return {"p": self.p, "t": self.t, "steps": self.steps,
                "generator": None if self.generator is None else self.generator.descriptor()}

    def psi(self, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Images and complex Jacobians at real points U of shape (N, n)."""
        U = np.asarray(U, dtype=float)
        z = U.astype(complex)
        Y = np.broadcast_to(np.eye(self.n, dtype=complex), U.shape + (self.n,)).copy()
        if self.generator is None or self.t == 0:
            return z, Y
        g = self.generator
        h = self.t / self.steps

        def rhs(z, Y):
            return 1j * g.value(z), 1j * g.jacobian(z) @ Y

        for _ in range(self.steps):
            k1 = rhs(z, Y)
            k2 = rhs(z + h / 2 * k1[0], Y + h / 2 * k1[1])
            k3 = rhs(z + h / 2 * k2[0], Y + h / 2 * k2[1])
            k4 = rhs(z + h * k3[0], Y + h * k3[1])
            z = z + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            Y = Y + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        ratio = np.max(np.linalg.norm(z.imag, axis=-1) / np.linalg.norm(z.real, axis=-1))
        if not np.isfinite(ratio) or ratio > self.max_imag_ratio:
            raise ExtensionRadiusError(f"flow left the validated neighbourhood (|Im|/|Re| = {ratio:.2f})")
        return z, Y


def standard_embedding(p: int) -> RealSliceEmbedding:
    return RealSliceEmbedding(p)


@dataclass
class EmbeddingReport:
    min_separation: float
    min_rank_sv: float
    totally_real_sv: float


def _chart_tangent(X: np.ndarray, G: np.ndarray, ell: np.ndarray) -> np.ndarray:
    """Push homogeneous tangent vectors X (n, k) at G to the affine chart {ell = 1}."""
    lG = ell @ G
    return (X - np.outer(G, ell @ X) / lG) / lG


def embedding_invariants(P: RealSliceEmbedding, samples: np.ndarray) -> EmbeddingReport:
    """Injectivity, immersion and total reality of psi on sample points of the unit sphere."""
    samples = np.asarray(samples, dtype=float)
    samples = samples / np.linalg.norm(samples, axis=1, keepdims=True)
    Z, D = P.psi(samples)
    Zn = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    sep = np.inf
    for a, b in itertools.combinations(range(len(Zn)), 2):
        # projective distance: sin of angle between complex lines
        c = abs(np.vdot(Zn[a], Zn[b]))
        sep = min(sep, math.sqrt(max(0.0, 1 - min(1.0, c) ** 2)))
    rank_sv, tr_sv = np.inf, np.inf
    for u, z, Dz in zip(samples, Z, D):
        T = null_space(u[None, :])
        X = _chart_tangent(Dz @ T, z, z.conj())
        B = null_space(z.conj()[None, :])
        C = B.conj().T @ X
        real_block = np.vstack([C.real, C.imag])
        rank_sv = min(rank_sv, float(np.linalg.svd(real_block, compute_uv=False)[-1]))
        both = np.hstack([real_block, np.vstack([-C.imag, C.real])])
        tr_sv = min(tr_sv, float(np.linalg.svd(both, compute_uv=False)[-1]))
    return EmbeddingReport(sep, rank_sv, tr_sv)


# -- moduli chart on the quadric --------------------------------------------

@dataclass(frozen=True)
class ModuliChart:
    """Chart x in R^{2p} of Q near z_0 = e_0 + i e_1.

    ``X = x.reshape(p, 2)``; the plane spanned by ``e_0 + sum_j X[j,0] e_{j+2}``
    and ``e_1 + sum_j X[j,1] e_{j+2}`` is orthonormalized to ``(a, b)`` and
    ``z = a + i b``.
    """

    p: int

    def frame(self, x):
        p = self.p
        X = np.asarray(x, dtype=float).reshape(p, 2)
        a = np.zeros(p + 2)
        b = np.zeros(p + 2)
        a[0], b[1] = 1.0, 1.0
        a[2:] = X[:, 0]
        b[2:] = X[:, 1]
        return a, b

    def z(self, x) -> np.ndarray:
        a, b = self.frame(x)
        a2 = a / np.linalg.norm(a)
        c = b - (b @ a2) * a2
        return a2 + 1j * c / np.linalg.norm(c)

    def dz(self, x) -> np.ndarray:
        """dz/dx, shape (p+2, 2p), computed analytically through Gram-Schmidt."""
        p = self.p
        a, b = self.frame(x)
        na = np.linalg.norm(a)
        a2 = a / na
        c = b - (b @ a2) * a2
        nc = np.linalg.norm(c)
        b2 = c / nc
        out = np.zeros((p + 2, 2 * p), dtype=complex)
        for j in range(p):
            for col in range(2):
                da = np.zeros(p + 2)
                db = np.zeros(p + 2)
                (da if col == 0 else db)[j + 2] = 1.0
                da2 = (da - a2 * (a2 @ da)) / na
                dc = db - (db @ a2) * a2 - (b @ da2) * a2 - (b @ a2) * da2
                db2 = (dc - b2 * (b2 @ dc)) / nc
                out[:, 2 * j + col] = da2 + 1j * db2
        return out


# -- disks ------------------------------------------------------------------

@dataclass
class DiskMap:
    """Solved disk: Taylor coefficients of F, boundary curve coefficients and solver record."""

    coeffs: np.ndarray                  # (M, n) complex, a_k for k < M
    ucoef: np.ndarray                   # (2K, n) real: cos then sin half-integer modes
    z: np.ndarray                       # pinned value F(0)
    t: float = 0.0
    K: int = 16
    residual_history: list = field(default_factory=list)
    dcoeffs: np.ndarray | None = None   # (M, n, 2p) derivatives along moduli coordinates
    normalization: str = "F(0) = z"

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    def F(self, w) -> np.ndarray:
        w = np.atleast_1d(np.asarray(w, dtype=complex))
        V = w[:, None] ** np.arange(len(self.coeffs))[None, :]
        return V @ self.coeffs

    def dF(self, w) -> np.ndarray:
        w = np.atleast_1d(np.asarray(w, dtype=complex))
        k = np.arange(len(self.coeffs))
        V = k[None, 1:] * w[:, None] ** (k[None, 1:] - 1)
        return V @ self.coeffs[1:]

    def Fs(self, w) -> np.ndarray:
        """dF/dx at w, shape (len(w), n, 2p)."""
        if self.dcoeffs is None:
            raise ValueError("disk carries no moduli derivatives")
        w = np.atleast_1d(np.asarray(w, dtype=complex))
        V = w[:, None] ** np.arange(len(self.dcoeffs))[None, :]
        return np.einsum("wk,kns->wns", V, self.dcoeffs)

    def u(self, theta) -> np.ndarray:
        theta = np.atleast_1d(theta)
        K = self.ucoef.shape[0] // 2
        k = np.arange(K) + 0.5
        C, S = np.cos(np.outer(theta, k)), np.sin(np.outer(theta, k))
        return C @ self.ucoef[:K] + S @ self.ucoef[K:]

    def conjugate(self) -> "DiskMap":
        """The disk w -> conj(F(conj w)), which is the solved disk of conj(z) for a real-symmetric slice."""
        K = self.ucoef.shape[0] // 2
        uc = self.ucoef.copy()
        uc[K:] *= -1
        return DiskMap(self.coeffs.conj(), uc, self.z.conj(), self.t, self.K,
                       list(self.residual_history), None if self.dcoeffs is None else self.dcoeffs.conj())

    def to_json(self) -> dict:
        return {
            "coeffs_re": self.coeffs.real.tolist(), "coeffs_im": self.coeffs.imag.tolist(),
            "ucoef": self.ucoef.tolist(), "z_re": self.z.real.tolist(), "z_im": self.z.imag.tolist(),
            "t": self.t, "K": self.K, "residual_history": list(self.residual_history),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DiskMap":
        return cls(np.array(d["coeffs_re"]) + 1j * np.array(d["coeffs_im"]), np.array(d["ucoef"]),
                   np.array(d["z_re"]) + 1j * np.array(d["z_im"]), d["t"], d["K"], d["residual_history"])


@dataclass
class ModuliPoint:
    z: np.ndarray
    disk: DiskMap | None = None
    x: np.ndarray | None = None


def _check_quadric_point(z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    scale = np.vdot(z, z).real
    if abs(quadric(z)) > 1e-10 * scale:
        raise ValueError("z is not on the quadric")
    if np.linalg.matrix_rank(np.array([z, z.conj()]), tol=1e-10 * math.sqrt(scale)) < 2:
        raise ValueError("z is real: the line through z and its conjugate degenerates")
    return z


def standard_disk(z, K: int = 16) -> DiskMap:
    """F(w) = z + conj(z) w; its boundary is the real 2-plane spanned by Re z, Im z."""
    z = _check_quadric_point(z)
    n = len(z)
    M = 2 * K
    coeffs = np.zeros((M, n), dtype=complex)
    coeffs[0], coeffs[1] = z, z.conj()
    ucoef = np.zeros((2 * K, n))
    ucoef[0] = 2 * z.real
    ucoef[K] = 2 * z.imag
    return DiskMap(coeffs, ucoef, z, 0.0, K)


class _Spectral:
    def __init__(self, K: int, oversample: int = 4):
        self.K = K
        self.N = oversample * K
        self.theta = 2 * np.pi * np.arange(self.N) / self.N
        k = np.arange(K) + 0.5
        self.C = np.cos(np.outer(self.theta, k))
        self.S = np.sin(np.outer(self.theta, k))
        self.phase = np.exp(0.5j * self.theta)
        # FFT rows: mode 0 last so that the pinned block is easy to locate
        self.rows = np.array([self.N - m for m in range(1, K)] + [0])

    def u(self, U):
        K = self.K
        return self.C @ U[:K] + self.S @ U[K:]


def _residual(P: RealSliceEmbedding, sp: _Spectral, U: np.ndarray, z: np.ndarray):
    u = sp.u(U)
    psi, D = P.psi(u)
    G = sp.phase[:, None] * psi
    Gh = np.fft.fft(G, axis=0) / sp.N
    R = Gh[sp.rows].copy()
    R[-1] -= z
    return R, Gh, D


def _jacobian(sp: _Spectral, D: np.ndarray) -> np.ndarray:
    # d G(theta_j) / d U[k, c] = phase_j D_j[:, c] basis_k(theta_j)
    PD = sp.phase[:, None, None] * D                       # (N, n, n)
    blocks = []
    for B in (sp.C, sp.S):
        T = PD[:, None, :, :] * B[:, :, None, None]           # (N, K, n_i, n_c)
        Th = np.fft.fft(T, axis=0)[sp.rows] / sp.N            # (modes, K, n_i, n_c)
        blocks.append(Th)
    Th = np.concatenate(blocks, axis=1)                       # (modes, 2K, n_i, n_c)
    modes, twoK, n, _ = Th.shape
    Jc = Th.transpose(0, 2, 1, 3).reshape(modes * n, twoK * n)
    return np.vstack([Jc.real, Jc.imag])


def _stack(R: np.ndarray) -> np.ndarray:
    return np.concatenate([R.real.ravel(), R.imag.ravel()])


def solve_disk(P: RealSliceEmbedding, seed: DiskMap, z=None, tol: float = 1e-13,
               max_iter: int = 12, oversample: int = 4, want_derivatives: bool = False,
               dz: np.ndarray | None = None) -> DiskMap:
    """Newton solve for the disk pinned at F(0) = z, starting from ``seed``."""
    z = seed.z if z is None else np.asarray(z, dtype=complex)
    K = seed.ucoef.shape[0] // 2
    sp = _Spectral(K, oversample)
    U = seed.ucoef.copy()
    history = []
    J = None
    for it in range(max_iter + 1):
        R, Gh, D = _residual(P, sp, U, z)
        r = float(np.max(np.abs(R)))
        history.append(r)
        if r < tol or (it >= 2 and r > 0.5 * history[-2] and r < 1e-11):
            break
        if it == max_iter:
            raise ContinuationError(f"Newton did not converge (residual {r:.2e} after {it} steps)")
        if it >= 1 and r > 10 * history[0] and r > 1e-6:
            raise ContinuationError(f"Newton diverged (residual {r:.2e}); reduce the continuation step")
        J = _jacobian(sp, D)
        cond = np.linalg.cond(J)
        if cond > 1e12:
            raise JacobianSingularError(f"disk Jacobian is singular (cond {cond:.2e})")
        U = U - np.linalg.solve(J, _stack(R)).reshape(U.shape)
    M = sp.N // 2
    disk = DiskMap(Gh[:M].copy(), U, z, P.t, K, history)
    if want_derivatives:
        if dz is None:
            raise ValueError("moduli derivatives need dz")
        J = _jacobian(sp, D)
        # R_0 = G_0 - z  =>  dU/ds = J^{-1} [0; dz/ds]
        ns = dz.shape[1]
        rhs = np.zeros((2 * K * P.n, ns))
        modes = K
        for s in range(ns):
            Rs = np.zeros((modes, P.n), dtype=complex)
            Rs[-1] = dz[:, s]
            rhs[:, s] = _stack(Rs)
        dU = np.linalg.solve(J, rhs).reshape(2 * K, P.n, ns)
        du = np.einsum("jk,kcs->jcs", sp.C, dU[:K]) + np.einsum("jk,kcs->jcs", sp.S, dU[K:])
        dG = sp.phase[:, None, None] * np.einsum("jic,jcs->jis", D, du)
        disk.dcoeffs = (np.fft.fft(dG, axis=0) / sp.N)[:M]
    return disk


def boundary_residual(P: RealSliceEmbedding, disk: DiskMap, n_fine: int = 512) -> float:
    theta = 2 * np.pi * np.arange(n_fine) / n_fine
    psi, _ = P.psi(disk.u(theta))
    G = np.exp(0.5j * theta)[:, None] * psi
    return float(np.max(np.abs(disk.F(np.exp(1j * theta)) - G)))


def winding_number(values: np.ndarray) -> int:
    """Winding of a closed sampled curve in C* about 0."""
    ang = np.unwrap(np.angle(np.append(values, values[:1])))
    return int(round((ang[-1] - ang[0]) / (2 * np.pi)))


def quadric_intersections(disk: DiskMap, n_fine: int = 512) -> int:
    """Number of zeros of q(F(w)) in the open disk (argument principle on |w| = 1)."""
    w = np.exp(2j * np.pi * np.arange(n_fine) / n_fine)
    return winding_number(quadric(disk.F(w)))


def continue_disk(P: RealSliceEmbedding, z, step: float = 0.002, K: int = 16,
                  seed: DiskMap | None = None) -> DiskMap:
    """Continuation in t from the standard disk (or ``seed`` at t = seed.t) up to P.t."""
    disk = seed if seed is not None else standard_disk(z, K)
    t0 = disk.t
    n_steps = max(1, int(math.ceil(abs(P.t - t0) / step - 1e-12)))
    for k in range(1, n_steps + 1):
        t = t0 + (P.t - t0) * k / n_steps
        disk = solve_disk(P.at(t), disk, z)
    return disk


class DiskFamily:
    """Solved disks over a moduli chart, with caching and warm starts."""

    def __init__(self, P: RealSliceEmbedding, K: int = 16, step: float = 0.002, seed_radius: float = 0.05):
        self.P = P
        self.chart = ModuliChart(P.p)
        self.K = K
        self.step = step
        self.seed_radius = seed_radius
        self._cache: dict[bytes, DiskMap] = {}
        self._xs: list[np.ndarray] = []
        self.solves = 0

    def solve(self, x, derivatives: bool = True) -> DiskMap:
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        hit = self._cache.get(key)
        if hit is not None and (hit.dcoeffs is not None or not derivatives):
            return hit
        z = self.chart.z(x)
        seed = None
        if self._xs:
            d = [np.linalg.norm(x - y) for y in self._xs]
            i = int(np.argmin(d))
            if d[i] < self.seed_radius:
                seed = self._cache[self._xs[i].tobytes()]
        if seed is None:
            seed = continue_disk(self.P, z, self.step, self.K) if self.P.t != 0 else standard_disk(z, self.K)
        disk = solve_disk(self.P, seed, z, want_derivatives=derivatives, dz=self.chart.dz(x))
        self.solves += 1
        if len(self._cache) > 4096:
            self._cache.clear()
            self._xs.clear()
        if key not in self._cache:
            self._xs.append(x.copy())
        self._cache[key] = disk
        return disk


def save_disks(path, disks: Sequence[DiskMap], meta: dict | None = None) -> None:
    payload = {"meta": meta or {}, "disks": [d.to_json() for d in disks]}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_disks(path) -> list[DiskMap]:
    return [DiskMap.from_json(d) for d in json.loads(Path(path).read_text())["disks"]]


# -- Maslov and Chern data ----------------------------------------------------

@dataclass
class MaslovData:
    total: int
    tangent: int
    normal: int


def maslov_index(P: RealSliceEmbedding, disk: DiskMap, n_fine: int = 512) -> MaslovData:
    """Maslov indices of the boundary loop of totally real tangent spaces.

    The disk sits in the affine chart ``{ell = 1}`` with ``ell(v) = <z, v>``,
    which trivializes T CP^{p+1} over it.  The total index is the winding of
    det(B)^2/|det B|^2 for any real basis B of T P along the boundary; the
    tangent part uses the boundary velocity relative to F'.
    """
    theta = 2 * np.pi * np.arange(n_fine) / n_fine
    w = np.exp(1j * theta)
    ell = disk.z.conj()
    G, dG = disk.F(w), disk.dF(w)
    if winding_number(G @ ell) != 0:
        raise DegenerateCurveError("affine chart does not contain the disk")
    B0 = null_space(ell[None, :])
    psi, D = P.psi(disk.u(theta))
    dets = np.empty(n_fine, dtype=complex)
    tang = np.empty(n_fine, dtype=complex)
    for k in range(n_fine):
        T = null_space(disk.u(theta[k])[0][None, :])
        X = np.exp(0.5j * theta[k]) * (D[k] @ T)
        C = B0.conj().T @ _chart_tangent(X, G[k], ell)
        dets[k] = np.linalg.det(C)
        ref = B0.conj().T @ _chart_tangent(dG[k][:, None], G[k], ell)[:, 0]
        vel = B0.conj().T @ _chart_tangent((1j * w[k] * dG[k])[:, None], G[k], ell)[:, 0]
        tang[k] = np.vdot(ref, vel) / np.vdot(ref, ref)
    total = winding_number(dets ** 2)
    tangent = winding_number(tang ** 2)
    return MaslovData(total, tangent, total - tangent)


def chern_on_fiber(m: MaslovData | None) -> dict:
    """c1 of the distribution, of its vertical (0,1) part and of the quotient on one fibre.

    Doubling the disk along its boundary turns Maslov indices into degrees:
    c1(D) = -(kappa + mu_T), c1(V^{0,1}) = -mu_T.
    """
    if m is None:
        raise ValueError("incomplete fibre data: no Maslov indices")
    c1_D = -(m.normal + m.tangent)
    c1_V = -m.tangent
    return {"c1_D": c1_D, "c1_V01": c1_V, "c1_quotient": c1_D - c1_V}


# -- fibre curves in the Grassmannian ---------------------------------------

def cayley_w(zeta):
    """Disk coordinate of the fibre parameter: zeta = i maps to the centre."""
    zeta = np.asarray(zeta, dtype=complex)
    return (1j - zeta) / (1j + zeta)


def cayley_zeta(w):
    w = np.asarray(w, dtype=complex)
    return 1j * (1 - w) / (1 + w)


def fibre_plane(disk: DiskMap, w: complex) -> np.ndarray:
    """Orthonormal basis (2p, p) of {c : F_x(w) c in span(F(w), F'(w))}."""
    Js = disk.Fs(w)[0]
    A = np.hstack([Js, disk.F(w).T, disk.dF(w).T])
    K = null_space(A)
    p = Js.shape[1] // 2
    if K.shape[1] != p:
        raise DegenerateCurveError(f"fibre plane has dimension {K.shape[1]}, expected {p}")
    Q, _ = np.linalg.qr(K[: 2 * p])
    return Q


def plucker(C: np.ndarray) -> np.ndarray:
    n, p = C.shape
    return np.array([np.linalg.det(C[list(r)]) for r in itertools.combinations(range(n), p)])


@dataclass
class FiberCurve:
    ws: np.ndarray
    planes: np.ndarray
    plucker: np.ndarray
    degree_residual: dict
    dbar_residual: float


def _degree_fit(ws, Pl, d) -> float:
    """Relative smallest singular value of the fit P(w) ~ polynomial of degree d."""
    m = Pl.shape[1]
    rows = []
    for w, v in zip(ws, Pl):
        v = v / np.linalg.norm(v)
        Pi = np.eye(m) - np.outer(v, v.conj())
        mon = w ** np.arange(d + 1)
        rows.append(np.kron(Pi, mon[None, :]))
    s = np.linalg.svd(np.vstack(rows), compute_uv=False)
    return float(s[-1] / s[0])


def fiber_curve(disk: DiskMap, ws=None, h: float = 1e-3) -> FiberCurve:
    """Sample w -> fibre plane, its Pluecker image, degree fits and the dbar defect."""
    p = disk.dcoeffs.shape[2] // 2
    if ws is None:
        ws = 0.7 * np.exp(2j * np.pi * (np.arange(3 * p + 6) + 0.3) / (3 * p + 6))
        ws = np.concatenate([ws, 0.3 * ws[: p + 2] * 1j])
    ws = np.asarray(ws, dtype=complex)
    planes = np.array([fibre_plane(disk, w) for w in ws])
    Pl = np.array([plucker(C) for C in planes])
    ref = int(np.argmax(np.abs(Pl[0])))

    def affine(w):
        v = plucker(fibre_plane(disk, w))
        return v / v[ref]

    def wirtinger(w, hh):
        du = (affine(w + hh) - affine(w - hh)) / (2 * hh)
        dv = (affine(w + 1j * hh) - affine(w - 1j * hh)) / (2 * hh)
        return 0.5 * (du + 1j * dv)

    dbar = 0.0
    for w in ws[:4]:
        d = (4 * wirtinger(w, h / 2) - wirtinger(w, h)) / 3
        dbar = max(dbar, float(np.max(np.abs(d))))
    degs = {d: _degree_fit(ws, Pl, d) for d in range(max(0, p - 1), p + 1)}
    return FiberCurve(ws, planes, Pl, degs, dbar)


@dataclass
class Factorization:
    a: np.ndarray           # (2p, p) real, spans the plane at zeta = 0
    b: np.ndarray           # (2p, p) real, spans the plane at zeta = infinity, b_j = M a_j
    imag_defect: float
    reprojection: float


def factorization_from_curve(planes: dict, references: np.ndarray, check=()) -> Factorization:
    """Write the fibre curve as zeta -> span{a_j + zeta b_j}.

    ``planes`` maps zeta in {0, inf, 1} (and optionally further values used as
    a check) to (2p, p) bases.  ``a_j`` is the projection of ``references[:, j]``
    onto the zeta = 0 plane along the zeta = infinity plane.
    """
    Va, Vb, V1 = planes[0], planes["inf"], planes[1]
    n, p = Va.shape
    ang = subspace_angles(Va, Vb)
    if np.min(ang) < 1e-8:
        onb = [np.linalg.qr(Q)[0] for Q in planes.values()]
        stack = np.vstack([np.eye(n) - Q @ Q.conj().T for Q in onb])
        common = null_space(stack, rcond=1e-6)
        raise DegenerateCurveError("fibre planes at zeta = 0 and zeta = infinity intersect", common)
    AB = np.hstack([Va, Vb])
    coef = np.linalg.solve(AB, references.astype(complex))
    a = Va @ coef[:p]
    c1 = np.linalg.solve(AB, V1)
    M = (Vb @ c1[p:]) @ np.linalg.pinv(Va @ c1[:p])
    b = M @ a
    imag = float(max(np.max(np.abs(a.imag)), np.max(np.abs(b.imag))))
    rep = 0.0
    for zeta in check:
        if zeta in (0, 1, "inf"):
            continue
        rep = max(rep, float(np.max(subspace_angles(planes[zeta], a + zeta * b))))
    return Factorization(a.real, b.real, imag, rep)


# -- reconstruction -------------------------------------------------------------

class RecoveredStructure:
    """Frames of the AG structure read off from the disk family on a moduli chart."""

    def __init__(self, family: DiskFamily, base=None):
        self.family = family
        self.p = family.P.p
        self.base = np.zeros(2 * self.p) if base is None else np.asarray(base, dtype=float)
        self._ref = None
        self.imag_defect = 0.0

    def planes(self, x, extra=()) -> dict:
        disk = self.family.solve(x)
        out = {0: fibre_plane(disk, cayley_w(0.0)[()]), "inf": fibre_plane(disk, -1.0 + 0j),
               1: fibre_plane(disk, cayley_w(1.0)[()])}
        for z in extra:
            out[z] = fibre_plane(disk, cayley_w(z)[()])
        return out

    def factorization(self, x, extra=()) -> Factorization:
        if self._ref is None:
            Va = self.planes(self.base)[0]
            # real basis of the base plane: it is the complexification of a real plane
            R = np.hstack([Va.real, Va.imag])
            U, s, _ = np.linalg.svd(R)
            self._ref = U[:, : self.p]
        fac = factorization_from_curve(self.planes(x, extra), self._ref, extra)
        self.imag_defect = max(self.imag_defect, fac.imag_defect)
        return fac

    def frames(self, x) -> np.ndarray:
        """Columns ordered by flat index A*2 + A': a_j for A' = 0, b_j for A' = 1."""
        fac = self.factorization(x)
        p = self.p
        E = np.empty((2 * p, 2 * p))
        E[:, 0::2] = fac.a
        E[:, 1::2] = fac.b
        return E

    def sigma(self, x) -> np.ndarray:
        return np.linalg.inv(self.frames(x))


def recover_ag(P: RealSliceEmbedding, half_width: float = 0.3, K: int = 16, h: float = 1e-3,
               family: DiskFamily | None = None):
    """AG structure on the moduli chart whose alpha-planes are the fibre curves of the disks."""
    from .ag_chart import AGStructure, ChartField, constant_field

    fam = family or DiskFamily(P, K)
    rec = RecoveredStructure(fam)
    n = 2 * P.p
    sig = ChartField(rec.sigma, n, h=h)
    ag = AGStructure(P.p, 2, sig, constant_field(np.array(1.0), n), constant_field(np.array(1.0), n),
                     -half_width * np.ones(n), half_width * np.ones(n), name=f"recovered(t={P.t})")
    return ag.with_canonical(), rec


def grassmannian_alpha_plane(chart: ModuliChart, x, w: complex) -> np.ndarray:
    """Tangent directions at x that keep the point F(w) = z + conj(z) w on the moving 2-plane.

    Closed form for the undeformed embedding, where the disk of x is the complex line of z.
    """
    z = chart.z(x)
    dz = chart.dz(x)
    perp = null_space(np.array([z.real, z.imag]))
    return null_space(perp.T @ ((1 + w) * dz.real + 1j * (1 - w) * dz.imag))
