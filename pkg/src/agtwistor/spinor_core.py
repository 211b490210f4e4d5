"""Dense spinor tensors and the index algebra used throughout the package.

Tensors are stored as dense complex numpy arrays, one axis per index slot.
Each slot carries a family (unprimed ``A`` or primed ``A'``), a position
(upper or lower) and a dimension.  The operations here are the ones the
almost-Grassmannian calculus needs: (anti)symmetrization over slot groups,
contraction of an upper/lower pair, the totally trace-free projection and
the splitting of a torsion tensor into its ``F`` and ``F~`` pieces.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

UNPRIMED = "unprimed"
PRIMED = "primed"
UPPER = "upper"
LOWER = "lower"

#: relative tolerance for exact algebraic identities
ALGEBRA_TOL = 1e-12
#: tolerance for anything that passes through finite differences
FD_TOL = 1e-6


class SignatureError(ValueError):
    """Slots passed to an operation do not have compatible family/position/dim."""


@dataclass(frozen=True)
class Slot:
    family: str
    position: str
    dim: int

    def __post_init__(self):
        if self.family not in (UNPRIMED, PRIMED):
            raise SignatureError(f"unknown family {self.family!r}")
        if self.position not in (UPPER, LOWER):
            raise SignatureError(f"unknown position {self.position!r}")
        if self.dim < 1:
            raise SignatureError("slot dimension must be positive")


@dataclass(frozen=True)
class IndexSignature:
    slots: tuple[Slot, ...]
    weight: int = 0

    def __post_init__(self):
        dims = {}
        for s in self.slots:
            if dims.setdefault(s.family, s.dim) != s.dim:
                raise SignatureError(f"{s.family} slots must share one dimension")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(s.dim for s in self.slots)

    def drop(self, *idx: int) -> "IndexSignature":
        keep = tuple(s for i, s in enumerate(self.slots) if i not in idx)
        return IndexSignature(keep, self.weight)

    @classmethod
    def parse(cls, spec: str, p: int, q: int = 2, weight: int = 0) -> "IndexSignature":
        """Build a signature from a compact string.

        Each token is one of ``A`` / ``a`` (unprimed upper / lower) and
        ``P`` / ``p`` (primed upper / lower).  ``"aPpA"`` therefore means
        ``T_A{}^{B'}{}_{C'}{}^D``.
        """
        table = {
            "A": (UNPRIMED, UPPER, p),
            "a": (UNPRIMED, LOWER, p),
            "P": (PRIMED, UPPER, q),
            "p": (PRIMED, LOWER, q),
        }
        try:
            slots = tuple(Slot(*table[c]) for c in spec)
        except KeyError as exc:
            raise SignatureError(f"bad signature token in {spec!r}") from exc
        return cls(slots, weight)


@dataclass
class SpinorTensor:
    signature: IndexSignature
    values: np.ndarray
    is_real: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != self.signature.shape:
            raise SignatureError(
                f"values shape {self.values.shape} does not match {self.signature.shape}"
            )
        if self.is_real:
            scale = max(1.0, float(np.max(np.abs(self.values), initial=0.0)))
            if np.max(np.abs(self.values.imag), initial=0.0) > 1e3 * np.finfo(float).eps * scale:
                raise ValueError("tensor flagged real has a non-negligible imaginary part")

    @property
    def rank(self) -> int:
        return len(self.signature.slots)

    def norm(self) -> float:
        """Sup norm over entries."""
        return float(np.max(np.abs(self.values), initial=0.0))

    def like(self, values: np.ndarray, signature: IndexSignature | None = None) -> "SpinorTensor":
        return SpinorTensor(signature or self.signature, values)

    def __add__(self, other: "SpinorTensor") -> "SpinorTensor":
        _check_same(self, other)
        return self.like(self.values + other.values)

    def __sub__(self, other: "SpinorTensor") -> "SpinorTensor":
        _check_same(self, other)
        return self.like(self.values - other.values)

    def __mul__(self, c) -> "SpinorTensor":
        return self.like(self.values * c)

    __rmul__ = __mul__


def _check_same(a: SpinorTensor, b: SpinorTensor) -> None:
    if a.signature.slots != b.signature.slots:
        raise SignatureError("signature mismatch")


def delta(family: str, dim: int) -> SpinorTensor:
    """Kronecker delta with signature (lower, upper)."""
    sig = IndexSignature((Slot(family, LOWER, dim), Slot(family, UPPER, dim)))
    return SpinorTensor(sig, np.eye(dim), is_real=True)


def _check_group(sig: IndexSignature, slots: Sequence[int]) -> None:
    if len(set(slots)) != len(slots):
        raise SignatureError("repeated slot")
    first = sig.slots[slots[0]]
    for i in slots[1:]:
        if sig.slots[i] != first:
            raise SignatureError("slots must share family, position and dimension")


def _perm_average(values: np.ndarray, slots: Sequence[int], signed: bool) -> np.ndarray:
    out = np.zeros_like(values)
    n = values.ndim
    for perm in itertools.permutations(range(len(slots))):
        axes = list(range(n))
        for k, j in enumerate(perm):
            axes[slots[k]] = slots[j]
        term = np.transpose(values, axes)
        if signed and _parity(perm):
            out -= term
        else:
            out += term
    return out / math.factorial(len(slots))


def _parity(perm: Sequence[int]) -> int:
    perm = list(perm)
    odd = 0
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            odd ^= 1
    return odd


def symmetrize(t: SpinorTensor, slots: Sequence[int]) -> SpinorTensor:
    """Project onto the part symmetric under permutations of ``slots``."""
    _check_group(t.signature, slots)
    return t.like(_perm_average(t.values, list(slots), signed=False))


def antisymmetrize(t: SpinorTensor, slots: Sequence[int]) -> SpinorTensor:
    """Project onto the part alternating under permutations of ``slots``."""
    _check_group(t.signature, slots)
    return t.like(_perm_average(t.values, list(slots), signed=True))


def trace(t: SpinorTensor, upper: int, lower: int) -> SpinorTensor:
    """Contract an upper slot with a lower slot of the same family."""
    su, sl = t.signature.slots[upper], t.signature.slots[lower]
    if su.family != sl.family or su.dim != sl.dim:
        raise SignatureError("trace needs slots of one family and dimension")
    if {su.position, sl.position} != {UPPER, LOWER}:
        raise SignatureError("trace needs one upper and one lower slot")
    vals = np.trace(t.values, axis1=upper, axis2=lower)
    return SpinorTensor(t.signature.drop(upper, lower), vals)


def contractible_pairs(sig: IndexSignature) -> list[tuple[int, int]]:
    """All (upper, lower) slot pairs that can be traced."""
    pairs = []
    for i, s in enumerate(sig.slots):
        if s.position != UPPER:
            continue
        for j, r in enumerate(sig.slots):
            if r.position == LOWER and r.family == s.family:
                pairs.append((i, j))
    return pairs


def all_traces(t: SpinorTensor) -> list[SpinorTensor]:
    return [trace(t, u, l) for u, l in contractible_pairs(t.signature)]


def _trace_vec(values: np.ndarray, pairs) -> np.ndarray:
    return np.concatenate([np.trace(values, axis1=u, axis2=l).ravel() for u, l in pairs])


def _delta_insert(lam: np.ndarray, shape: tuple[int, ...], u: int, l: int) -> np.ndarray:
    # delta_l^u (x) lam, with lam indexed by the remaining slots in order
    d = shape[u]
    rest = [k for k in range(len(shape)) if k not in (u, l)]
    full = np.einsum("ij,...->ij...", np.eye(d), lam)
    # full axes: (l, u, *rest) -> move into place
    order = [l, u] + rest
    return np.moveaxis(full, list(range(len(shape))), order)


@lru_cache(maxsize=32)
def _tf_solver(shape: tuple[int, ...], pairs: tuple[tuple[int, int], ...]):
    # Least-squares map from traces of t to delta-term coefficients.
    blocks = []
    sizes = []
    for u, l in pairs:
        rest = tuple(d for k, d in enumerate(shape) if k not in (u, l))
        sizes.append(rest)
        n = int(np.prod(rest)) if rest else 1
        cols = []
        for k in range(n):
            lam = np.zeros(n)
            lam[k] = 1.0
            cols.append(_trace_vec(_delta_insert(lam.reshape(rest), shape, u, l), pairs))
        blocks.append(np.array(cols).T)
    mat = np.hstack(blocks)
    pinv = np.linalg.pinv(mat, rcond=1e-12)
    return pinv, sizes


def pure_trace_part(values: np.ndarray, sig: IndexSignature) -> np.ndarray:
    pairs = tuple(contractible_pairs(sig))
    if not pairs:
        return np.zeros_like(values)
    shape = sig.shape
    pinv, sizes = _tf_solver(shape, pairs)
    coeffs = pinv @ _trace_vec(values, pairs)
    out = np.zeros(shape, dtype=complex)
    pos = 0
    for (u, l), rest in zip(pairs, sizes):
        n = int(np.prod(rest)) if rest else 1
        out += _delta_insert(coeffs[pos:pos + n].reshape(rest), shape, u, l)
        pos += n
    return out


def trace_free_part(t: SpinorTensor) -> SpinorTensor:
    """Remove every delta-term so that all traces vanish.

    The delta coefficients are found by a least-squares solve of the trace
    equations; this handles any mix of primed and unprimed slots.
    """
    return t.like(t.values - pure_trace_part(t.values, t.signature))


def torsion_signature(p: int, q: int = 2) -> IndexSignature:
    """Signature of T_{AA'BB'}{}^{CC'} with slot order (A, A', B, B', C, C')."""
    return IndexSignature.parse("apapAP", p, q)


def wedge_decompose_torsion(t: SpinorTensor, tol: float = 1e-10) -> tuple[SpinorTensor, SpinorTensor]:
    """Split a torsion-shaped tensor into F = F_{(AB)[A'B']} and F~ = F~_{[AB](A'B')}."""
    sig = t.signature
    if sig.slots != torsion_signature(sig.slots[0].dim, sig.slots[1].dim).slots:
        raise SignatureError("expected T_{AA'BB'}^{CC'} slot layout")
    v = t.values
    swapped = np.transpose(v, (2, 3, 0, 1, 4, 5))
    scale = max(1.0, float(np.max(np.abs(v), initial=0.0)))
    if np.max(np.abs(v + swapped), initial=0.0) > tol * scale:
        raise ValueError("torsion must be antisymmetric under (AA') <-> (BB')")
    f = symmetrize(t, (0, 2))
    f_tilde = antisymmetrize(t, (0, 2))
    return f, f_tilde


def outer(*ts: SpinorTensor) -> SpinorTensor:
    vals = ts[0].values
    slots = ts[0].signature.slots
    weight = ts[0].signature.weight
    for t in ts[1:]:
        vals = np.multiply.outer(vals, t.values)
        slots = slots + t.signature.slots
        weight += t.signature.weight
    return SpinorTensor(IndexSignature(slots, weight), vals)


def sup_norm(arrays: Iterable[np.ndarray]) -> float:
    return max((float(np.max(np.abs(a), initial=0.0)) for a in arrays), default=0.0)
