import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agtwistor.spinor_core import (
    IndexSignature,
    SignatureError,
    SpinorTensor,
    all_traces,
    antisymmetrize,
    delta,
    outer,
    symmetrize,
    torsion_signature,
    trace,
    trace_free_part,
    wedge_decompose_torsion,
)


def rand_tensor(spec, p, q=2, seed=0):
    rng = np.random.default_rng(seed)
    sig = IndexSignature.parse(spec, p, q)
    vals = rng.normal(size=sig.shape) + 1j * rng.normal(size=sig.shape)
    return SpinorTensor(sig, vals)


def test_symmetrize_idempotent_on_symmetric():
    t = rand_tensor("aa", 3)
    s = symmetrize(t, (0, 1))
    np.testing.assert_allclose(symmetrize(s, (0, 1)).values, s.values, atol=1e-14)


def test_symmetrize_kills_antisymmetric():
    t = rand_tensor("aa", 3)
    a = antisymmetrize(t, (0, 1))
    assert symmetrize(a, (0, 1)).norm() < 1e-14
    assert antisymmetrize(symmetrize(t, (0, 1)), (0, 1)).norm() < 1e-14


def test_antisymmetrize_idempotent():
    t = rand_tensor("aaa", 3)
    a = antisymmetrize(t, (0, 1, 2))
    np.testing.assert_allclose(antisymmetrize(a, (0, 1, 2)).values, a.values, atol=1e-14)


def _explicit_perm_average(v, signed):
    out = np.zeros_like(v)
    for perm in itertools.permutations(range(3)):
        sign = np.linalg.det(np.eye(3)[list(perm)]) if signed else 1.0
        for idx in np.ndindex(v.shape):
            out[idx] += sign * v[tuple(idx[k] for k in perm)]
    return out / 6


@pytest.mark.parametrize("signed", [False, True])
def test_three_slot_permutation_oracle(signed):
    t = rand_tensor("aaa", 3, seed=4)
    got = (antisymmetrize if signed else symmetrize)(t, (0, 1, 2)).values
    np.testing.assert_allclose(got, _explicit_perm_average(t.values, signed), atol=1e-13)


def test_sym_plus_antisym_is_identity():
    t = rand_tensor("apap", 3, seed=2)
    total = symmetrize(t, (0, 2)) + antisymmetrize(t, (0, 2))
    np.testing.assert_allclose(total.values, t.values, atol=1e-14)


def test_mismatched_slots_raise():
    t = rand_tensor("ap", 3)
    with pytest.raises(SignatureError):
        symmetrize(t, (0, 1))
    with pytest.raises(SignatureError):
        trace(rand_tensor("aP", 3), 1, 0)


def test_trace_of_deltas():
    assert trace(delta("unprimed", 3), 1, 0).values == pytest.approx(3)
    assert trace(delta("primed", 2), 1, 0).values == pytest.approx(2)


def test_trace_of_outer_product_is_dot():
    rng = np.random.default_rng(1)
    u = SpinorTensor(IndexSignature.parse("A", 4), rng.normal(size=4))
    v = SpinorTensor(IndexSignature.parse("a", 4), rng.normal(size=4))
    tr = trace(outer(u, v), 0, 1)
    assert tr.values == pytest.approx(np.sum(u.values * v.values))


def test_trace_free_of_pure_trace_is_zero():
    lam = rand_tensor("p", 3).values
    sig = IndexSignature.parse("aAp", 3)
    vals = np.einsum("ab,c->abc", np.eye(3), lam)
    assert trace_free_part(SpinorTensor(sig, vals)).norm() < 1e-13


def test_trace_free_unchanged_when_already_trace_free():
    t = trace_free_part(rand_tensor("aaA", 3, seed=7))
    np.testing.assert_allclose(trace_free_part(t).values, t.values, atol=1e-13)


def test_trace_free_linear_solve_oracle():
    # T_{AB}^C, p = 3: remove delta_A^C x_B + delta_B^C y_A
    t = rand_tensor("aaA", 3, seed=11)
    tf = trace_free_part(t)
    for tr in all_traces(tf):
        assert tr.norm() < 1e-12
    diff = t.values - tf.values
    # independent solve for x, y from the two trace equations
    n = 3
    rows, rhs = [], []
    basis = []
    for which in range(2):
        for k in range(n):
            lam = np.zeros(n)
            lam[k] = 1
            if which == 0:
                basis.append(np.einsum("ac,b->abc", np.eye(n), lam))
            else:
                basis.append(np.einsum("bc,a->abc", np.eye(n), lam))
    mat = np.array([b.ravel() for b in basis]).T
    coef, *_ = np.linalg.lstsq(mat, diff.ravel(), rcond=None)
    np.testing.assert_allclose(mat @ coef, diff.ravel(), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["aA", "aAp", "apAP", "aaA", "pPa"]))
def test_trace_of_trace_free_vanishes(seed, spec):
    t = rand_tensor(spec, 3, seed=seed)
    tf = trace_free_part(t)
    scale = max(1.0, t.norm())
    for tr in all_traces(tf):
        assert tr.norm() < 1e-12 * scale


def _antisym_torsion(p, seed=0):
    t = rand_tensor("apapAP", p, seed=seed)
    return 0.5 * (t.values - np.transpose(t.values, (2, 3, 0, 1, 4, 5)))


def test_wedge_decompose_pure_types():
    p = 3
    rng = np.random.default_rng(3)
    s = rng.normal(size=(p, p))
    k = rng.normal(size=(2, 2))
    w = rng.normal(size=(p, 2))
    sig = torsion_signature(p)
    skew_s, sym_s = s - s.T, s + s.T
    skew_k, sym_k = k - k.T, k + k.T
    t1 = SpinorTensor(sig, np.einsum("ab,xy,cz->axbycz", skew_s, sym_k, w))
    f, ft = wedge_decompose_torsion(t1)
    assert f.norm() < 1e-13
    np.testing.assert_allclose(ft.values, t1.values, atol=1e-13)
    t2 = SpinorTensor(sig, np.einsum("ab,xy,cz->axbycz", sym_s, skew_k, w))
    f, ft = wedge_decompose_torsion(t2)
    assert ft.norm() < 1e-13
    np.testing.assert_allclose(f.values, t2.values, atol=1e-13)


def test_wedge_decompose_projector_oracle():
    p = 3
    v = _antisym_torsion(p, seed=5)
    f, ft = wedge_decompose_torsion(SpinorTensor(torsion_signature(p), v))
    f_ref = 0.25 * (v + np.transpose(v, (2, 1, 0, 3, 4, 5))
                    - np.transpose(v, (0, 3, 2, 1, 4, 5)) - np.transpose(v, (2, 3, 0, 1, 4, 5)))
    np.testing.assert_allclose(f.values, f_ref, atol=1e-13)
    np.testing.assert_allclose(f.values + ft.values, v, atol=1e-13)
    # each piece is annihilated by the opposite projector
    assert antisymmetrize(f, (0, 2)).norm() < 1e-13
    assert symmetrize(ft, (0, 2)).norm() < 1e-13
    # F is skew in the primed pair, F~ symmetric
    assert np.max(np.abs(f.values + np.transpose(f.values, (0, 3, 2, 1, 4, 5)))) < 1e-13


def test_f_part_is_proportional_to_primed_epsilon():
    p = 3
    v = _antisym_torsion(p, seed=9)
    f, _ = wedge_decompose_torsion(SpinorTensor(torsion_signature(p), v))
    g = f.values[:, 0, :, 1]
    np.testing.assert_allclose(f.values[:, 1, :, 0], -g, atol=1e-13)
    assert np.max(np.abs(f.values[:, 0, :, 0])) < 1e-13
    assert np.max(np.abs(f.values[:, 1, :, 1])) < 1e-13


def test_non_antisymmetric_torsion_rejected():
    t = rand_tensor("apapAP", 3)
    with pytest.raises(ValueError):
        wedge_decompose_torsion(t)


def test_real_flag_checked():
    sig = IndexSignature.parse("a", 2)
    with pytest.raises(ValueError):
        SpinorTensor(sig, np.array([1.0, 1j]), is_real=True)
