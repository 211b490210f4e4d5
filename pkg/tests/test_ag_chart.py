import numpy as np
import pytest

from agtwistor.ag_chart import (
    ChartDomainError,
    ChartField,
    DegenerateStructureError,
    NotSupportedError,
    canonical_connections,
    canonical_system_condition,
    chart_grid,
    constant_field,
    contorsion,
    deform,
    flat_model,
    flat_plane,
    linearized_rightflat_residual,
    right_flat_residual,
    skew_derivative,
    torsion,
    torsion_array,
    torsion_report,
    trace_free_pieces,
)
from agtwistor.spinor_core import (
    SpinorTensor,
    _trace_vec,
    contractible_pairs,
    torsion_signature,
    trace_free_part,
)


def planted(p, kind, seed=1):
    """Constant torsion-shaped K of F or F~ type, antisymmetric in (a, b)."""
    q = 2
    n = p * q
    K = np.random.default_rng(seed).normal(size=(p, q, p, q, p, q))
    K = K - K.transpose(2, 3, 0, 1, 4, 5)
    f = 0.5 * (K + K.transpose(2, 1, 0, 3, 4, 5))
    return (f if kind == "F" else K - f).reshape(n, n, n)


def linear_phi(K):
    n = K.shape[0]
    return ChartField(lambda x: np.einsum("a,abc->bc", x, K), n)


def test_chartfield_derivative_order():
    f = ChartField(lambda x: np.array([x[0] ** 5 + x[1] ** 3]), 2, h=0.1, order=4)
    f2 = ChartField(f.evaluator, 2, h=0.1, order=2)
    x = np.array([0.3, -0.2])
    exact = 5 * 0.3 ** 4
    errs4, errs2 = [], []
    for h in (0.1, 0.05, 0.025):
        errs4.append(abs(ChartField(f.evaluator, 2, h, 4).derivative(x, 0)[0] - exact))
        errs2.append(abs(ChartField(f.evaluator, 2, h, 2).derivative(x, 0)[0] - exact))
    assert np.log2(errs4[0] / errs4[1]) == pytest.approx(4, abs=0.2)
    assert np.log2(errs2[1] / errs2[2]) == pytest.approx(2, abs=0.2)
    assert f2.order == 2


def test_chartfield_deterministic():
    f = ChartField(lambda x: np.sin(x), 3)
    x = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(f.jacobian(x), f.jacobian(x))


@pytest.mark.parametrize("p", [2, 3, 4])
def test_canonical_system_full_rank(p):
    assert canonical_system_condition(p, 2) < 1e3


def test_flat_torsion_zero_on_grid():
    ag = flat_model(2, 2)
    for x in chart_grid(ag, per_axis=5):
        assert torsion(ag, x).norm() < 1e-10


def test_flat_connections_recomputed_are_zero():
    ag = flat_model(3)
    gu, gp = canonical_connections(ag.sigma, ag.scale, p=3)
    x = np.full(6, 0.1)
    assert np.max(np.abs(gu(x))) < 1e-12
    assert np.max(np.abs(gp(x))) < 1e-12


def test_flat_right_flat():
    ag = flat_model(3)
    assert right_flat_residual(ag, chart_grid(ag, per_axis=2)) < 1e-10


def test_right_flat_p2_not_supported():
    ag = flat_model(2)
    with pytest.raises(NotSupportedError):
        right_flat_residual(ag, chart_grid(ag, per_axis=2))


def test_flat_model_bad_rank():
    with pytest.raises(ValueError):
        flat_model(1, 2)


def test_alpha_plane_is_rowspan_family():
    # displacements mu^A pi^A' with pi = (1, 0) only move the first row of x,
    # so every plane on that alpha-surface contains the fixed vector (0, 1, 0, 0)
    p, q = 2, 2
    ag = flat_model(p, q)
    pi = np.array([1.0, 0.0])
    rng = np.random.default_rng(0)
    fixed = flat_plane(np.zeros(4), p, q)[1]
    for _ in range(5):
        mu = rng.normal(size=p)
        x = np.kron(mu, pi) * 0.3  # displacement mu^A pi^A'
        plane = flat_plane(x, p, q)
        coef, *_ = np.linalg.lstsq(plane.T, fixed, rcond=None)
        assert np.linalg.norm(plane.T @ coef - fixed) < 1e-12
        assert ag.check_point(x) is not None


def test_rescaled_connection_matches_linear_solve():
    ag = flat_model(2)
    f = ChartField(lambda x: np.exp(x[0]), 4)
    gu, gp = canonical_connections(ag.sigma, f, p=2)
    # independent oracle: with zero brackets the system reduces to
    # traces of (Gamma_ba - Gamma_ab) pieces vanishing and tr Gamma_a = d_a log f;
    # solve that system directly by normal equations.
    p, q, n = 2, 2, 4
    rng = np.random.default_rng(3)
    for x in rng.uniform(-0.3, 0.3, size=(10, 4)):
        dlog = np.zeros(n)
        dlog[0] = 1.0
        pairs = contractible_pairs(torsion_signature(p, q))
        nu = n * p * p
        mat = []
        for k in range(nu + n * q * q):
            g = np.zeros(nu + n * q * q)
            g[k] = 1
            u = g[:nu].reshape(n, p, p)
            v = g[nu:].reshape(n, q, q)
            G = (np.einsum("aCB,XY->aBXCY", u, np.eye(q))
                 + np.einsum("aYX,BC->aBXCY", v, np.eye(p))).reshape(n, n, n)
            T = (G.transpose(1, 0, 2) - G).reshape(p, q, p, q, p, q)
            fpart = 0.5 * (T + T.transpose(2, 1, 0, 3, 4, 5))
            mat.append(np.concatenate([_trace_vec(fpart, pairs), _trace_vec(T - fpart, pairs),
                                       np.einsum("aBB->a", u), np.einsum("aBB->a", v)]))
        mat = np.array(mat).T
        rhs = np.concatenate([np.zeros(mat.shape[0] - 2 * n), dlog, dlog])
        sol = np.linalg.solve(mat.T @ mat, mat.T @ rhs)
        np.testing.assert_allclose(gu(x).ravel(), sol[:nu], atol=1e-7)
        np.testing.assert_allclose(gp(x).ravel(), sol[nu:], atol=1e-7)


def test_rescaled_connection_preserves_volume_and_alpha():
    ag = flat_model(3).rescaled(ChartField(lambda x: np.exp(x[0] + 0.5 * x[3]), 6))
    x = np.full(6, 0.05)
    gu, gp = ag.connection(x)
    E = ag.frames(x)
    dlog = E.T @ (ag.scale.jacobian(x) / ag.scale(x))
    # nabla eps = 0 <=> E_a log s = tr Gamma_a
    np.testing.assert_allclose(np.einsum("aBB->a", gu), dlog, atol=1e-8)
    np.testing.assert_allclose(np.einsum("aBB->a", gp), dlog, atol=1e-8)


def test_perturbed_sigma_traces_vanish():
    p = 3
    ag = flat_model(p)
    rng = np.random.default_rng(5)
    L = rng.normal(size=(6, 6, 6)) * 0.5
    C = rng.normal(size=(6, 6))
    phi = ChartField(lambda x: C + np.einsum("k,kij->ij", x, L) + np.outer(x, x), 6)
    d = deform(ag, phi, 1e-2)
    rep = torsion_report(d, chart_grid(d, per_axis=2, cap=8))
    assert rep.trace_residual < 1e-8
    for T, f, ft in zip(rep.torsion, rep.f, rep.f_tilde):
        np.testing.assert_allclose((f + ft).reshape(T.shape), T, atol=1e-14)
        # q = 2: F vanishes once its traces do
        assert np.max(np.abs(f)) < 1e-8
        assert np.max(np.abs(T + T.transpose(1, 0, 2))) < 1e-10


def test_torsion_domain_error():
    ag = flat_model(2)
    with pytest.raises(ChartDomainError):
        torsion(ag, np.full(4, 0.5))
    with pytest.raises(ChartDomainError):
        torsion(ag, np.zeros(3))


def test_torsion_returns_spinor_tensor():
    t = torsion(flat_model(3), np.zeros(6))
    assert t.signature == torsion_signature(3)


def test_deform_t_zero_unchanged():
    ag = flat_model(3)
    assert deform(ag, linear_phi(planted(3, "Ft")), 0.0) is ag


def test_deform_singular_rejected():
    ag = flat_model(2)
    with pytest.raises(DegenerateStructureError):
        deform(ag, constant_field(-np.eye(4), 4), 1.0)


def test_pure_trace_deformation_torsion_second_order():
    ag = flat_model(3)
    phi = ChartField(lambda x: np.exp(x[0] - x[2]) * np.eye(6), 6)
    x = np.full(6, 0.1)
    # a conformal change of sigma stays torsion-free to all orders
    for t in (1e-2, 5e-3):
        assert np.max(np.abs(torsion_array(deform(ag, phi, t), x))) < 1e-12


def test_planted_torsion_recovered():
    # T-hat ~ -2t K with unit-weight antisymmetrization (see decisions ledger)
    p, t = 3, 1e-3
    K = planted(p, "Ft")
    d = deform(flat_model(p), linear_phi(K), t)
    x = np.full(6, 0.05)
    _, ft = trace_free_pieces(torsion_array(d, x), p, 2)
    _, kt = trace_free_pieces(K, p, 2)
    assert np.max(np.abs(ft + 2 * t * kt)) < 1e-5
    assert np.max(np.abs(ft + 2 * t * kt)) < 1e-2 * np.max(np.abs(ft))


def test_deformation_law_with_contorsion():
    ag = flat_model(3)
    rng = np.random.default_rng(0)
    C, L = rng.normal(size=(6, 6)), rng.normal(size=(6, 6, 6)) * 0.3
    phi = ChartField(lambda x: C + np.einsum("k,kij->ij", x, L), 6)
    x = rng.uniform(-0.2, 0.2, size=6)
    K = skew_derivative(ag, phi, x)
    rems = []
    for t in (1e-2, 5e-3):
        d = deform(ag, phi, t)
        Q = contorsion(d, x)
        lin = -2 * t * (K + 0.5 * (Q - Q.transpose(1, 0, 2)))
        rems.append(np.max(np.abs(torsion_array(d, x) - lin)))
    assert np.log2(rems[0] / rems[1]) == pytest.approx(2, abs=0.2)


def test_right_flat_residual_planted():
    p, t = 3, 1e-3
    K = planted(p, "Ft")
    ag = flat_model(p)
    d = deform(ag, linear_phi(K), t)
    grid = chart_grid(ag, per_axis=2, cap=10)
    planted_norm = 2 * t * np.max(np.abs(trace_free_pieces(K, p, 2)[1]))
    assert right_flat_residual(d, grid) == pytest.approx(planted_norm, rel=0.05)


def test_right_flat_residual_f_type_second_order():
    p, t = 3, 1e-5
    d = deform(flat_model(p), linear_phi(planted(p, "F")), t)
    assert right_flat_residual(d, chart_grid(d, per_axis=2, cap=10)) < 1e-8


def test_linearized_identity_and_pure_trace():
    ag = flat_model(3)
    grid = chart_grid(ag, per_axis=2, cap=5)
    assert linearized_rightflat_residual(ag, constant_field(np.eye(6), 6), grid) < 1e-12
    phi = ChartField(lambda x: np.cos(x[1]) * np.exp(x[4]) * np.eye(6), 6)
    assert linearized_rightflat_residual(ag, phi, grid) < 1e-9


def test_linearized_shape_mismatch():
    ag = flat_model(3)
    with pytest.raises(ValueError):
        linearized_rightflat_residual(ag, constant_field(np.eye(4), 6), chart_grid(ag, per_axis=2))


def test_linearized_compositional_oracle():
    p, n = 3, 6
    ag = flat_model(p)
    rng = np.random.default_rng(8)
    A, B = rng.normal(size=(n, n, n)), rng.normal(size=(n, n, n, n)) * 0.3

    def ev(x):
        return np.einsum("k,kij->ij", x, A) + np.einsum("k,l,klij->ij", x, x, B)

    phi = ChartField(ev, n)
    pts = rng.uniform(-0.3, 0.3, size=(10, n))
    got = linearized_rightflat_residual(ag, phi, pts, report=True)
    # oracle: exact derivative of the quadratic, projectors from spinor_core
    sig = torsion_signature(p)
    worst, worst_red = 0.0, 0.0
    for x in pts:
        D = A + np.einsum("l,klij->kij", x, B) + np.einsum("k,klij->lij", x, B)
        Kx = 0.5 * (D - D.transpose(1, 0, 2))
        K6 = SpinorTensor(sig, Kx.reshape(p, 2, p, 2, p, 2))
        f = 0.5 * (K6.values + K6.values.transpose(2, 1, 0, 3, 4, 5))
        tf_f = trace_free_part(K6.like(f)).values
        tf_ft = trace_free_part(K6.like(K6.values - f)).values
        worst = max(worst, np.max(np.abs(tf_f)), np.max(np.abs(tf_ft)))
        worst_red = max(worst_red, np.max(np.abs(tf_ft)))
    assert got.full == pytest.approx(worst, abs=1e-8)
    assert got.reduced == pytest.approx(worst_red, abs=1e-8)


def test_chart_grid_cap_deterministic():
    ag = flat_model(4)
    g1 = chart_grid(ag, per_axis=5, cap=2000)
    g2 = chart_grid(ag, per_axis=5, cap=2000)
    assert g1.shape == (2000, 8)
    assert np.array_equal(g1, g2)
