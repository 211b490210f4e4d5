import numpy as np
import pytest

from agtwistor.ag_chart import ChartField, deform, flat_model, flat_plane
from agtwistor.local_twistor import (
    AlphaFamily,
    CurveOnM,
    DegenerateTwistorError,
    LocalTwistor,
    NotFlatError,
    alpha_surface_from_parallel,
    flattening_map,
    gauge_matrix,
    holonomy_defect,
    log_gradient,
    refinement_order,
    rescale_twistor,
    schouten,
    segment,
    square_loop,
    tractor_connection,
    tractor_curvature,
    transport,
    ward_pair_check,
)


def wiggly(n):
    return ChartField(lambda x: np.exp(x[0] + x[1] * x[2]) / (1 + 0.3 * x[3] ** 2), n)


@pytest.fixture(scope="module")
def flat2():
    ag = flat_model(2)
    return ag, schouten(ag)


@pytest.fixture(scope="module")
def scaled2():
    ag = flat_model(2).rescaled(wiggly(4))
    return ag, schouten(ag)


def test_flat_schouten_zero(flat2):
    ag, pf = flat2
    assert np.max(np.abs(pf(np.full(4, 0.1)))) == 0
    assert pf.tensor(np.zeros(4)).signature.shape == (2, 2, 2, 2)


def test_exponential_rescale_schouten():
    ag = flat_model(3).rescaled(ChartField(lambda x: np.exp(x[0]), 6))
    pf = schouten(ag)
    x = np.array([0.1, -0.2, 0.05, 0.0, 0.1, 0.2])
    Y = np.zeros((3, 2))
    Y[0, 0] = 1.0
    expected = np.einsum("AY,BX->AXBY", Y, Y).reshape(6, 6)
    np.testing.assert_allclose(pf(x), expected, atol=1e-6)


def test_schouten_law_general_scale(scaled2):
    ag, pf = scaled2
    f = wiggly(4)
    x = np.array([0.1, 0.2, -0.1, 0.05])
    ups = ChartField(lambda y: log_gradient(f, y), 4)
    Y = ups(x).reshape(2, 2)
    dY = ups.jacobian(x)  # [a, b]; base connection vanishes
    expected = -dY + np.einsum("AY,BX->AXBY", Y, Y).reshape(4, 4)
    np.testing.assert_allclose(pf(x), expected, atol=1e-6)


def test_gauge_covariance(scaled2):
    ag, pf = scaled2
    x = np.array([0.1, 0.2, -0.1, 0.05])
    A0 = tractor_connection(flat_model(2), schouten(flat_model(2)), x)
    Gf = ChartField(lambda y: gauge_matrix(log_gradient(wiggly(4), y), 2, 2), 4)
    G, dG = Gf(x), Gf.jacobian(x)
    Gi = np.linalg.inv(G)
    expected = np.einsum("jk,akl,lm->ajm", G, A0, Gi) - dG @ Gi
    np.testing.assert_allclose(tractor_connection(ag, pf, x), expected, atol=1e-8)


def test_rescaled_flat_curvature_vanishes(scaled2):
    ag, pf = scaled2
    assert np.max(np.abs(tractor_curvature(ag, pf, np.array([0.05, -0.1, 0.1, 0.0])))) < 1e-8


def test_deformation_schouten_is_small():
    ag = flat_model(2)
    rng = np.random.default_rng(2)
    L = rng.normal(size=(4, 4, 4, 4))
    phi = ChartField(lambda x: np.einsum("k,l,klij->ij", x, x, L), 4)
    x = np.full(4, 0.1)
    sizes = [np.max(np.abs(schouten(deform(ag, phi, t))(x))) for t in (1e-2, 5e-3)]
    assert sizes[0] < 1.0
    assert sizes[0] / sizes[1] == pytest.approx(2, rel=0.05)


def test_zero_length_transport(flat2):
    ag, pf = flat2
    t0 = LocalTwistor([1.0, 2.0], [0.5, -1j])
    out = transport(ag, pf, segment(np.zeros(4), np.zeros(4)), t0)
    np.testing.assert_array_equal(out.vector, t0.vector)


def test_transport_linear(scaled2):
    ag, pf = scaled2
    t0 = LocalTwistor([1.0, 2.0], [0.5, -1j])
    c = segment(np.zeros(4), np.full(4, 0.1), steps=20)
    a = transport(ag, pf, c, t0)
    b = transport(ag, pf, c, 2 * t0)
    np.testing.assert_array_equal(b.vector, 2 * a.vector)
    z = transport(ag, pf, c, LocalTwistor(np.zeros(2), np.zeros(2)))
    assert np.all(z.vector == 0)


@pytest.mark.parametrize("p", [2, 3, 4])
def test_flat_loop_holonomy(p):
    ag = flat_model(p)
    pf = schouten(ag)
    assert holonomy_defect(ag, pf, square_loop(np.zeros(2 * p), 0, 2 * p - 1, 0.2)) < 1e-12


def test_scaled_flat_loop_holonomy_and_order(scaled2):
    ag, pf = scaled2
    loop = square_loop(np.zeros(4), 0, 3, 0.2, steps=40)
    assert holonomy_defect(ag, pf, loop) < 1e-6
    defects, order = refinement_order(ag, pf, loop, (2, 4, 8))
    assert defects[0] > defects[1] > defects[2]
    assert order >= 3.5


def test_rescale_constant_and_zero_omega():
    t = LocalTwistor([1.0, -2.0], [0.3, 0.4])
    const = ChartField(lambda x: np.array(3.0), 4)
    np.testing.assert_allclose(rescale_twistor(t, const, np.zeros(4)).pi, t.pi, atol=1e-12)
    t0 = LocalTwistor([0.0, 0.0], [0.3, 0.4])
    np.testing.assert_array_equal(rescale_twistor(t0, wiggly(4), np.full(4, 0.1)).pi, t0.pi)


def test_rescale_exponential_hand_formula():
    t = LocalTwistor([1.0, -2.0], [0.3, 0.4])
    out = rescale_twistor(t, ChartField(lambda x: np.exp(x[0]), 4), np.full(4, 0.1))
    # Upsilon = dx_1 = Upsilon_{A=0, A'=0}: only pi_0 shifts, by -omega^0
    np.testing.assert_allclose(out.pi, [0.3 - 1.0, 0.4], atol=1e-9)
    np.testing.assert_array_equal(out.omega, t.omega)


def test_rescale_vanishing_factor():
    with pytest.raises(ValueError):
        rescale_twistor(LocalTwistor([1, 0], [0, 1]), ChartField(lambda x: x[0], 4), np.zeros(4))


def test_transport_commutes_with_rescale(flat2):
    ag, pf = flat2
    f = wiggly(4)
    agf = ag.rescaled(f)
    pff = schouten(agf)
    x0, x1 = np.zeros(4), np.array([0.1, -0.05, 0.08, 0.1])
    t0 = LocalTwistor([1.0, 0.5j], [0.2, -0.7])
    c = segment(x0, x1, steps=40)
    a = rescale_twistor(transport(ag, pf, c, t0), f, x1)
    b = transport(agf, pff, c, rescale_twistor(t0, f, x0))
    np.testing.assert_allclose(a.vector, b.vector, atol=1e-6)


def rotating_family(w, rho, drho, pi, dpi):
    # Sigma_s = {s w + mu (x) rho(s)}, pi(s) annihilating rho(s)
    def point(s, mu):
        return s * w + np.kron(mu, rho + s * drho)

    return AlphaFamily(point, lambda s: pi + s * dpi, 2)


def test_ward_parallel_translates(flat2):
    ag, pf = flat2
    fam = rotating_family(np.array([0.1, 0.2, -0.1, 0.05]), np.array([1.0, 0.0]), np.zeros(2),
                          np.array([0.0, 1.0]), np.zeros(2))
    rep = ward_pair_check(ag, pf, fam, np.random.default_rng(0).uniform(-0.2, 0.2, (5, 2)))
    assert rep.residual < 1e-6


def test_ward_rotating_family(flat2):
    ag, pf = flat2
    # rho(s) = (1, s), pi(s) = (-s, 1): rho . pi = 0 for all s
    fam = rotating_family(np.array([0.05, 0.0, 0.1, -0.1]), np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                          np.array([0.0, 1.0]), np.array([-1.0, 0.0]))
    rep = ward_pair_check(ag, pf, fam, np.random.default_rng(1).uniform(-0.2, 0.2, (5, 2)))
    assert rep.residual < 1e-6
    assert rep.omega_norm > 1e-3


def test_ward_tangential_j(flat2):
    ag, pf = flat2
    rho, pi = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    nu = np.array([0.3, -0.2])
    fam = AlphaFamily(lambda s, mu: np.kron(mu + s * nu, rho), lambda s: (1 + s) * pi, 2)
    rep = ward_pair_check(ag, pf, fam, np.random.default_rng(2).uniform(-0.2, 0.2, (4, 2)))
    assert rep.omega_norm < 1e-8
    assert rep.eta_pi_residual < 1e-6


def test_ward_equivariance(flat2):
    ag, pf = flat2
    args = (np.array([0.05, 0.0, 0.1, -0.1]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    mus = np.array([[0.1, 0.1]])
    r1 = ward_pair_check(ag, pf, rotating_family(*args, np.array([0.0, 1.0]), np.array([-1.0, 0.0])), mus)
    r2 = ward_pair_check(ag, pf, rotating_family(*args, np.array([0.0, 3.0]), np.array([-3.0, 0.0])), mus)
    np.testing.assert_allclose(r2.omega, 3 * r1.omega, atol=1e-10)
    np.testing.assert_allclose(r2.eta, 3 * r1.eta, atol=1e-10)


def test_ward_rejects_non_autoparallel(flat2):
    ag, pf = flat2
    fam = rotating_family(np.zeros(4), np.array([1.0, 0.0]), np.zeros(2), np.array([1.0, 0.0]), np.zeros(2))
    with pytest.raises(ValueError):
        ward_pair_check(ag, pf, fam, np.array([[0.1, 0.1]]))


def test_alpha_surface_through_origin(flat2):
    ag, pf = flat2
    t0 = LocalTwistor([0.0, 0.0], [1.0, 0.0])
    surf = alpha_surface_from_parallel(ag, pf, t0, np.zeros(4), steps=4)
    assert not surf.empty
    # affine oracle: omega(x) = -x^{BA'} pi_A' so the zero set is {x[B, 0] = 0}
    assert np.max(np.abs(surf.points[:, [0, 2]])) < 1e-9
    assert surf.alpha_residual < 1e-8
    assert np.all(np.linalg.norm(surf.pi_values, axis=1) > 0.5)
    assert surf.tangents.shape[1] == 2


def test_alpha_surface_empty(flat2):
    ag, pf = flat2
    surf = alpha_surface_from_parallel(ag, pf, LocalTwistor([1.0, 0.0], [0.0, 0.0]), np.zeros(4), steps=4)
    assert surf.empty


def test_alpha_surface_zero_twistor(flat2):
    ag, pf = flat2
    with pytest.raises(DegenerateTwistorError):
        alpha_surface_from_parallel(ag, pf, LocalTwistor([0.0, 0.0], [0.0, 0.0]), np.zeros(4))


def test_flattening_map_matches_tautological_chart(flat2):
    ag, pf = flat2
    rng = np.random.default_rng(4)
    grid = rng.uniform(-0.3, 0.3, size=(8, 4))
    base = np.array([0.05, 0.0, -0.05, 0.1])
    sample = flattening_map(ag, pf, base, grid, steps=4)
    assert sample.path_residual < 1e-6
    # fit a fixed linear L with L(rowspan[I | x]) = W(x): (1 - P_W) L T(x)^T = 0
    rows = []
    for x, W in zip(grid, sample.planes):
        T = flat_plane(x, 2, 2).T
        proj = np.eye(4) - W @ W.conj().T
        rows.append(np.kron(proj, T.T))
    _, sv, vt = np.linalg.svd(np.vstack(rows))
    assert sv[-1] < 1e-10 * sv[0]
    L = vt[-1].conj().reshape(4, 4)
    assert np.linalg.cond(L) < 1e6


def test_flattening_base_point(flat2):
    ag, pf = flat2
    base = np.zeros(4)
    s = flattening_map(ag, pf, base, base[None, :])
    W = s.planes[0]
    assert np.max(np.abs(W[:2])) < 1e-14


def test_flattening_homotopic_paths_scaled(scaled2):
    ag, pf = scaled2
    s = flattening_map(ag, pf, np.zeros(4), np.array([[0.1, 0.1, -0.1, 0.05]]), steps=40)
    assert s.path_residual < 1e-6


def test_flattening_detects_curvature():
    ag = flat_model(2)
    pf = schouten(ag)
    # a P field that is not the Schouten tensor of the structure breaks flatness
    bad = type(pf)(ChartField(lambda x: np.diag([x[1], 0.0, 0.0, x[0]]) * 5, 4), 2)
    with pytest.raises(NotFlatError):
        flattening_map(ag, bad, np.zeros(4), np.array([[0.2, 0.1, -0.2, 0.1]]), steps=20)
