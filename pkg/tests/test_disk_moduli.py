import itertools

import numpy as np
import pytest
from scipy.linalg import null_space, subspace_angles

from agtwistor.ag_chart import right_flat_residual, torsion_array
from agtwistor.disk_moduli import (
    ContinuationError,
    DegenerateCurveError,
    DiskFamily,
    ModuliChart,
    RealSliceEmbedding,
    RotationCurlField,
    cayley_w,
    cayley_zeta,
    chern_on_fiber,
    continue_disk,
    boundary_residual,
    embedding_invariants,
    factorization_from_curve,
    fiber_curve,
    fibre_plane,
    load_disks,
    maslov_index,
    quadric,
    quadric_intersections,
    recover_ag,
    save_disks,
    solve_disk,
    standard_disk,
)


def divfree(p, t):
    return RealSliceEmbedding(p, RotationCurlField(p + 2), t)


@pytest.fixture(scope="module")
def fam2():
    return DiskFamily(divfree(2, 0.01))


@pytest.fixture(scope="module")
def fam3():
    return DiskFamily(divfree(3, 0.01))


X2 = np.array([0.1, -0.05, 0.2, 0.1])


def test_standard_disk_line():
    z = np.array([1, 1j, 0, 0])
    d = standard_disk(z)
    np.testing.assert_array_equal(d.coeffs[0], z)
    np.testing.assert_array_equal(d.coeffs[1], z.conj())
    theta = np.linspace(0, 2 * np.pi, 37)
    F = d.F(np.exp(1j * theta))
    # real after multiplying by e^{-i theta/2}
    assert np.max(np.abs((np.exp(-0.5j * theta)[:, None] * F).imag)) < 1e-15
    # boundary lies in the real span of Re z, Im z
    real_pts = (np.exp(-0.5j * theta)[:, None] * F).real
    assert np.max(np.abs(real_pts[:, 2:])) == 0


def test_standard_disk_rejects_real_and_off_quadric():
    with pytest.raises(ValueError):
        standard_disk(np.array([1.0, 0, 0, 0]))
    with pytest.raises(ValueError):
        standard_disk(np.array([1, 2j, 0, 0]))


def test_fixed_point_at_t0():
    z = ModuliChart(2).z(X2)
    d = solve_disk(RealSliceEmbedding(2), standard_disk(z))
    assert len(d.residual_history) == 1 and d.residual_history[0] < 1e-13


def test_continuation_converges_quadratically():
    z = ModuliChart(2).z(X2)
    P = divfree(2, 0.01)
    disk = standard_disk(z)
    for k in range(1, 6):
        disk = solve_disk(P.at(0.002 * k), disk)
        h = disk.residual_history
        assert len(h) - 1 <= 6
        # each Newton step at least squares the error (up to a constant)
        for a, b in zip(h, h[1:]):
            assert b < max(10 * a ** 2, 1e-13)
    assert boundary_residual(P, disk) < 1e-9


def test_spectral_gate():
    z = ModuliChart(2).z(X2)
    P = divfree(2, 0.01)
    r16 = boundary_residual(P, continue_disk(P, z, K=16))
    r32 = boundary_residual(P, continue_disk(P, z, K=32))
    assert abs(r16 - r32) < 1e-8


def test_newton_divergence_is_reported():
    z = ModuliChart(2).z(X2)
    with pytest.raises(ContinuationError):
        solve_disk(divfree(2, 1.0), standard_disk(z), max_iter=1)


def test_unique_quadric_intersection(fam2):
    rng = np.random.default_rng(0)
    for x in rng.uniform(-0.25, 0.25, size=(5, 4)):
        d = fam2.solve(x)
        assert quadric_intersections(d) == 1
        assert abs(quadric(d.F(0.0))[0]) < 1e-12


@pytest.mark.parametrize("p", [2, 3])
def test_maslov_standard(p):
    z = ModuliChart(p).z(np.zeros(2 * p))
    m = maslov_index(RealSliceEmbedding(p), standard_disk(z))
    assert (m.normal, m.tangent, m.total) == (p, 2, p + 2)


def test_maslov_deformed_and_conjugate(fam2):
    d = fam2.solve(X2)
    assert maslov_index(fam2.P, d).normal == 2
    # at t = 0 the conjugate disk is exactly the disk of the conjugate point
    P0 = RealSliceEmbedding(2)
    z = ModuliChart(2).z(X2)
    dc = standard_disk(z).conjugate()
    ref = standard_disk(z.conj())
    np.testing.assert_array_equal(dc.coeffs, ref.coeffs)
    np.testing.assert_array_equal(dc.ucoef, ref.ucoef)
    assert maslov_index(P0, dc).normal == 2


def test_maslov_constant_along_continuation():
    z = ModuliChart(2).z(X2)
    P = divfree(2, 0.01)
    disk = standard_disk(z)
    for k in range(1, 6):
        Pk = P.at(0.002 * k)
        disk = solve_disk(Pk, disk)
        assert maslov_index(Pk, disk).normal == 2


@pytest.mark.parametrize("p,expected", [(2, -4), (3, -5)])
def test_chern_numbers(p, expected):
    m = maslov_index(RealSliceEmbedding(p), standard_disk(ModuliChart(p).z(np.zeros(2 * p))))
    c = chern_on_fiber(m)
    assert c["c1_D"] == expected
    assert c["c1_V01"] == -2
    assert c["c1_quotient"] == -p
    with pytest.raises(ValueError):
        chern_on_fiber(None)


def test_fiber_curve_degree(fam3):
    fc = fiber_curve(fam3.solve(np.linspace(-0.1, 0.1, 6)))
    assert fc.degree_residual[3] < 1e-6
    assert fc.degree_residual[2] > 1e-3
    assert fc.dbar_residual < 1e-6


def test_standard_curve_is_veronese():
    # at t = 0 the Pluecker curve is a projective-linear image of (1, w, ..., w^p)
    p = 2
    fam = DiskFamily(RealSliceEmbedding(p))
    fc = fiber_curve(fam.solve(np.zeros(4)))
    assert fc.degree_residual[p] < 1e-10
    assert fc.degree_residual[p - 1] > 1e-3


def _expected_alpha_plane(chart, x, w):
    """Oracle: tangent vectors moving the plane so that the point F(w) stays on it."""
    z = chart.z(x)
    dz = chart.dz(x)
    a, b = z.real, z.imag
    y_coef = np.array([1 + w, 1j * (1 - w)])  # z + conj(z) w in the basis (a, b)
    perp = null_space(np.array([a, b]))
    return null_space(perp.T @ (y_coef[0] * dz.real + y_coef[1] * dz.imag))


def test_fibre_planes_match_grassmannian_at_t0():
    p = 3
    fam = DiskFamily(RealSliceEmbedding(p))
    chart = fam.chart
    rng = np.random.default_rng(1)
    for x in rng.uniform(-0.2, 0.2, size=(3, 2 * p)):
        d = fam.solve(x)
        for w in [0.0, 0.4 + 0.3j, 1.0, -1.0, 1j]:
            got = fibre_plane(d, complex(w))
            assert np.max(subspace_angles(got, _expected_alpha_plane(chart, x, w))) < 1e-6


def test_factorization_synthetic_exact():
    rng = np.random.default_rng(2)
    p = 3
    a, b = rng.normal(size=(2 * p, p)), rng.normal(size=(2 * p, p))
    planes = {0: a, "inf": b, 1: a + b, 0.7: a + 0.7 * b, -2.5: a - 2.5 * b}
    fac = factorization_from_curve(planes, a, check=(0.7, -2.5))
    np.testing.assert_allclose(fac.a, a, atol=1e-12)
    np.testing.assert_allclose(fac.b, b, atol=1e-12)
    assert fac.reprojection < 1e-12


def test_factorization_degenerate_diagnostic():
    rng = np.random.default_rng(3)
    p = 3
    a, b = rng.normal(size=(2 * p, p)), rng.normal(size=(2 * p, p))
    b[:, 0] = a[:, 0]
    planes = {0: a, "inf": b, 1: a + b}
    with pytest.raises(DegenerateCurveError) as err:
        factorization_from_curve(planes, a)
    common = err.value.common_subspace
    assert common.shape[1] == 1
    assert np.min(subspace_angles(common, a[:, :1])) < 1e-8


def test_cayley_roundtrip():
    z = np.array([0.3, -1.0, 2.5 + 0.1j, 1j])
    np.testing.assert_allclose(cayley_zeta(cayley_w(z)), z, atol=1e-14)
    assert cayley_w(1j) == 0


def test_disks_disjoint(fam2):
    rng = np.random.default_rng(4)
    xs = rng.uniform(-0.2, 0.2, size=(4, 4))
    r = np.sqrt(np.linspace(0.05, 0.95, 6))
    w = (r[:, None] * np.exp(2j * np.pi * np.arange(12) / 12)[None, :]).ravel()
    imgs = []
    for x in xs:
        F = fam2.solve(x).F(w)
        imgs.append(F / np.linalg.norm(F, axis=1, keepdims=True))
    for A, B in itertools.combinations(imgs, 2):
        overlap = np.abs(A.conj() @ B.T)
        assert np.max(overlap) < 1 - 1e-6


def test_boundary_circle_embedded(fam2):
    d = fam2.solve(X2)
    theta = 2 * np.pi * np.arange(64) / 64
    u = d.u(theta)
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    # projective points: u and -u coincide, so compare |<u_i, u_j>|
    G = np.abs(u @ u.T)
    np.fill_diagonal(G, 0)
    assert np.max(G) < 1 - 1e-6


def test_embedding_invariants():
    rng = np.random.default_rng(5)
    samples = rng.normal(size=(20, 4))
    rep = embedding_invariants(divfree(2, 0.01), samples)
    assert rep.min_separation > 1e-3
    assert rep.min_rank_sv > 1e-3
    assert rep.totally_real_sv > 1e-3
    Z, _ = RealSliceEmbedding(2).psi(samples)
    np.testing.assert_array_equal(Z, samples)


def test_archive_roundtrip(tmp_path, fam2):
    d = fam2.solve(X2)
    save_disks(tmp_path / "disks.json", [d], {"t": 0.01})
    (back,) = load_disks(tmp_path / "disks.json")
    np.testing.assert_array_equal(back.coeffs, d.coeffs)
    # an archived disk is a converged seed
    again = solve_disk(fam2.P, back)
    assert len(again.residual_history) <= 2


def test_recovered_flat_roundtrip():
    ag, rec = recover_ag(RealSliceEmbedding(3))
    x = np.linspace(-0.1, 0.1, 6)
    assert right_flat_residual(ag, x[None, :]) < 1e-6
    assert np.max(np.abs(torsion_array(ag, x))) < 1e-6


def test_recovered_deformed(fam3):
    ag, rec = recover_ag(fam3.P, family=fam3)
    x = np.linspace(-0.1, 0.1, 6)
    assert right_flat_residual(ag, x[None, :]) < 1e-5
    assert np.max(np.abs(torsion_array(ag, x))) < 1e-5
    assert rec.imag_defect < 1e-8
