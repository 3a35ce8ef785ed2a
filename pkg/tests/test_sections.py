"""Section bases, L2 forms, Fubini-Study metrics, and Bergman kernels."""

import math

import numpy as np
import pytest

from _utils import rand_pd
from hebundle.bundle import BundleSpec, fd_curvature, transition_matrix, trivial_metric
from hebundle.geometry import CHART_W, CHART_Z, SpherePoint, sphere_point
from hebundle.sections import (
    FSMetric,
    PositiveForm,
    basis,
    bergman_kernel,
    eval_matrix,
    fs_identity_defect,
    fs_metric,
    fs_pointwise_bound_audit,
    l2_gram,
)


def test_basis_dimension():
    # dim H0(E(k)) = rank*(k+1) + deg for k at or above the regularity
    for degs, k in (((0,), 3), ((1, -1), 1), ((2, 2), 2), ((3,), -2)):
        spec = BundleSpec(degs)
        sb = basis(spec, k)
        assert sb.N == spec.rank * (k + 1) + spec.deg
        assert len(sb.entries) == sb.N


def test_basis_below_regularity_rejected():
    with pytest.raises(ValueError):
        basis(BundleSpec((1, -1)), 0)


def test_eval_matrix_charts():
    sb = basis(BundleSpec((1, -1)), 1)
    # chart Z at z: row 0 holds z^j for j = 0..2, row 1 holds 1
    S = eval_matrix(sb, SpherePoint(CHART_Z, 2.0))
    assert np.allclose(S[0, :3], [1.0, 2.0, 4.0])
    assert np.allclose(S[1, 3], 1.0)
    # chart W flips the exponent to degree minus j
    Sw = eval_matrix(sb, SpherePoint(CHART_W, 2.0))
    assert np.allclose(Sw[0, :3], [4.0, 2.0, 1.0])


def test_l2_gram_exact_monomial_values(rule24):
    # on O(0) at level d with the flat metric the basis monomials have
    # <z^i, z^j> = delta_ij * i! (d-i)! / (d+1)!
    d = 4
    sb = basis(BundleSpec((0,)), d)
    G = l2_gram(sb, trivial_metric(sb.bundle), rule24).matrix
    exact = [
        math.factorial(j) * math.factorial(d - j) / math.factorial(d + 1)
        for j in range(d + 1)
    ]
    assert np.max(np.abs(np.diag(G).real - exact)) < 1e-14
    assert np.max(np.abs(G - np.diag(np.diag(G)))) < 1e-14


def test_positive_form_validation():
    with pytest.raises(ValueError):
        PositiveForm(np.array([[1.0, 2.0], [0.0, 1.0]]))  # not hermitian
    with pytest.raises(ValueError):
        PositiveForm(np.diag([1.0, -1.0]))  # not positive


def test_fs_metric_identity_form_closed_form():
    # on O(0) with G = Id the induced metric is (1+|z|^2)^k / sum |z|^{2j}
    k = 3
    sb = basis(BundleSpec((0,)), k)
    h = FSMetric(sb, G=np.eye(sb.N))
    for z in (0.0, 0.5, 0.2 - 0.7j):
        denom = sum(abs(z) ** (2 * j) for j in range(k + 1))
        want = (1.0 + abs(z) ** 2) ** k / denom
        got = h.evaluate(SpherePoint(CHART_Z, z))[0, 0].real
        assert got == pytest.approx(want, rel=1e-12)


def test_fs_metric_glues_across_charts():
    spec = BundleSpec((1, -1))
    sb = basis(spec, 2)
    rng = np.random.default_rng(11)
    h = FSMetric(sb, G=rand_pd(rng, sb.N))
    z = 0.6 + 0.5j
    hz = h.evaluate(SpherePoint(CHART_Z, z))
    hw = h.evaluate(SpherePoint(CHART_W, 1.0 / z))
    T = transition_matrix(spec, z)
    assert np.allclose(hw, T.conj().T @ hz @ T, atol=1e-10)


def test_fs_metric_ginv_factor_roundtrip():
    sb = basis(BundleSpec((0,)), 2)
    rng = np.random.default_rng(4)
    G = rand_pd(rng, sb.N)
    h1 = FSMetric(sb, G=G)
    h2 = FSMetric(sb, ginv_factor=h1.W)
    p = sphere_point(0.3 + 0.1j)
    assert np.allclose(h1.evaluate(p), h2.evaluate(p), atol=1e-12)
    assert np.allclose(h2.G, G, atol=1e-12)


def test_fs_closed_form_curvature_matches_fd(rule16):
    spec = BundleSpec((1, 0))
    sb = basis(spec, 2)
    rng = np.random.default_rng(9)
    h = FSMetric(sb, G=rand_pd(rng, sb.N))
    for p in [sphere_point(z) for z in (0.1, 0.5j, -0.4 + 0.3j)]:
        assert np.allclose(h.curvature_coeff(p), fd_curvature(h, p), atol=1e-6)


def test_fs_connection_matches_fd():
    sb = basis(BundleSpec((2,)), 1)
    rng = np.random.default_rng(13)
    h = FSMetric(sb, G=rand_pd(rng, sb.N))
    p = sphere_point(0.35 - 0.2j)
    closed = h.connection_coeff(p)
    # compare the closed form against finite differences of the metric
    x0 = p.coord
    dl = 1e-4
    offs = np.array([-2, -1, 0, 1, 2])
    w1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
    vx = np.array([h.evaluate(SpherePoint(p.chart, x0 + o * dl)) for o in offs])
    vy = np.array([h.evaluate(SpherePoint(p.chart, x0 + 1j * o * dl)) for o in offs])
    hz = 0.5 * (
        np.tensordot(w1, vx, axes=(0, 0)) - 1j * np.tensordot(w1, vy, axes=(0, 0))
    ) / dl
    assert np.allclose(closed, np.linalg.solve(vx[2], hz), atol=1e-7)


def test_fs_identity_defect_small():
    sb = basis(BundleSpec((1, -1)), 1)
    rng = np.random.default_rng(2)
    G = rand_pd(rng, sb.N)
    for z in (0.0, 0.7, 0.4j):
        assert fs_identity_defect(sb, G, sphere_point(z)) < 1e-10


def test_bergman_kernel_flat_line_bundle(rule24):
    # the flat metric on O(0) is balanced: raw kernel is (k+1) Id
    rep = bergman_kernel(trivial_metric(BundleSpec((0,))), 4, rule24)
    assert rep["N"] == 5
    assert rep["raw_sup_dev"] < 1e-9
    assert rep["sup_dev"] < 1e-9
    p = sphere_point(0.3)
    assert rep["raw_field"].evaluate(p)[0, 0].real == pytest.approx(5.0, abs=1e-9)


def test_bergman_kernel_decreasing_for_smooth_metric(rule24):
    sb3 = basis(BundleSpec((0,)), 3)
    rng = np.random.default_rng(7)
    h = FSMetric(sb3, G=rand_pd(rng, sb3.N, scale=0.5))
    d1 = bergman_kernel(h, 4, rule24)["sup_dev"]
    d2 = bergman_kernel(h, 8, rule24)["sup_dev"]
    assert d2 < d1


def test_fs_pointwise_bound_audit():
    sb = basis(BundleSpec((0,)), 2)
    rng = np.random.default_rng(21)
    G0 = rand_pd(rng, sb.N)
    Z = rng.normal(size=(sb.N, sb.N)) + 1j * rng.normal(size=(sb.N, sb.N))
    zeta = 0.2 * (Z + Z.conj().T)
    pts = [sphere_point(z) for z in (0.0, 0.5, 0.9j, -0.6 + 0.2j)]
    rep = fs_pointwise_bound_audit(sb, G0, zeta, pts)
    assert rep["passes"]
    with pytest.raises(ValueError):
        fs_pointwise_bound_audit(sb, G0, Z, pts)  # not hermitian


def test_fs_metric_helper():
    sb = basis(BundleSpec((0,)), 1)
    h = fs_metric(sb, np.eye(2))
    assert isinstance(h, FSMetric)
