"""Chart handling, area-form normalization, and quadrature exactness."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hebundle.geometry import (
    CHART_W,
    CHART_Z,
    SpherePoint,
    build_quadrature,
    contract,
    integrate,
    integrate_values,
    omega_coefficient,
    other_chart,
    potential,
    sphere_point,
    tree_sum,
)


def test_sphere_point_canonicalization():
    p = sphere_point(0.5 + 0.1j)
    assert p.chart == CHART_Z and p.coord == 0.5 + 0.1j
    q = sphere_point(4.0)
    assert q.chart == CHART_W and q.coord == 0.25
    # tie |z| = 1 goes to chart Z
    assert sphere_point(1.0).chart == CHART_Z


def test_sphere_point_infinity():
    q = sphere_point(complex(np.inf))
    assert q.chart == CHART_W and q.coord == 0.0


def test_other_chart_roundtrip():
    p = SpherePoint(CHART_Z, 0.3 - 0.4j)
    q = other_chart(p)
    assert q.chart == CHART_W
    back = other_chart(q)
    assert back.chart == p.chart and back.coord == pytest.approx(p.coord)
    with pytest.raises(ValueError):
        other_chart(SpherePoint(CHART_Z, 0.0))


def test_invalid_points_rejected():
    with pytest.raises(ValueError):
        SpherePoint("Q", 0.0)
    with pytest.raises(ValueError):
        SpherePoint(CHART_Z, complex(np.nan))


def test_potential_values():
    assert potential(SpherePoint(CHART_Z, 0.0)) == 0.0
    assert potential(SpherePoint(CHART_Z, 1.0)) == pytest.approx(math.log(2.0))
    # the potential only sees |coord|, so both charts agree on |x| = 1
    assert potential(SpherePoint(CHART_W, 1j)) == pytest.approx(math.log(2.0))


def test_area_form_contracts_to_one():
    for x in (0.0, 0.5, 0.9j, -0.3 + 0.7j):
        p = SpherePoint(CHART_Z, x)
        assert contract(omega_coefficient(p), p) == pytest.approx(1.0)


def test_total_mass_is_one(rule24):
    assert integrate(lambda p: 1.0, rule24) == pytest.approx(1.0, abs=1e-14)


def test_quadrature_exact_on_u_polynomials(rule24):
    # in u = |x|^2/(1+|x|^2) the measure is Lebesgue on [0, 1]; the
    # Gauss rule is exact for u^m well past these degrees
    def u_of(p):
        a = abs(p.coord) ** 2
        u = a / (1.0 + a)
        return u if p.chart == CHART_Z else 1.0 - u

    for m in range(8):
        val = integrate(lambda p: u_of(p) ** m, rule24)
        assert val == pytest.approx(1.0 / (m + 1), abs=1e-13)


def test_angular_modes_integrate_to_zero(rule24):
    # z / (1+|z|^2)^2 has a pure angular mode and integrates to zero
    def f(p):
        z = p.coord if p.chart == CHART_Z else 1.0 / p.coord
        return z / (1.0 + abs(z) ** 2) ** 2

    assert abs(integrate(f, rule24)) < 1e-14


def test_curvature_mass_of_line_weight(rule24):
    # contraction of the (1,1)-form of log(1+|z|^2) integrates to 1
    # (degree of the polarization); the coefficient is (1+|z|^2)^-2
    val = integrate(lambda p: contract(omega_coefficient(p), p), rule24)
    assert val == pytest.approx(1.0, abs=1e-14)


def test_build_quadrature_validation():
    with pytest.raises(ValueError):
        build_quadrature(2, 16)
    with pytest.raises(ValueError):
        build_quadrature(16, 3)


def test_quadrature_nodes_canonical(rule16):
    for p in rule16.nodes:
        assert abs(p.coord) <= 1.0 + 1e-12


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
@settings(max_examples=50, deadline=None)
def test_tree_sum_matches_plain_sum(xs):
    arr = np.array(xs)
    assert tree_sum(arr) == pytest.approx(float(np.sum(arr)), abs=1e-6, rel=1e-9)


def test_tree_sum_deterministic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=1000)
    assert tree_sum(a) == tree_sum(a.copy())


def test_integrate_values_matches_integrate(rule16):
    vals = np.array([abs(p.coord) ** 2 for p in rule16.nodes])
    assert integrate_values(vals, rule16) == pytest.approx(
        integrate(lambda p: abs(p.coord) ** 2, rule16)
    )
    with pytest.raises(ValueError):
        integrate_values(vals[:-1], rule16)


def test_integrate_rejects_nonfinite(rule16):
    with pytest.raises(RuntimeError):
        integrate(lambda p: np.inf, rule16)
