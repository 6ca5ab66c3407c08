import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unfoldstokes.geometry import Arc, Line, PathPlan
from unfoldstokes.riccati import (FirstIntegralVector, first_integral_map, first_integral_monodromy,
                                  first_integrals, projective_distance, projectivize, riccati_flow)
from unfoldstokes.stokes import StokesCollection
from unfoldstokes.systems import FormalInvariants, UnfoldedParameter, model_system
from unfoldstokes.transport import transfer_matrix

cplx = st.complex_numbers(max_magnitude=10, min_magnitude=0.1, allow_nan=False, allow_infinity=False)


@given(st.lists(cplx, min_size=2, max_size=4), cplx)
def test_projective_point_roundtrip(v, scale):
    v = np.array(v)
    j = int(np.argmax(np.abs(v)))
    p = projectivize(v, j)
    assert p.vector()[j] == 1
    assert projective_distance(p, scale * v) < 1e-12
    other = p.in_chart((j + 1) % len(v))
    assert projective_distance(other, v) < 1e-12


def test_points_at_infinity():
    assert projectivize(np.array([1.0, 0.0]), 1) is None
    p = projectivize(np.array([1.0, 0.0]), 0)
    assert p.in_chart(1) is None
    H = FirstIntegralVector(1, np.array([1.0, 0.0]))
    assert H.at_infinity
    assert np.isinf(H.values[0])
    assert H.distance(FirstIntegralVector(1, np.array([2.0, 1e-20]))) < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.floats(0, 2 * math.pi), st.integers(0, 2), st.floats(0, 2 * math.pi))
def test_riccati_matches_projectivized_linear_flow(phase, chart, angle):
    eps = UnfoldedParameter(1e-2, 2 * math.pi)
    R = 0.3 * np.exp(1j * phase) * np.array([[0.5, 1, -0.3], [0.2, -0.4, 0.7], [0.9, 0.1, 0.2]])
    sys = model_system([0.8, 0.05j, -0.7], [0.1, -0.2, 0.3], R)
    path = PathPlan((Arc(0, 0.4, angle, angle + 3.0), Line(0.4 * np.exp(1j * (angle + 3.0)), 0.15j)))
    M = transfer_matrix(sys, eps, path)
    y = np.array([1, 0.3 - 0.2j, -0.5])
    p0 = projectivize(y, chart)
    res = riccati_flow(sys, eps, chart, p0, path, history=True)
    assert projective_distance(res.point, M @ y) < 1e-6


def test_riccati_switches_charts_through_infinity():
    # a diagonal flow pushes y toward the dominant axis, which is at infinity in chart 1
    eps = UnfoldedParameter(1e-2, 2 * math.pi)
    sys = model_system([1, -1], [0, 0])
    path = PathPlan((Line(-0.5, -0.12),))
    y = np.array([1e-3, 1.0])
    M = transfer_matrix(sys, eps, path)
    res = riccati_flow(sys, eps, 1, projectivize(y, 1), path, history=True)
    assert res.switches
    assert projective_distance(res.point, M @ y) < 1e-9
    with pytest.raises(ValueError):
        riccati_flow(sys, eps, 0, projectivize(np.array([0.0, 1.0]), 1), path)


def test_first_integrals_are_constant_along_solutions():
    eps = UnfoldedParameter(1e-2, 2 * math.pi)
    sys = model_system([1, -1], [0.3, 0.1], np.array([[0.2, 0.5], [0.3, -0.1]]))
    path = PathPlan((Line(0.4, 0.1 + 0.3j),))
    W0 = np.array([[1, 0.2], [0.4j, 1]])
    W1 = transfer_matrix(sys, eps, path) @ W0
    y = np.array([0.7, -0.2 + 0.1j])
    H0 = first_integrals(W0, 0, y)
    H1 = first_integrals(W1, 0, riccati_flow(sys, eps, 0, projectivize(y, 0), path))
    assert H0.distance(H1) < 1e-9


@given(st.lists(cplx, min_size=3, max_size=3), st.integers(0, 2))
def test_first_integral_map_is_projective(k, chart):
    k = np.array(k)
    C = np.array([[1, 0.3, -0.2j], [0, 1, 0.5], [0, 0, 1]])
    d = np.exp(1j * np.array([0.3, -1.1, 2.0]))
    a = first_integral_map(np.linalg.inv(C), d, FirstIntegralVector(chart, k))
    b = first_integral_map(np.linalg.inv(C), d, FirstIntegralVector(chart, 2.5j * k))
    assert projective_distance(a.k, b.k) < 1e-12


def test_trivial_stokes_monodromy_multiplies_by_delta():
    eps = UnfoldedParameter(1e-2, 2 * math.pi)
    fi = FormalInvariants.from_model([1, -1], [0.3, 0.1], eps)
    sc = StokesCollection.identity(2, eps, fi)
    H = FirstIntegralVector(0, np.array([1.0, 0.4 - 0.1j]))
    for which in ("L", "R"):
        out = first_integral_monodromy(sc, 0, H, which)
        expected = np.array([1.0, (0.4 - 0.1j) * fi.delta(0, 1, which)])
        np.testing.assert_allclose(out.values, expected, rtol=1e-12)
