import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unfoldstokes.errors import EigenvalueCollision, MalformedInput, ResonantLeadingMatrix
from unfoldstokes.systems import (ZERO, FormalInvariants, UnfoldedParameter, formal_invariants,
                                  leading_eigenvalues, model_system, normalized, parse_system,
                                  prenormalize, resonance_values, strictly_ordered, system_from_matrices,
                                  UnfoldedSystem)

small = st.floats(-0.4, 0.4)
moduli = st.floats(1e-4, 0.04)
args = st.floats(-10.0, 10.0)


@st.composite
def models(draw, n=None):
    n = n or draw(st.integers(1, 3))
    base = np.linspace(1, -1, n) if n > 1 else np.array([0.5])
    l0 = base + np.array([draw(st.floats(-0.2, 0.2)) for _ in range(n)])
    l1 = np.array([complex(draw(small), draw(small)) for _ in range(n)])
    R = np.array([[complex(draw(small), draw(small)) for _ in range(n)] for _ in range(n)])
    return l0, l1, R


# ---------------------------------------------------------------- parameters


@given(moduli, args)
def test_from_sqrt_recovers_parameter(m, a):
    eps = UnfoldedParameter(m, a)
    back = UnfoldedParameter.from_sqrt(eps.sqrt_eps, a)
    assert back.argument == pytest.approx(a, abs=1e-12)
    assert back.modulus == pytest.approx(m, rel=1e-12)


@given(moduli, args)
def test_turn_swaps_singular_points(m, a):
    eps = UnfoldedParameter(m, a)
    other = eps.turned()
    assert other.eps == pytest.approx(eps.eps, abs=1e-15)
    assert other.x_L == pytest.approx(eps.x_R, abs=1e-15)
    assert other.turned(-1).argument == pytest.approx(a, abs=1e-14)


def test_parameter_validation():
    with pytest.raises(MalformedInput):
        UnfoldedParameter(-1.0, 0.0)
    with pytest.raises(MalformedInput):
        UnfoldedParameter(1.0, math.inf)
    with pytest.raises(MalformedInput):
        UnfoldedParameter.from_dict({"argument": 1.0})
    assert UnfoldedParameter.from_dict(UnfoldedParameter(0.3, 2.0).to_dict()) == UnfoldedParameter(0.3, 2.0)


# ---------------------------------------------------------------- formal invariants


@settings(max_examples=40, deadline=None)
@given(models(), moduli, st.floats(1.5, 11.0))
def test_model_invariants_are_exact(model, m, a):
    # p vanishes at x_L and x_R, so the residual term drops out of the eigenvalues there
    l0, l1, R = model
    s = model_system(l0, l1, R)
    eps = UnfoldedParameter(m, a)
    fi = formal_invariants(s, eps)
    np.testing.assert_allclose(fi.lam[:, 0], l0, atol=1e-10)
    np.testing.assert_allclose(fi.lam[:, 1], l1, atol=1e-10)
    for k, x in enumerate((eps.x_L, eps.x_R)):
        np.testing.assert_allclose(fi.mu[:, k], (l0 + l1 * x) / (2 * x), rtol=1e-9)


@settings(max_examples=25, deadline=None)
@given(models(), st.floats(0.0, 2 * math.pi))
def test_invariants_survive_constant_gauge(model, angle):
    l0, l1, R = model
    n = len(l0)
    G = np.eye(n) + 0.3 * np.exp(1j * angle) * np.triu(np.ones((n, n)), 1)
    s = model_system(l0, l1, R)
    eps = UnfoldedParameter(0.01, 2 * math.pi)
    a, b = formal_invariants(s, eps), formal_invariants(s.conjugated(G), eps)
    np.testing.assert_allclose(a.lam, b.lam, atol=1e-10)


def test_invariants_at_zero_use_eigenvalue_derivative():
    s = model_system([0.8, -0.3], [0.25, 0.1j], np.array([[0.1, 0.4], [0.2, 0.3]]))
    fi = formal_invariants(s, ZERO)
    np.testing.assert_allclose(fi.lam, [[0.8, 0.25], [-0.3, 0.1j]], atol=1e-14)
    assert fi.mu is None


def test_delta_is_ratio_of_monodromy_exponentials():
    fi = FormalInvariants.from_model([1, -1], [0.3, 0.1], UnfoldedParameter(0.02, 2 * math.pi))
    for which in "LR":
        D = np.diag(fi.D(which))
        assert fi.delta(0, 1, which) == pytest.approx(D[0] / D[1], rel=1e-12)
    assert fi.D_L.shape == (2, 2)


def test_higher_rank_invariants():
    # k = 2: p = x^3 - eps, B = diag(lam0 + lam1 x + lam2 x^2) is its own normal form
    lam = np.array([[1.0, 0.2, 0.1], [-1.0, 0.3j, 0.05]])
    coeffs = np.zeros((2, 2, 3, 1), complex)
    for j in range(2):
        coeffs[j, j, :, 0] = lam[j]
    s = UnfoldedSystem(coeffs, k=2)
    fi = formal_invariants(s, UnfoldedParameter(1e-3, 0.4))
    np.testing.assert_allclose(fi.lam, lam, atol=1e-9)


# ---------------------------------------------------------------- parsing and normalization


def test_document_roundtrip():
    s = model_system([1, -1], [0.3, 0.1], np.array([[0.2, 0.5], [0.3, -0.1]]))
    back = parse_system(json.dumps(s.to_document()))
    np.testing.assert_array_equal(back.coeffs, s.coeffs)


@pytest.mark.parametrize("doc", [
    "not json",
    "[]",
    {"n": 2, "B": [[[[1]]]]},
    {"n": 1, "B": [[[["a"]]]]},
    {"n": 1, "format": 9, "B": [[[[1]]]]},
    {"n": 1, "k": 2, "B": [[[[1]]]], "unfolding": [[1]]},
])
def test_malformed_documents(doc):
    with pytest.raises(MalformedInput):
        parse_system(doc)


def test_resonant_leading_matrix_rejected():
    doc = {"n": 2, "B": [[[[1]], [[0]]], [[[0]], [[1]]]]}
    with pytest.raises(ResonantLeadingMatrix):
        parse_system(doc)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=2, allow_nan=False, allow_infinity=False),
                min_size=2, max_size=4, unique=True))
def test_normalization_orders_real_parts(eigs):
    eigs = np.array(eigs)
    d = np.abs(eigs[:, None] - eigs[None, :]) + np.eye(len(eigs))
    if d.min() < 1e-3:
        return
    s = system_from_matrices({(0, 0): np.diag(eigs), (1, 0): np.diag(np.arange(len(eigs)) * 0.1)})
    out, perm, phi = normalized(s)
    lead = np.diag(out.matrix(0.0, 0.0))
    assert strictly_ordered(lead)
    np.testing.assert_allclose(lead, np.exp(1j * phi) * eigs[perm], atol=1e-12)


def test_rotation_scales_leading_eigenvalues():
    s = model_system([1, -1], [0.3, 0.1])
    r = s.rotated(0.4)
    np.testing.assert_allclose(sorted(leading_eigenvalues(r), key=lambda z: z.real),
                               np.exp(0.4j) * np.array([-1, 1]), atol=1e-14)


# ---------------------------------------------------------------- prenormal form and resonances


def test_prenormal_form_of_conjugated_model():
    # B = G^{-1} Lambda(x) G: eigenvectors are constant, so R vanishes identically
    G = np.array([[1, 0.4], [0.2j, 1]])
    s = model_system([1, -1], [0.3, 0.1]).conjugated(G)
    eps = UnfoldedParameter(0.01, 2 * math.pi)
    P, R = prenormalize(s, eps, [0.3, 0.2j, -0.25 + 0.1j])
    assert np.max(np.abs(R)) < 1e-7
    np.testing.assert_allclose(P[0], P[2], atol=1e-9)


def test_prenormalize_rejects_root_of_p():
    s = model_system([1, -1], [0.3, 0.1])
    eps = UnfoldedParameter(0.01, 0.0)
    with pytest.raises(ValueError):
        prenormalize(s, eps, [eps.x_L])


def test_resonance_values_match_closed_form():
    # mu_1R - mu_2R = -a / (2 sqrt eps) + b / 2 for the model, a, b the gaps of lambda_0, lambda_1
    l0, l1 = np.array([0.1, -0.1]), np.array([0.1, -0.1])
    s = model_system(l0, l1)
    a, b = l0[0] - l0[1], l1[0] - l1[1]
    found = resonance_values(lambda p: formal_invariants(s, p), (0, 1, "R"), [1, 2], (1e-4, 0.05, 4.0, 8.0))
    assert {tag[3] for _, tag in found} == {1, 2}
    for par, (_, _, _, m) in found:
        assert par.sqrt_eps == pytest.approx(-a / (2 * (m - b / 2)), rel=1e-8)


def test_branch_following_detects_collision():
    # eigenvalues 1 - x and -1 + x collide at x = 1
    s = system_from_matrices({(0, 0): np.diag([1.0, -1.0]), (1, 0): np.diag([-1.0, 1.0])})
    with pytest.raises(EigenvalueCollision):
        formal_invariants(s, UnfoldedParameter(1.0, 0.0))
