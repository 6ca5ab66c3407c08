import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unfoldstokes.errors import IntegrationError, ResonanceError
from unfoldstokes.geometry import (Arc, Line, PathPlan, admissible_sector, lens_base_point, monodromy_loop,
                                   sector_domains, t_path)
from unfoldstokes.systems import ZERO, FormalInvariants, UnfoldedParameter, formal_invariants, model_system
from unfoldstokes.transport import (BranchState, floquet_residual, local_floquet_basis, model_along,
                                    model_solution, monodromy_matrices, refinement_difference, trace_integral,
                                    transfer_matrix)

L0, L1 = [1, -1], [0.3, 0.1]
RES = np.array([[0.2, 0.5], [0.3, -0.1]])


def _geo(eps, r=0.5):
    S = admissible_sector(FormalInvariants.from_model(L0, L1, ZERO))
    return sector_domains(eps, S, r)["D"].geometry


@settings(max_examples=15, deadline=None)
@given(st.floats(1e-3, 0.03), st.floats(1.8, 10.7), st.floats(-1.0, 1.0), st.floats(0.1, 0.9))
def test_model_transport_is_the_explicit_solution(m, a, s0, s1):
    eps = UnfoldedParameter(m, a)
    sys = model_system(L0, L1)
    fi = formal_invariants(sys, eps)
    geo = _geo(eps)
    _, uR = lens_base_point(geo, "R")
    P = geo.period_length
    path = t_path(geo, [(uR, 0.0), (uR, s0 * 0.3 * P), (0.3 * uR, s1 * 0.5 * P)])
    T = transfer_matrix(sys, eps, path)
    F0, F1 = model_along(fi, eps, path)
    expected = F1 @ np.linalg.inv(F0)
    scale = np.sqrt(np.outer(np.abs(np.diag(expected)), np.abs(np.diag(expected))))
    assert np.max(np.abs(T - expected) / scale) < 1e-8


@settings(max_examples=10, deadline=None)
@given(st.floats(1e-3, 0.03), st.floats(1.8, 10.7), st.floats(0, 2 * math.pi))
def test_liouville_along_paths(m, a, phase):
    eps = UnfoldedParameter(m, a)
    sys = model_system(L0, L1, RES * np.exp(1j * phase))
    path = PathPlan((Line(0.4, 0.3j), Arc(0, 0.3, math.pi / 2, 2.5), Line(0.3 * np.exp(2.5j), -0.35)))
    T = transfer_matrix(sys, eps, path)
    expected = np.exp(trace_integral(sys, eps, path))
    assert np.linalg.det(T) / expected == pytest.approx(1, abs=1e-9)


def test_composition_inverse_and_gauge():
    eps = UnfoldedParameter(1e-2, 2 * math.pi)
    sys = model_system(L0, L1, RES)
    p = PathPlan((Line(0.4, 0.2 + 0.3j),))
    q = PathPlan((Arc(0, abs(0.2 + 0.3j), float(np.angle(0.2 + 0.3j)), 2.8),))
    Tp, Tq = transfer_matrix(sys, eps, p), transfer_matrix(sys, eps, q)
    np.testing.assert_allclose(transfer_matrix(sys, eps, p + q), Tq @ Tp, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(transfer_matrix(sys, eps, p.reversed()) @ Tp, np.eye(2), atol=1e-9)
    G = np.array([[1, 0.5j], [0.2, 1]])
    Tg = transfer_matrix(sys.conjugated(G), eps, p)
    np.testing.assert_allclose(Tg, np.linalg.solve(G, Tp @ G), rtol=1e-9, atol=1e-9)
    assert refinement_difference(sys, eps, p) < 1e-9


def test_scalar_loop_is_exponential_of_exponent():
    eps = UnfoldedParameter(2e-2, 2 * math.pi + 0.2)
    sys = model_system([0.4], [0.25])
    fi = formal_invariants(sys, eps)
    geo = _geo(eps)
    for which, sgn in (("L", 1), ("R", -1)):
        M = transfer_matrix(sys, eps, monodromy_loop(geo, which))
        expected = np.exp(sgn * 2j * math.pi * fi.mu[0, 0 if which == "L" else 1])
        assert complex(M[0, 0]) == pytest.approx(expected, rel=1e-10)


def test_clearance_is_enforced():
    eps = UnfoldedParameter(1e-2, 2 * math.pi)
    sys = model_system(L0, L1)
    path = PathPlan((Line(eps.x_L - 0.05, eps.x_L + 0.05),))
    with pytest.raises(IntegrationError):
        transfer_matrix(sys, eps, path)
    with pytest.raises(ValueError):
        transfer_matrix(sys, eps, PathPlan((Line(0.3, 0.4),)), rtol=0)


def test_monodromy_data_is_consistent():
    eps = UnfoldedParameter(1e-2, 2 * math.pi + 0.1)
    sys = model_system(L0, L1, RES)
    mono = monodromy_matrices(sys, eps, _geo(eps))
    for which in ("L", "R"):
        M = mono.M_L if which == "L" else mono.M_R
        Minv = mono.M_L_inv if which == "L" else mono.M_R_inv
        # M_L is conjugated by the connector, so compare against its conditioning
        kappa = np.linalg.norm(M, 2) * np.linalg.norm(Minv, 2)
        assert np.max(np.abs(M @ Minv - np.eye(2))) < 1e-9 * kappa
    assert max(mono.liouville_errors(formal_invariants(sys, eps)).values()) < 1e-9
    with pytest.raises(IntegrationError):
        monodromy_matrices(sys, ZERO, _geo(ZERO))


# ---------------------------------------------------------------- Frobenius


@pytest.mark.parametrize("which", ["L", "R"])
def test_floquet_series_solves_the_system(which):
    eps = UnfoldedParameter(2e-2, 2 * math.pi + 0.3)
    sys = model_system(L0, L1, RES)
    fi = formal_invariants(sys, eps)
    basis = local_floquet_basis(sys, eps, which, order=40, fi=fi)
    np.testing.assert_allclose(basis.exponents, fi.mu[:, 0 if which == "L" else 1], rtol=1e-10)
    rad = 0.3 * min(basis.radius_estimate, abs(eps.x_L - eps.x_R))
    assert floquet_residual(sys, eps, basis, rad) < 1e-10


def test_floquet_frame_is_an_eigenbasis_of_the_loop():
    eps = UnfoldedParameter(2e-2, 2 * math.pi + 0.3)
    sys = model_system(L0, L1, RES)
    fi = formal_invariants(sys, eps)
    basis = local_floquet_basis(sys, eps, "L", fi=fi)
    x0 = eps.x_L + 0.3 * abs(eps.x_L - eps.x_R) * np.exp(0.4j)
    loop = PathPlan((Arc(eps.x_L, abs(x0 - eps.x_L), 0.4, 0.4 + 2 * math.pi),))
    M = transfer_matrix(sys, eps, loop)
    Y = basis.frame(x0)
    # a positive turn multiplies column j by e^{2 pi i mu_j}
    np.testing.assert_allclose(M @ Y, Y * np.exp(2j * math.pi * basis.exponents)[None, :], rtol=1e-8, atol=1e-10)


def test_resonant_frobenius_is_reported():
    # mu_1 - mu_2 at x_R equals 1 for this model at |eps| = 1/81
    eps = UnfoldedParameter(1 / 81, 2 * math.pi)
    sys = model_system([0.1, -0.1], [0.1, -0.1], RES)
    fi = formal_invariants(sys, eps)
    assert fi.mu[0, 1] - fi.mu[1, 1] == pytest.approx(1, abs=1e-12)
    with pytest.raises(ResonanceError):
        local_floquet_basis(sys, eps, "R", fi=fi)
    with pytest.raises(ResonanceError):
        local_floquet_basis(sys, ZERO, "R")


# ---------------------------------------------------------------- branches


def test_branch_state_counts_turns():
    eps = UnfoldedParameter(1e-2, 0.0)
    st0 = BranchState.start(eps, 0.5)
    pts = 0.5 * np.exp(1j * np.linspace(0, 2 * math.pi, 9)[1:])
    end = st0.walk(pts)[-1]
    np.testing.assert_allclose(end.logs - st0.logs, [2j * math.pi, 2j * math.pi], atol=1e-12)
    fi = FormalInvariants.from_model(L0, L1, eps)
    ratio = np.diag(model_solution(fi, eps, 0.5, end)) / np.diag(model_solution(fi, eps, 0.5, st0))
    np.testing.assert_allclose(ratio, np.exp(2j * math.pi * (fi.mu[:, 0] + fi.mu[:, 1])), rtol=1e-10)
