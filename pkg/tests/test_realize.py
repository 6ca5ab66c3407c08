import math

import numpy as np
import pytest

from unfoldstokes.errors import ContractionError, ResonanceError
from unfoldstokes.geometry import x_of_t
from unfoldstokes.realize import (birkhoff_factorize, cauchy_split, fit_polynomial_system, jump_residual,
                                  model_log_frame, realization_geometry)
from unfoldstokes.stokes import StokesCollection
from unfoldstokes.systems import ZERO, FormalInvariants, UnfoldedParameter, formal_invariants

EPS = UnfoldedParameter(1e-2, 2 * math.pi)


def _target(eps, C12=0.3 + 0.1j, C21=-0.2):
    fi = FormalInvariants.from_model([1, -1], [0.3, 0.1], eps)
    return fi, StokesCollection(eps, np.array([[1, C12], [0, 1]]), np.array([[1, 0], [C21, 1]]), fi)


@pytest.fixture(scope="module")
def factored():
    fi, target = _target(EPS)
    return birkhoff_factorize(fi, target, EPS, max_nu=12)[2]


@pytest.mark.parametrize("eps", [EPS, ZERO], ids=["eps", "zero"])
def test_log_frame_solves_the_model(eps):
    # d log F / dt = Lambda(x), since dx/dt = x^2 - eps
    fi, _ = _target(eps)
    geo, _ = realization_geometry(fi, eps)
    u, s, h = np.array([2.0, -3.0, 0.5]), np.array([0.1, -0.2, 0.0]), 1e-5
    d = model_log_frame(fi, geo, u + h, s) - model_log_frame(fi, geo, u - h, s)
    dt = geo.t_of(u + h, s) - geo.t_of(u - h, s)
    x = x_of_t(eps, geo.t_of(u, s))
    expected = fi.lam[None, :, 0] + fi.lam[None, :, 1] * x[:, None]
    assert np.max(np.abs(d / dt[:, None] - expected)) < 1e-8


def test_norms_contract_quadratically(factored):
    n = factored.norms
    assert n[-1] < 1e-12 and factored.nu <= 12
    for a, b in zip(n, n[1:]):
        assert b < 2 * a * a


def test_cauchy_split_reproduces_the_jump(factored):
    # Z_U^2 - Z_D^2 = Z^1 on the lens, sampled on the (inner) level-2 contour
    lv = factored.levels[1]["D"]
    x, u, s = lv.x[::37], lv.u[::37], lv.sigma[::37]
    diff = cauchy_split(factored, 2, "U", x) - cauchy_split(factored, 2, "D", x) - factored.jump(u, s)
    assert np.max(np.abs(diff)) < 1e-9
    with pytest.raises(ValueError):
        cauchy_split(factored, 1, "D", x)


def test_factorization_reproduces_the_jump(factored):
    res = jump_residual(factored)
    assert set(res) == {"L", "R", "C"}
    assert max(res.values()) < 1e-10


def test_refit_system_keeps_formal_invariants(factored):
    system, info = fit_polynomial_system(factored)
    assert info["interior_mismatch"] < 1e-10
    np.testing.assert_allclose(formal_invariants(system, EPS).lam, factored.fi.lam, atol=1e-12)


def test_trivial_collection_realizes_the_model():
    fi, target = _target(EPS, 0, 0)
    _, _, state = birkhoff_factorize(fi, target, EPS)
    assert state.nu == 1 and state.norms == [0.0]
    system, _ = fit_polynomial_system(state, samples=64)
    A = system.at_eps(EPS.eps)(0.2 + 0.1j)
    np.testing.assert_allclose(A, np.diag(fi.lam[:, 0] + fi.lam[:, 1] * (0.2 + 0.1j)), atol=1e-13)


def test_failures_are_reported():
    fi, target = _target(EPS)
    with pytest.raises(ContractionError):
        birkhoff_factorize(fi, target, EPS, limit=1e-30, retries=0)
    fi0, _ = _target(ZERO)
    with pytest.raises(ResonanceError):
        birkhoff_factorize(fi0, target, EPS)
