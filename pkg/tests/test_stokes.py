import cmath
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unfoldstokes.errors import MalformedInput, ResonanceError
from unfoldstokes.stokes import (StokesCollection, canonicalize, diagonalizer_T, distance,
                                 equivalent, extract_stokes, ladder_limit, log_term_predicates,
                                 reducibility_analysis, summability_gap)
from unfoldstokes.systems import ZERO, FormalInvariants, UnfoldedParameter, model_system, system_from_matrices

cplx = st.complex_numbers(max_magnitude=3, min_magnitude=0.05, allow_nan=False, allow_infinity=False)
LADDER = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4]


@st.composite
def collections(draw, n=None):
    n = n or draw(st.integers(2, 4))
    CR, CL = np.eye(n, dtype=complex), np.eye(n, dtype=complex)
    for i in range(n):
        for j in range(i + 1, n):
            CR[i, j] = draw(cplx)
            CL[j, i] = draw(cplx)
    return StokesCollection(ZERO, CR, CL)


def _conj(sc, k):
    return sc.with_matrices(k[:, None] * sc.C_R / k[None, :], k[:, None] * sc.C_L / k[None, :])


# ---------------------------------------------------------------- gauge


@given(collections(), st.lists(cplx, min_size=4, max_size=4))
def test_canonical_form_is_gauge_invariant(sc, k):
    k = np.array(k[: sc.n])
    other = _conj(sc, k)
    assert distance(sc, other) < 1e-10
    w = equivalent(sc, other)
    assert w is not None
    np.testing.assert_allclose(w.K[:, None] * sc.C_R / w.K[None, :], other.C_R, atol=1e-9)


@given(collections(n=3))
def test_inequivalent_collections_are_separated(sc):
    # C_R12 C_L21 is a gauge invariant
    bump = np.zeros((3, 3), complex)
    bump[1, 0] = 0.25
    assert equivalent(sc, sc.with_matrices(sc.C_R, sc.C_L + bump)) is None


def test_canonicalize_sets_leading_entries():
    sc = StokesCollection(ZERO, np.array([[1, 2 + 1j, 0.5], [0, 1, -3], [0, 0, 1]]), np.eye(3))
    c, w = canonicalize(sc)
    assert c.C_R[0, 1] == 1 and c.C_R[1, 2] == 1
    np.testing.assert_allclose(np.abs(w.K[:, None] * sc.C_R / w.K[None, :] - c.C_R).max(), 0, atol=1e-14)


def test_serialization_roundtrip():
    eps = UnfoldedParameter(1e-2, 2 * math.pi)
    fi = FormalInvariants.from_model([1, -1], [0.3, 0.1], eps)
    sc = StokesCollection(eps, np.array([[1, 0.3j], [0, 1]]), np.array([[1, 0], [2, 1]]), fi)
    back = StokesCollection.from_dict(sc.to_dict())
    assert distance(sc, back) == 0
    np.testing.assert_allclose(back.fi.lam, fi.lam)
    for bad in ({"C_R": [[1]]}, {"C_R": [[[1, 0]]], "C_L": [[[1, 0], [0, 0]]]}):
        with pytest.raises(MalformedInput):
            StokesCollection.from_dict(bad)


# ---------------------------------------------------------------- diagonalizers


@settings(max_examples=60)
@given(collections(), st.lists(st.floats(-3, 3), min_size=8, max_size=8))
def test_diagonalizer_conjugates_CD_to_D(sc, phases):
    n = sc.n
    logd = 1j * np.array(phases[:n]) + 0.2 * np.array(phases[n:2 * n])
    D = np.exp(logd)
    gaps = np.abs(1 - D[:, None] / D[None, :])[~np.eye(n, dtype=bool)]
    if gaps.min() < 1e-2:
        return
    for C, which in ((sc.C_R, "R"), (sc.C_L, "L")):
        res = diagonalizer_T(C, D, which=which)
        T = res.T
        assert res.check < 1e-9 * max(1, np.abs(T).max()) ** 2
        np.testing.assert_allclose(np.linalg.solve(T, C @ np.diag(D) @ T), np.diag(D),
                                   atol=1e-8 * max(1, np.abs(T).max()) ** 2)
        # log-D input gives the same T
        np.testing.assert_allclose(diagonalizer_T(C, None, which=which, log_D=logd).T, T, rtol=1e-12)


def test_diagonalizer_rejects_resonance():
    with pytest.raises(ResonanceError):
        diagonalizer_T(np.array([[1, 0.4], [0, 1]]), np.array([1.0, 1.0]), which="R")


class _Ratios:
    def __init__(self, d):
        self.d = d

    def delta(self, s, j, which):
        return self.d[s] / self.d[j]


def test_log_term_limit_through_intermediate_ratio():
    # resonance Delta_13,R -> 1 while Delta_23,R grows: the obstruction is C13 - C12 C23
    C = np.array([[1, 0.7 - 0.2j, 0.4j], [0, 1, 1.3], [0, 0, 1]])
    big = 1e7
    d = np.array([1.0, big, 1.0 + 1e-9])
    eps = UnfoldedParameter(1e-2, 2 * math.pi)
    sc = StokesCollection(eps, C, np.eye(3))
    out = log_term_predicates(sc, (1, 3, "R"), fi_along=_Ratios(d))
    assert out["blocks"] == "w_3,R"
    assert out["value"] == pytest.approx(C[0, 2] - C[0, 1] * C[1, 2], abs=1e-14)
    # the recursion itself approaches the same value
    T = diagonalizer_T(C, d, which="R").T
    assert (1 - d[0] / d[2]) * T[0, 2] == pytest.approx(out["value"], rel=1e-5)
    assert log_term_predicates(sc, (2, 1, "R"))["status"] == "inconclusive"
    assert log_term_predicates(sc, (1, 3, "R"))["status"] == "inconclusive"


# ---------------------------------------------------------------- extraction


def test_two_routes_agree():
    s = model_system([1, -1], [0.3, 0.1], np.array([[0.2, 0.5], [0.3, -0.1]]))
    eps = UnfoldedParameter(1e-2, 2 * math.pi + 0.2)
    a = extract_stokes(s, eps)
    b = extract_stokes(s, eps, route="mixed")
    scale = max(np.abs(canonicalize(a)[0].C_L).max(), 1.0)
    assert distance(a, b) / scale < 1e-5
    with pytest.raises(MalformedInput):
        extract_stokes(s, ZERO, route="mixed")


def test_constant_gauge_does_not_change_the_collection():
    s = model_system([1, -1], [0.3, 0.1], np.array([[0.2, 0.5], [0.3, -0.1]]))
    eps = UnfoldedParameter(1e-2, 2 * math.pi + 0.2)
    G = np.array([[1, 0.3], [0.2j, 1]])
    assert distance(extract_stokes(s, eps), extract_stokes(s.conjugated(G), eps)) < 1e-8


def test_ladder_limit_matches_extraction_at_zero(ladder_system):
    cols = [extract_stokes(ladder_system, UnfoldedParameter(m, 2 * math.pi)) for m in LADDER]
    at_zero = extract_stokes(ladder_system, ZERO)
    assert distance(ladder_limit(LADDER, cols), at_zero) < 1e-8


def test_extraction_near_resonance_is_guarded():
    s = model_system([0.1, -0.1], [0.1, -0.1], np.array([[0.05, 0.3], [0.2, -0.05]]))
    with pytest.raises(ResonanceError) as info:
        extract_stokes(s, UnfoldedParameter(1 / 81, 2 * math.pi))
    # exact resonance: both orderings of the pair have zero margin
    assert set(info.value.pair[:2]) == {1, 2} and info.value.pair[2] == "R"


def _kummer_elementary(a, b):
    # from the trace of the monodromy around z = infinity: tr M = 1 + e^{2 pi i b}
    return (1 - cmath.exp(-2j * math.pi * a)) * (1 - cmath.exp(2j * math.pi * (b - a)))


@pytest.mark.parametrize("a,b", [(0.3 + 0.2j, 1.7 - 0.1j), (-0.3 + 0.5j, 0.6 + 0.2j)])
def test_kummer_product_two_oracles(a, b):
    gamma_form = complex(4 * mp.pi ** 2 * mp.exp(1j * mp.pi * (b - 2 * a))
                         / (mp.gamma(a) * mp.gamma(1 - a) * mp.gamma(b - a) * mp.gamma(1 + a - b)))
    assert _kummer_elementary(a, b) == pytest.approx(gamma_form, rel=1e-12)
    s = system_from_matrices({(0, 0): np.array([[0, 1], [0, -1]], complex),
                              (1, 0): np.array([[0, 0], [a, b]], complex)})
    sc = extract_stokes(s, ZERO)
    assert sc.C_R[0, 1] * sc.C_L[1, 0] == pytest.approx(_kummer_elementary(a, b), rel=1e-8)


# ---------------------------------------------------------------- families


def test_summability_gap_on_exact_exponential():
    a = 0.3
    fam = {}
    for m in LADDER:
        base = StokesCollection(ZERO, np.array([[1, 1.0], [0, 1]]), np.array([[1, 0], [2.0, 1]]))
        moved = base.with_matrices(base.C_R, base.C_L + np.array([[0, 0], [math.exp(-a / math.sqrt(m)), 0]]))
        fam[m] = (base, moved)
    out = summability_gap(fam)
    assert out["slope"] == pytest.approx(a, rel=1e-3)
    assert out["r2"] > 0.999 and out["flag"] == "exponential"
    same = summability_gap({m: (p[0], p[0]) for m, p in fam.items()})
    assert same["identically_summable"]
    with pytest.raises(MalformedInput):
        summability_gap({1e-2: fam[1e-2]})


def test_reducibility_reports_unstable_entries():
    eps = UnfoldedParameter(1e-2, 2 * math.pi)
    fam = []
    for v in (0.5, 1e-12, 0.3):
        CR = np.eye(3, dtype=complex)
        CR[0, 1], CR[1, 2] = 0.2, v
        fam.append(StokesCollection(eps, CR, np.eye(3)))
    out = reducibility_analysis(fam)
    assert out["unstable"] == [(2, 3)]
    assert out["blocks"] == [[1, 2], [3]]
    assert out["trivial_columns"] == [1, 3]
    assert out["trivial_rows"] == [2, 3]
