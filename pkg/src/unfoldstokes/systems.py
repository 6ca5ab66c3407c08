"""Unfolded families p(eps, x) y' = B(eps, x) y and their formal invariants.

Indices are 0-based throughout the code (the mathematical literature counts
from 1). Singular points are labelled "L" (x_L = sqrt(eps)) and "R"
(x_R = -sqrt(eps)); column 0 of `mu` is L and column 1 is R.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EigenvalueCollision, MalformedInput, ResonantLeadingMatrix

SCHEMA_FORMAT = 1
SIDES = ("L", "R")


def side_index(which: str) -> int:
    try:
        return SIDES.index(which)
    except ValueError:
        raise ValueError(f"singular point label must be 'L' or 'R', got {which!r}") from None


@dataclass(frozen=True)
class UnfoldedParameter:
    """A point of the ramified parameter space: eps = modulus * exp(i * argument).

    The argument is not reduced modulo 2 pi, so two parameters whose arguments
    differ by 2 pi are different points with swapped singular points.
    """

    modulus: float
    argument: float = 0.0

    def __post_init__(self):
        if not (self.modulus >= 0 and math.isfinite(self.modulus)):
            raise MalformedInput(f"modulus must be finite and nonnegative, got {self.modulus}")
        if not math.isfinite(self.argument):
            raise MalformedInput("argument must be finite")

    @classmethod
    def from_sqrt(cls, w: complex, reference_argument: float | None = None) -> "UnfoldedParameter":
        """Parameter whose sqrt_eps equals w, with argument closest to the reference."""
        arg = 2.0 * float(np.angle(w))
        if reference_argument is not None:
            arg += 4.0 * math.pi * round((reference_argument - arg) / (4.0 * math.pi))
        return cls(abs(w) ** 2, arg)

    @property
    def is_zero(self) -> bool:
        return self.modulus == 0.0

    @property
    def eps(self) -> complex:
        return self.modulus * complex(math.cos(self.argument), math.sin(self.argument))

    @property
    def sqrt_eps(self) -> complex:
        half = 0.5 * self.argument
        return math.sqrt(self.modulus) * complex(math.cos(half), math.sin(half))

    @property
    def x_L(self) -> complex:
        return self.sqrt_eps

    @property
    def x_R(self) -> complex:
        return -self.sqrt_eps

    def point(self, which: str) -> complex:
        return self.x_L if side_index(which) == 0 else self.x_R

    def turned(self, turns: int = 1) -> "UnfoldedParameter":
        return UnfoldedParameter(self.modulus, self.argument + 2.0 * math.pi * turns)

    def scaled(self, modulus: float) -> "UnfoldedParameter":
        return UnfoldedParameter(modulus, self.argument)

    def to_dict(self) -> dict:
        return {"modulus": float(self.modulus), "argument": float(self.argument)}

    @classmethod
    def from_dict(cls, d: dict) -> "UnfoldedParameter":
        try:
            return cls(float(d["modulus"]), float(d.get("argument", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInput(f"bad parameter specification {d!r}: {exc}") from None


ZERO = UnfoldedParameter(0.0, 0.0)


class XPolynomial:
    """Matrix polynomial in x at a fixed eps, evaluated by Horner's rule."""

    def __init__(self, coeffs: np.ndarray):
        # coeffs[a] is the n x n coefficient of x**a
        self.coeffs = np.asarray(coeffs, dtype=complex)

    def __call__(self, x: complex) -> np.ndarray:
        out = self.coeffs[-1].copy()
        for c in self.coeffs[-2::-1]:
            out = out * x + c
        return out

    def derivative(self, x: complex) -> np.ndarray:
        n = self.coeffs.shape[1]
        if len(self.coeffs) == 1:
            return np.zeros((n, n), complex)
        d = self.coeffs[1:] * np.arange(1, len(self.coeffs))[:, None, None]
        return XPolynomial(d)(x)


@dataclass(frozen=True, eq=False)
class UnfoldedSystem:
    """The family p(eps, x) y' = B(eps, x) y with B a bivariate polynomial matrix.

    `coeffs[i, j, a, b]` multiplies x**a * eps**b in B[i, j]. For k = 1 the
    polynomial is p = x**2 - eps. For k > 1, p = x**(k+1) + sum_m e_m(eps) x**m
    where `unfolding[m]` holds the eps-coefficients of e_m (default e_0 = -eps).
    """

    coeffs: np.ndarray
    k: int = 1
    unfolding: tuple | None = None

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 4 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
            raise MalformedInput(f"coefficient tensor must have shape (n, n, dx, de), got {c.shape}")
        if self.k < 1:
            raise MalformedInput("rank k must be positive")
        object.__setattr__(self, "coeffs", c)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    def at_eps(self, eps: complex) -> XPolynomial:
        powers = eps ** np.arange(self.coeffs.shape[3])
        xc = np.tensordot(self.coeffs, powers, axes=([3], [0]))  # (n, n, dx)
        return XPolynomial(np.moveaxis(xc, 2, 0))

    def matrix(self, eps: complex, x: complex) -> np.ndarray:
        return self.at_eps(eps)(x)

    def dmatrix_dx(self, eps: complex, x: complex) -> np.ndarray:
        return self.at_eps(eps).derivative(x)

    def unfolding_coefficients(self, eps: complex) -> np.ndarray:
        """Coefficients e_0..e_{k-1} of p at this eps."""
        if self.unfolding is None:
            e = np.zeros(self.k, complex)
            e[0] = -eps
            return e
        return np.array([np.polyval(np.asarray(c, complex)[::-1], eps) for c in self.unfolding])

    def p(self, eps: complex, x):
        e = self.unfolding_coefficients(eps)
        return x ** (self.k + 1) + sum(e[m] * x**m for m in range(self.k))

    def p_roots(self, eps: complex) -> np.ndarray:
        e = self.unfolding_coefficients(eps)
        poly = np.zeros(self.k + 2, complex)
        poly[0] = 1.0
        for m in range(self.k):
            poly[self.k + 1 - m] = e[m]
        return np.roots(poly)

    # transformations used for normalization and gauge tests

    def rotated(self, phi: float) -> "UnfoldedSystem":
        """System in the coordinate x' = e^{i phi} x (so eps' = e^{2 i phi} eps).

        For k = 1 this is B'(eps', x') = e^{i phi} B(e^{-2i phi} eps', e^{-i phi} x'),
        which multiplies the leading eigenvalues by e^{i phi}.
        """
        if self.k != 1:
            raise NotImplementedError("rotation is only implemented for k = 1")
        a = np.arange(self.coeffs.shape[2])[:, None]
        b = np.arange(self.coeffs.shape[3])[None, :]
        factor = np.exp(1j * phi * (1 - a - 2 * b))
        return UnfoldedSystem(self.coeffs * factor, self.k, self.unfolding)

    def permuted(self, perm: Sequence[int]) -> "UnfoldedSystem":
        perm = list(perm)
        return UnfoldedSystem(self.coeffs[np.ix_(perm, perm)], self.k, self.unfolding)

    def conjugated(self, G: np.ndarray) -> "UnfoldedSystem":
        """Constant gauge y = G z, giving B' = G^{-1} B G."""
        G = np.asarray(G, complex)
        Gi = np.linalg.inv(G)
        c = np.einsum("ij,jkab,kl->ilab", Gi, self.coeffs, G)
        return UnfoldedSystem(c, self.k, self.unfolding)

    def to_document(self) -> dict:
        n = self.n
        B = [[[[[float(v.real), float(v.imag)] for v in row_e] for row_e in self.coeffs[i, j]]
              for j in range(n)] for i in range(n)]
        doc = {"format": SCHEMA_FORMAT, "n": n, "k": self.k, "B": B}
        if self.unfolding is not None:
            doc["unfolding"] = [[[float(v.real), float(v.imag)] for v in c] for c in self.unfolding]
        return doc


def _complex_entry(v, where: str) -> complex:
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(t, (int, float)) for t in v):
        return complex(v[0], v[1])
    raise MalformedInput(f"{where}: complex numbers are written as [re, im], got {v!r}")


def leading_eigenvalues(sys: UnfoldedSystem) -> np.ndarray:
    return np.linalg.eigvals(sys.matrix(0.0, 0.0))


def _check_distinct(eigs: np.ndarray, tol: float) -> None:
    n = len(eigs)
    scale = max(1.0, float(np.max(np.abs(eigs)))) if n else 1.0
    for i in range(n):
        for j in range(i + 1, n):
            if abs(eigs[i] - eigs[j]) <= tol * scale:
                raise ResonantLeadingMatrix(
                    f"resonant leading matrix: B(0,0) has repeated eigenvalue {eigs[i]:.6g}"
                )


def parse_system(document, collision_tol: float = 1e-8) -> UnfoldedSystem:
    """Build a system from a JSON string or already-decoded mapping."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise MalformedInput(f"not valid JSON: {exc}") from None
    if not isinstance(document, dict):
        raise MalformedInput("system document must be a JSON object")
    fmt = document.get("format", SCHEMA_FORMAT)
    if fmt != SCHEMA_FORMAT:
        raise MalformedInput(f"unsupported format {fmt!r}, expected {SCHEMA_FORMAT}")
    try:
        n = int(document["n"])
        k = int(document.get("k", 1))
        rows = document["B"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"missing or invalid field: {exc}") from None
    if n < 1 or not isinstance(rows, list) or len(rows) != n:
        raise MalformedInput(f"B must be a list of {n} rows")
    dx = de = 0
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != n:
            raise MalformedInput(f"row {i} of B must have {n} entries")
        for j, entry in enumerate(row):
            if not isinstance(entry, list) or not entry:
                raise MalformedInput(f"B[{i}][{j}] must be a nonempty (deg_x, deg_eps) table")
            dx = max(dx, len(entry))
            for line in entry:
                if not isinstance(line, list):
                    raise MalformedInput(f"B[{i}][{j}] rows must be lists over eps degree")
                de = max(de, len(line))
    coeffs = np.zeros((n, n, dx, max(de, 1)), complex)
    for i, row in enumerate(rows):
        for j, entry in enumerate(row):
            for a, line in enumerate(entry):
                for b, v in enumerate(line):
                    coeffs[i, j, a, b] = _complex_entry(v, f"B[{i}][{j}][{a}][{b}]")
    unfolding = None
    if "unfolding" in document:
        try:
            unfolding = tuple(
                np.array([_complex_entry(v, "unfolding") for v in c], complex) for c in document["unfolding"]
            )
        except TypeError:
            raise MalformedInput("unfolding must be a list of coefficient lists") from None
        if len(unfolding) != k:
            raise MalformedInput(f"unfolding must list {k} coefficient polynomials")
    elif k != 1:
        unfolding = None
    sys = UnfoldedSystem(coeffs, k, unfolding)
    _check_distinct(leading_eigenvalues(sys), collision_tol)
    return sys


def system_from_matrices(terms: dict, n: int | None = None) -> UnfoldedSystem:
    """Convenience builder: terms maps (deg_x, deg_eps) -> n x n array."""
    if not terms:
        raise MalformedInput("no terms given")
    mats = {key: np.asarray(v, complex) for key, v in terms.items()}
    n = n or next(iter(mats.values())).shape[0]
    dx = max(a for a, _ in mats) + 1
    de = max(b for _, b in mats) + 1
    coeffs = np.zeros((n, n, dx, de), complex)
    for (a, b), m in mats.items():
        coeffs[:, :, a, b] += m
    return UnfoldedSystem(coeffs)


def model_system(lambda0, lambda1, residual=None) -> UnfoldedSystem:
    """B = diag(lambda0) + diag(lambda1) x + (x^2 - eps) * residual.

    `residual` is either a constant n x n matrix or a dict (deg_x, deg_eps) -> matrix.
    """
    lambda0 = np.asarray(lambda0, complex)
    lambda1 = np.asarray(lambda1, complex)
    terms = {(0, 0): np.diag(lambda0), (1, 0): np.diag(lambda1)}
    if residual is not None:
        parts = residual if isinstance(residual, dict) else {(0, 0): residual}
        for (a, b), R in parts.items():
            R = np.asarray(R, complex)
            terms[(a + 2, b)] = terms.get((a + 2, b), 0) + R
            terms[(a, b + 1)] = terms.get((a, b + 1), 0) - R
    return system_from_matrices(terms, len(lambda0))


# ordering and rotation


def ordering_permutation(eigs: np.ndarray) -> list[int]:
    """Decreasing real part; ties broken by increasing imaginary part."""
    return sorted(range(len(eigs)), key=lambda i: (-eigs[i].real, eigs[i].imag))


def ordering_rotation(sys: UnfoldedSystem, margin: float = 0.05) -> tuple[list[int], float]:
    """Permutation sorting the leading eigenvalues and the smallest angle phi >= 0
    such that, in the coordinate e^{i phi} x, Re(lam_q - lam_j) > 0 for q < j.

    `margin` is an angular margin: every rotated difference must have argument
    in [-pi/2 + margin, pi/2 - margin]. It is reduced automatically if the
    feasible window is narrower than twice the margin.
    """
    eigs = leading_eigenvalues(sys)
    perm = ordering_permutation(eigs)
    ordered = eigs[perm]
    args = [np.angle(ordered[q] - ordered[j]) for q in range(len(ordered)) for j in range(q + 1, len(ordered))]
    if not args:
        return perm, 0.0
    lower = max(-math.pi / 2 - a for a in args)
    upper = min(math.pi / 2 - a for a in args)
    m = min(margin, 0.5 * (upper - lower))
    if lower + m <= 0.0 <= upper - m:
        return perm, 0.0
    return perm, float(lower + m)


def normalized(sys: UnfoldedSystem, margin: float = 0.05) -> tuple[UnfoldedSystem, list[int], float]:
    """Apply ordering_rotation: returns the permuted and rotated system."""
    perm, phi = ordering_rotation(sys, margin)
    out = sys.permuted(perm)
    if phi:
        out = out.rotated(phi)
    return out, perm, phi


def strictly_ordered(values: np.ndarray, tol: float = 0.0) -> bool:
    n = len(values)
    return all((values[q] - values[j]).real > tol for q in range(n) for j in range(q + 1, n))


# eigenvalue branches


def _min_separation(values: np.ndarray) -> float:
    n = len(values)
    if n < 2:
        return math.inf
    d = np.abs(values[:, None] - values[None, :]) + np.diag(np.full(n, np.inf))
    return float(d.min())


def match_to(reference: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Permutation idx with values[idx] closest to reference (Hungarian assignment)."""
    cost = np.abs(reference[:, None] - values[None, :])
    rows, cols = linear_sum_assignment(cost)
    idx = np.empty(len(reference), int)
    idx[rows] = cols
    return idx


def follow_eigenvalues(matrix_of_t: Callable[[float], np.ndarray], start: np.ndarray,
                       collision_tol: float = 1e-8, initial_step: float = 0.125):
    """Continue eigenvalue branches of matrix_of_t(t) from t = 0 (values `start`) to t = 1.

    Returns (values at t=1, eigenvectors at t=1 in branch order, smallest separation seen).
    """
    cur = np.asarray(start, complex)
    t, h = 0.0, initial_step
    worst = _min_separation(cur)
    while t < 1.0:
        h = min(h, 1.0 - t)
        vals = np.linalg.eigvals(matrix_of_t(t + h))
        new = vals[match_to(cur, vals)]
        sep = min(_min_separation(cur), _min_separation(new))
        if sep <= collision_tol:
            raise EigenvalueCollision(
                f"eigenvalue collision along branch continuation (separation {sep:.3g} at t={t + h:.4g})"
            )
        if np.max(np.abs(new - cur)) > 0.3 * sep:
            h *= 0.5
            if h < 1e-12:
                raise EigenvalueCollision("branch continuation step underflow")
            continue
        cur, t = new, t + h
        worst = min(worst, sep)
        h *= 1.6
    vals, vecs = np.linalg.eig(matrix_of_t(1.0))
    idx = match_to(cur, vals)
    return vals[idx], vecs[:, idx], worst


def reference_eigenvalues(sys: UnfoldedSystem) -> np.ndarray:
    eigs = leading_eigenvalues(sys)
    return eigs[ordering_permutation(eigs)]


def branch_eigen(sys: UnfoldedSystem, eps: complex, x: complex, collision_tol: float = 1e-8):
    """Eigenvalues/eigenvectors of B(eps, x), ordered as the continued branches from (0, 0)."""
    ref = reference_eigenvalues(sys)
    _check_distinct(ref, collision_tol)
    return follow_eigenvalues(lambda t: sys.matrix(t * eps, t * x), ref, collision_tol)


def eigenvalue_derivatives_at_origin(sys: UnfoldedSystem) -> np.ndarray:
    """d nu_j / dx at (0, 0) from left/right eigenvectors (implicit function theorem)."""
    B0 = sys.matrix(0.0, 0.0)
    Bx = sys.dmatrix_dx(0.0, 0.0)
    vals, right = np.linalg.eig(B0)
    left = np.linalg.inv(right)  # rows are left eigenvectors, normalized against right
    idx = match_to(reference_eigenvalues(sys), vals)
    out = np.array([left[i] @ Bx @ right[:, i] for i in range(len(vals))])
    return out[idx]


def _cauchy_derivatives(sys, eps, x0, values0, order, radius, collision_tol, points=64):
    """Taylor coefficients nu^(q)(x0)/q! for q <= order, branch-tracked on a circle."""
    samples = np.empty((points, len(values0)), complex)
    cur = values0
    prev_x = x0
    for m in range(points):
        x = x0 + radius * np.exp(2j * math.pi * m / points)
        a = prev_x
        cur, _, _ = follow_eigenvalues(lambda t, a=a, x=x: sys.matrix(eps, a + t * (x - a)), cur, collision_tol)
        samples[m] = cur
        prev_x = x
    fft = np.fft.fft(samples, axis=0) / points
    return np.array([fft[q] / radius**q for q in range(order + 1)])


def _cluster_roots(roots: np.ndarray, tol: float):
    clusters: list[list[complex]] = []
    for r in roots:
        for c in clusters:
            if abs(c[0] - r) <= tol:
                c.append(r)
                break
        else:
            clusters.append([r])
    return [(complex(np.mean(c)), len(c)) for c in clusters]


@dataclass(frozen=True, eq=False)
class FormalInvariants:
    """Formal invariants lam[j, q] (coefficient of x**q in lambda_j) at one parameter.

    For k = 1 and eps != 0, also the exponents mu[j, 0] (at x_L) and mu[j, 1] (at x_R).
    The model monodromies are D_L = exp(2 pi i U_L) and D_R = exp(-2 pi i U_R); they
    are stored through their logarithms to avoid overflow for tiny |eps|.
    """

    eps: UnfoldedParameter
    lam: np.ndarray
    mu: np.ndarray | None = None
    k: int = 1
    min_separation: float = math.inf

    @classmethod
    def from_model(cls, lambda0, lambda1, eps: UnfoldedParameter) -> "FormalInvariants":
        lam = np.stack([np.asarray(lambda0, complex), np.asarray(lambda1, complex)], axis=1)
        mu = None
        if not eps.is_zero:
            mu = np.stack([(lam[:, 0] + lam[:, 1] * x) / (2 * x) for x in (eps.x_L, eps.x_R)], axis=1)
        return cls(eps, lam, mu, 1)

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    def Lambda(self, x: complex) -> np.ndarray:
        """Diagonal entries lambda_j(eps, x)."""
        return np.polyval(self.lam[:, ::-1].T, x) if self.lam.shape[1] > 1 else self.lam[:, 0].copy()

    def _require_mu(self):
        if self.mu is None:
            raise ValueError("exponents are only defined for k = 1 and eps != 0")
        return self.mu

    def log_D(self, which: str) -> np.ndarray:
        mu = self._require_mu()
        i = side_index(which)
        return (2j * math.pi if i == 0 else -2j * math.pi) * mu[:, i]

    def D(self, which: str) -> np.ndarray:
        return np.diag(np.exp(self.log_D(which)))

    @property
    def D_L(self) -> np.ndarray:
        return self.D("L")

    @property
    def D_R(self) -> np.ndarray:
        return self.D("R")

    @property
    def Lambda1_exp(self) -> np.ndarray:
        return np.diag(np.exp(2j * math.pi * self.lam[:, 1]))

    def delta(self, s: int, j: int, which: str) -> complex:
        logd = self.log_D(which)
        return complex(np.exp(logd[s] - logd[j]))

    def delta_table(self, which: str) -> np.ndarray:
        logd = self.log_D(which)
        return np.exp(logd[:, None] - logd[None, :])

    def to_dict(self) -> dict:
        def cpl(a):
            return [[float(v.real), float(v.imag)] for v in np.ravel(a)]

        out = {"eps": self.eps.to_dict(), "k": self.k, "lambda": [cpl(row) for row in self.lam]}
        if self.mu is not None:
            out["mu_L"] = cpl(self.mu[:, 0])
            out["mu_R"] = cpl(self.mu[:, 1])
            out["log_D_L"] = cpl(self.log_D("L"))
            out["log_D_R"] = cpl(self.log_D("R"))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FormalInvariants":
        try:
            eps = UnfoldedParameter.from_dict(d["eps"])
            lam = np.array([[_complex_entry(v, "lambda") for v in row] for row in d["lambda"]], complex)
        except (KeyError, TypeError) as exc:
            raise MalformedInput(f"bad formal invariants document: {exc}") from None
        if lam.ndim != 2 or lam.shape[1] != 2:
            raise MalformedInput("only k = 1 invariants (two coefficients per eigenvalue) can be loaded")
        return cls.from_model(lam[:, 0], lam[:, 1], eps)


def formal_invariants(sys: UnfoldedSystem, eps: UnfoldedParameter, collision_tol: float = 1e-8,
                      cauchy_radius: float = 1e-2) -> FormalInvariants:
    """Interpolate the eigenvalues of B(eps, x) at the roots of p by a degree-k polynomial.

    Branches are continued from the ordered eigenvalues of B(0, 0) along the
    straight segment (t eps, t x_root). Multiple roots use derivatives of the
    eigenvalues (implicit-function formula for k = 1, Cauchy integrals otherwise).
    """
    ref = reference_eigenvalues(sys)
    _check_distinct(ref, collision_tol)
    k = sys.k
    n = sys.n
    if k == 1:
        if eps.is_zero:
            lam = np.stack([ref, eigenvalue_derivatives_at_origin(sys)], axis=1)
            return FormalInvariants(eps, lam, None, 1, _min_separation(ref))
        e = eps.eps
        nu = {}
        worst = math.inf
        for which in SIDES:
            x = eps.point(which)
            vals, _, sep = follow_eigenvalues(lambda t, x=x: sys.matrix(t * e, t * x), ref, collision_tol)
            nu[which] = vals
            worst = min(worst, sep)
        w = eps.sqrt_eps
        lam = np.stack([(nu["L"] + nu["R"]) / 2, (nu["L"] - nu["R"]) / (2 * w)], axis=1)
        mu = np.stack([nu["L"] / (2 * eps.x_L), nu["R"] / (2 * eps.x_R)], axis=1)
        return FormalInvariants(eps, lam, mu, 1, worst)

    e = eps.eps
    roots = sys.p_roots(e)
    scale = max(1.0, float(np.max(np.abs(roots))))
    clusters = _cluster_roots(roots, 1e-7 * scale)
    rows, rhs = [], []
    worst = math.inf
    for r, mult in clusters:
        vals, _, sep = follow_eigenvalues(lambda t: sys.matrix(t * e, t * r), ref, collision_tol)
        worst = min(worst, sep)
        if mult == 1:
            taylor = vals[None, :]
        else:
            radius = cauchy_radius * max(sep, 1e-3)
            taylor = _cauchy_derivatives(sys, e, r, vals, mult - 1, radius, collision_tol)
            taylor[0] = vals
        for q in range(mult):
            row = np.zeros(k + 1, complex)
            for pw in range(q, k + 1):
                row[pw] = math.comb(pw, q) * r ** (pw - q)
            rows.append(row)
            rhs.append(taylor[q])
    lam = np.linalg.solve(np.array(rows), np.array(rhs)).T
    return FormalInvariants(eps, lam.reshape(n, k + 1), None, k, worst)


def delta(fi: FormalInvariants, s: int, j: int, which: str) -> complex:
    """Delta_{sj,l} = (D_l)_{ss} / (D_l)_{jj}."""
    return fi.delta(s, j, which)


def prenormalize(sys: UnfoldedSystem, eps: UnfoldedParameter, grid: Iterable[complex],
                 fi: FormalInvariants | None = None, step: float = 1e-4, stencil: int = 5,
                 normalization_tol: float = 1e-8, collision_tol: float = 1e-8):
    """Sample P(eps, x) and R(eps, x) of the prenormal form on a grid.

    P has the eigenvectors of B(eps, x) as columns (component j of column j set
    to 1) and R = (P^{-1} B P - Lambda - p P^{-1} dP/dx) / p. dP/dx uses a
    centred finite-difference stencil of 3 or 5 points with spacing `step`.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    fi = fi or formal_invariants(sys, eps, collision_tol)
    e = eps.eps

    def eigvecs(x, ref_vals=None):
        if ref_vals is None:
            vals, vecs, _ = branch_eigen(sys, e, x, collision_tol)
        else:
            vals, vecs = np.linalg.eig(sys.matrix(e, x))
            idx = match_to(ref_vals, vals)
            vals, vecs = vals[idx], vecs[:, idx]
            if _min_separation(vals) <= collision_tol:
                raise EigenvalueCollision(f"eigenvalue collision at x={x}")
        diag = np.diag(vecs)
        if np.any(np.abs(diag) < normalization_tol):
            j = int(np.argmin(np.abs(diag)))
            raise EigenvalueCollision(f"cannot normalize eigenvector {j} at x={x}: component {j} vanishes")
        return vals, vecs / diag[None, :]

    P_out, R_out = [], []
    offsets = [1, -1] if stencil == 3 else [1, -1, 2, -2]
    weights = {3: {1: 0.5, -1: -0.5}, 5: {1: 2 / 3, -1: -2 / 3, 2: -1 / 12, -2: 1 / 12}}[stencil]
    for x in grid:
        vals, P = eigvecs(x)
        dP = sum(weights[o] * eigvecs(x + o * step, vals)[1] for o in offsets) / step
        pval = sys.p(e, x)
        if abs(pval) < 1e-14:
            raise ValueError(f"grid point {x} is a root of p")
        Pinv = np.linalg.inv(P)
        R = (np.diag(vals) - np.diag(fi.Lambda(x))) / pval - Pinv @ dP
        P_out.append(P)
        R_out.append(R)
    return np.array(P_out), np.array(R_out)


def resonance_values(fi_fn: Callable[[UnfoldedParameter], FormalInvariants], pair: tuple, m_range,
                     region, seeds_per_decade: int = 4, arg_seeds: int = 12, tol: float = 1e-11,
                     max_iter: int = 60) -> list[tuple[UnfoldedParameter, tuple]]:
    """Parameters where mu_{q,l} - mu_{j,l} equals an integer m, by Newton in sqrt(eps).

    `region` is a SectorS-like object with attributes rho and window (argument
    interval) or a tuple (modulus_min, modulus_max, arg_min, arg_max). Roots are
    tagged (q, j, l, m) and deduplicated.
    """
    q, j, which = pair
    li = side_index(which)
    ms = list(m_range)
    if not ms:
        return []
    if isinstance(region, tuple):
        mod_lo, mod_hi, a_lo, a_hi = region
    else:
        mod_lo, mod_hi = region.rho * 1e-4, region.rho
        a_lo, a_hi = region.window
    if mod_hi <= mod_lo:
        return []

    def g(w, ref_arg, m):
        par = UnfoldedParameter.from_sqrt(w, ref_arg)
        mu = fi_fn(par).mu
        return mu[q, li] - mu[j, li] - m

    def inside(par):
        return mod_lo < par.modulus < mod_hi and a_lo < par.argument < a_hi

    radii = np.geomspace(math.sqrt(mod_lo), math.sqrt(mod_hi),
                         max(2, int(seeds_per_decade * math.log10(mod_hi / mod_lo) / 2) + 2))
    args = np.linspace(a_lo, a_hi, arg_seeds + 2)[1:-1]
    found: list[tuple[UnfoldedParameter, tuple]] = []
    for m in ms:
        for rad in radii:
            for a in args:
                w = rad * np.exp(0.5j * a)
                ok = False
                for _ in range(max_iter):
                    ref_arg = 2 * np.angle(w) + 4 * math.pi * round((a - 2 * np.angle(w)) / (4 * math.pi))
                    try:
                        f0 = g(w, ref_arg, m)
                        h = 1e-7 * abs(w)
                        df = (g(w + h, ref_arg, m) - g(w - h, ref_arg, m)) / (2 * h)
                    except Exception:
                        break
                    if df == 0 or not np.isfinite(df):
                        break
                    step = f0 / df
                    if abs(step) > 0.5 * abs(w):
                        step *= 0.5 * abs(w) / abs(step)
                    w = w - step
                    if abs(step) < tol * abs(w):
                        ok = True
                        break
                if not ok:
                    continue
                par = UnfoldedParameter.from_sqrt(w, a)
                if not inside(par):
                    continue
                if abs(g(w, par.argument, m)) > 1e-7 * max(1, abs(m)):
                    continue
                if any(abs(p.sqrt_eps - par.sqrt_eps) < 1e-8 * abs(par.sqrt_eps) and abs(p.argument - par.argument) < 1.0
                       and tag[3] == m for p, tag in found):
                    continue
                found.append((par, (q, j, which, m)))
    found.sort(key=lambda item: (item[1][3], item[0].modulus, item[0].argument))
    return found
