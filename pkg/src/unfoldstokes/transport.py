"""Analytic continuation of fundamental matrices along paths, Frobenius bases, monodromy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError, ResonanceError
from .geometry import (PathPlan, StripGeometry, circle_connector, connector, lens_base_point, monodromy_loop)
from .systems import FormalInvariants, UnfoldedParameter, UnfoldedSystem, side_index

TWO_PI = 2.0 * math.pi


def _rhs_factory(sys: UnfoldedSystem, eps: complex, seg, n: int):
    poly = sys.at_eps(eps)

    def rhs(tau, y):
        x, v = seg.state(float(tau))
        Y = y.reshape(n, -1)
        return ((v / (x * x - eps)) * (poly(x) @ Y)).ravel()

    return rhs


def _check_clearance(eps: UnfoldedParameter, path: PathPlan, exclusion: float):
    pts = path.nodes(128)
    for xs in ((0j,) if eps.is_zero else (eps.x_L, eps.x_R)):
        if np.min(np.abs(pts - xs)) < exclusion:
            raise IntegrationError(f"path passes within {exclusion:.3g} of the singular point {xs:.6g}")


def transport_columns(sys: UnfoldedSystem, eps: UnfoldedParameter, path: PathPlan, Y0: np.ndarray,
                      rtol: float = 1e-11, atol: float | None = None, renormalize: bool = False,
                      pieces: int = 1, max_growth: float = 1e4) -> tuple[np.ndarray, dict]:
    """Continue the columns of Y0 along the path.

    Columns are rescaled to unit norm between pieces and a piece is halved when a
    column changes size by more than `max_growth`, so the absolute tolerance stays
    relative to each solution. With `renormalize`, the columns are instead
    re-orthonormalized by QR after each piece, so only the spanned flag is
    meaningful (used for dominant subspaces).
    """
    Y = np.array(Y0, dtype=complex)
    n = sys.n
    atol = rtol * 1e-6 if atol is None else atol
    stats = {"nfev": 0, "segments": 0, "splits": 0}
    e = eps.eps
    log_limit = math.log(max_growth)
    for seg in path.segments:
        rhs = _rhs_factory(sys, e, seg, n)
        bounds = np.linspace(0.0, 1.0, pieces + 1)
        todo = list(zip(bounds[:-1], bounds[1:]))[::-1]  # stack, first piece on top
        while todo:
            a, b = todo.pop()
            scale = np.linalg.norm(Y, axis=0)
            scale = np.where(scale > 0, scale, 1.0)
            sol = solve_ivp(rhs, (a, b), (Y / scale).ravel(), method="DOP853", rtol=rtol, atol=atol)
            if not sol.success:
                raise IntegrationError(f"integrator failed: {sol.message}")
            stats["nfev"] += sol.nfev
            Z = sol.y[:, -1].reshape(n, -1)
            growth = np.linalg.norm(Z, axis=0)
            if (not renormalize and b - a > 1e-6 and
                    np.any(np.abs(np.log(np.maximum(growth, 1e-300))) > log_limit)):
                mid = 0.5 * (a + b)
                todo += [(mid, b), (a, mid)]
                stats["splits"] += 1
                continue
            Y = Z * scale
            if renormalize:
                Y, _ = np.linalg.qr(Y)
            if not np.all(np.isfinite(Y)):
                raise IntegrationError("overflow during transport")
        stats["segments"] += 1
    return Y, stats


def transfer_matrix(sys: UnfoldedSystem, eps: UnfoldedParameter, path: PathPlan, rtol: float = 1e-11,
                    exclusion: float | None = None) -> np.ndarray:
    """Column j: solution at the path end with initial value e_j at the path start."""
    if rtol <= 0:
        raise ValueError("rtol must be positive")
    if exclusion is None:
        exclusion = 0.0 if eps.is_zero else 1e-3 * abs(eps.x_L - eps.x_R)
    if exclusion > 0:
        _check_clearance(eps, path, exclusion)
    T, _ = transport_columns(sys, eps, path, np.eye(sys.n, dtype=complex), rtol)
    return T


def refinement_difference(sys: UnfoldedSystem, eps: UnfoldedParameter, path: PathPlan, rtol: float = 1e-11) -> float:
    """Relative change of the transfer matrix when every segment is integrated in two halves."""
    T1, _ = transport_columns(sys, eps, path, np.eye(sys.n, dtype=complex), rtol)
    T2, _ = transport_columns(sys, eps, path, np.eye(sys.n, dtype=complex), rtol, pieces=2)
    return float(np.linalg.norm(T1 - T2) / np.linalg.norm(T1))


def trace_integral(sys: UnfoldedSystem, eps: UnfoldedParameter, path: PathPlan, order: int = 64) -> complex:
    """Integral of tr B / (x^2 - eps) along the path, by Gauss-Legendre per segment."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    tau = 0.5 * (nodes + 1)
    poly = sys.at_eps(eps.eps)
    total = 0j
    for seg in path.segments:
        for lo in np.linspace(0, 1, 9)[:-1]:
            tt = lo + tau / 8
            x = seg.point(tt)
            v = seg.velocity(tt)
            tr = np.array([np.trace(poly(complex(z))) for z in x])
            total += np.sum(weights / 16 * tr * v / (x * x - eps.eps))
    return complex(total)


# ---------------------------------------------------------------- Frobenius bases


def _shifted_taylor(coeffs: np.ndarray, x0: complex) -> np.ndarray:
    """Taylor coefficients at x0 of a matrix polynomial with coeffs[a] multiplying x**a."""
    deg = coeffs.shape[0] - 1
    out = np.zeros_like(coeffs, dtype=complex)
    for a in range(deg + 1):
        for m in range(a + 1):
            out[m] += coeffs[a] * math.comb(a, m) * x0 ** (a - m)
    return out


@dataclass
class LocalFloquetBasis:
    which: str
    center: complex
    exponents: np.ndarray
    coefficients: np.ndarray  # (order+1, n, n): coefficients[m][:, j] is g_{j,m}
    radius_estimate: float

    def series(self, x) -> np.ndarray:
        """Matrix whose column j is g_j(x)."""
        h = complex(x) - self.center
        G = np.zeros(self.coefficients.shape[1:], complex)
        for g in self.coefficients[::-1]:
            G = G * h + g
        return G

    def frame(self, x, log_h: complex | None = None) -> np.ndarray:
        """Columns (x - x_l)^{mu_j} g_j(x), with the principal logarithm unless log_h is given."""
        h = complex(x) - self.center
        lg = np.log(h) if log_h is None else log_h
        return self.series(x) * np.exp(self.exponents * lg)[None, :]


def local_floquet_basis(sys: UnfoldedSystem, eps: UnfoldedParameter, which: str, order: int = 40,
                        fi: FormalInvariants | None = None, resonance_tol: float = 1e-9) -> LocalFloquetBasis:
    if eps.is_zero:
        raise ResonanceError("no regular singular points at eps = 0")
    xl = eps.point(which)
    xo = eps.point("R" if which == "L" else "L")
    n = sys.n
    Bt = _shifted_taylor(sys.at_eps(eps.eps).coeffs, xl)  # Bt[a] multiplies (x - x_l)**a
    deg = Bt.shape[0] - 1
    # 1/(x - x_o) = sum_k (-1)^k h^k / (x_l - x_o)^{k+1}
    d = xl - xo
    inv = np.array([(-1) ** k / d ** (k + 1) for k in range(order + 1)])
    A = np.zeros((order + 1, n, n), complex)
    for m in range(order + 1):
        for a in range(min(m, deg) + 1):
            A[m] += Bt[a] * inv[m - a]
    vals, vecs = np.linalg.eig(A[0])
    if fi is not None and fi.mu is not None:
        target = fi.mu[:, side_index(which)]
        from .systems import match_to
        perm = match_to(target, vals)
        vals, vecs = vals[perm], vecs[:, perm]
    for q in range(n):
        for j in range(n):
            dm = vals[q] - vals[j]
            m = round(dm.real)
            if q != j and m >= 1 and abs(dm - m) < resonance_tol:
                raise ResonanceError(f"resonance mu_{q + 1} - mu_{j + 1} = {m} at {which}", pair=(q + 1, j + 1, m))
    G = np.zeros((order + 1, n, n), complex)
    for j in range(n):
        v = vecs[:, j]
        k = j if abs(v[j]) > 1e-3 * np.max(np.abs(v)) else int(np.argmax(np.abs(v)))
        G[0][:, j] = v / v[k]
        for m in range(1, order + 1):
            rhs = -sum(A[k2] @ G[m - k2][:, j] for k2 in range(1, m + 1))
            Mrec = A[0] - (vals[j] + m) * np.eye(n)
            if np.linalg.cond(Mrec) > 1.0 / resonance_tol:
                raise ResonanceError(f"singular recursion at order {m} for column {j + 1} at {which}",
                                     pair=(None, j + 1, m))
            G[m][:, j] = np.linalg.solve(Mrec, rhs)
    norms = np.array([np.linalg.norm(G[m]) for m in range(1, order + 1)])
    ms = np.arange(1, order + 1)
    tail = slice(order // 2, order)
    with np.errstate(divide="ignore"):
        roots = norms[tail] ** (1.0 / ms[tail])
    radius = float(1.0 / np.max(roots)) if np.max(roots) > 0 else math.inf
    return LocalFloquetBasis(which, xl, vals, G, radius)


def floquet_residual(sys: UnfoldedSystem, eps: UnfoldedParameter, basis: LocalFloquetBasis, radius: float,
                     points: int = 16) -> float:
    """max over a circle of |(x^2 - eps) Y' - B Y| / |B Y| for the Floquet frame Y."""
    worst = 0.0
    poly = sys.at_eps(eps.eps)
    for th in np.linspace(0, TWO_PI, points, endpoint=False):
        x = basis.center + radius * np.exp(1j * th)
        h = x - basis.center
        G = basis.series(x)
        dG = np.zeros_like(G)
        for m in range(len(basis.coefficients) - 1, 0, -1):
            dG = dG * h + m * basis.coefficients[m]
        # Y = G h^mu -> Y' = (G' + G mu / h) h^mu; compare without the common power
        lhs = (x * x - eps.eps) * (dG + G * (basis.exponents / h)[None, :])
        rhs = poly(x) @ G
        worst = max(worst, float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300)))
    return worst


# ---------------------------------------------------------------- monodromy


def stable_spectrum(M: np.ndarray, M_inv: np.ndarray) -> np.ndarray:
    """Eigenvalues of M, each taken from M or from the independently computed inverse.

    An eigenvalue lam computed from M carries an absolute error of order
    |M| u, so the small ones are read from M_inv, where they are large.
    """
    a = np.linalg.eigvals(M)
    b = 1.0 / np.linalg.eigvals(M_inv)
    from .systems import match_to
    b = b[match_to(np.log(a), np.log(b))] if len(a) > 1 else b
    nM, nI = np.linalg.norm(M, 2), np.linalg.norm(M_inv, 2)
    use_a = nM / np.abs(a) <= nI * np.abs(b)
    return np.where(use_a, a, b)


@dataclass
class MonodromyData:
    eps: UnfoldedParameter
    base: complex
    M_L: np.ndarray
    M_R: np.ndarray
    M_L_inv: np.ndarray
    M_R_inv: np.ndarray
    base_points: dict
    connector_D: np.ndarray  # transfer from base_points["R"] to base_points["L"] inside Omega_D
    connector_U: np.ndarray  # same inside Omega_U
    loops_at_base: dict  # loop matrices at their own base points
    loops_inv_at_base: dict
    diagnostics: dict = field(default_factory=dict)

    def spectrum(self, which: str) -> np.ndarray:
        # loops at their own base point: similar to M_l without the connector's conditioning
        return stable_spectrum(self.loops_at_base[which], self.loops_inv_at_base[which])

    def liouville_errors(self, fi: FormalInvariants) -> dict:
        """Relative error of det M_l (as the product of the stable spectrum) against exp(+-2 pi i sum mu)."""
        out = {}
        for which in ("L", "R"):
            sgn = 1 if which == "L" else -1
            expected = np.exp(sgn * TWO_PI * 1j * np.sum(fi.mu[:, side_index(which)]))
            out[which] = float(abs(np.prod(self.spectrum(which)) / expected - 1))
        return out


def monodromy_matrices(sys: UnfoldedSystem, eps: UnfoldedParameter, geometry: StripGeometry,
                       rtol: float = 1e-11, loop_radius: float | None = None,
                       base_radius: float | None = None) -> MonodromyData:
    """Loop transfers around x_L (positive) and x_R (negative).

    Each loop is run from its own base point in Omega_l (on the lens axis); M_L is
    then moved to the common base point b_R along a path homotopic to the connector
    inside Omega_D (an arc of the base circle when possible).
    Inverses come from the reversed loops, not from matrix inversion.
    """
    if eps.is_zero:
        raise IntegrationError("monodromy is undefined at eps = 0")
    bR, uR = lens_base_point(geometry, "R", base_radius)
    bL, uL = lens_base_point(geometry, "L", base_radius)
    loops, loops_inv = {}, {}
    for which, u in (("R", uR), ("L", uL)):
        path = monodromy_loop(geometry, which, u, loop_radius)
        loops[which] = transfer_matrix(sys, eps, path, rtol)
        loops_inv[which] = transfer_matrix(sys, eps, path.reversed(), rtol)
    PD = transfer_matrix(sys, eps, circle_connector(geometry, "D", uR, uL), rtol)
    PU = transfer_matrix(sys, eps, circle_connector(geometry, "U", uR, uL), rtol)
    PD_inv = transfer_matrix(sys, eps, circle_connector(geometry, "D", uL, uR), rtol)
    M_L = PD_inv @ loops["L"] @ PD
    M_L_inv = PD_inv @ loops_inv["L"] @ PD
    return MonodromyData(eps, bR, M_L, loops["R"], M_L_inv, loops_inv["R"], {"R": bR, "L": bL},
                         PD, PU, loops, loops_inv, {"rtol": rtol})


# ---------------------------------------------------------------- model solution


@dataclass
class BranchState:
    """Continuous logarithms of x - x_L and x - x_R (or of x when eps = 0) along a walk."""

    eps: UnfoldedParameter
    x: complex
    logs: np.ndarray

    @classmethod
    def start(cls, eps: UnfoldedParameter, x: complex, windings: tuple[int, int] = (0, 0)) -> "BranchState":
        x = complex(x)
        if eps.is_zero:
            logs = np.array([np.log(x) + TWO_PI * 1j * windings[0]])
        else:
            logs = np.array([np.log(x - eps.x_L) + TWO_PI * 1j * windings[0],
                             np.log(x - eps.x_R) + TWO_PI * 1j * windings[1]])
        return cls(eps, x, logs)

    def _centers(self):
        return (0j,) if self.eps.is_zero else (self.eps.x_L, self.eps.x_R)

    def advance(self, x_new: complex, max_turn: float = math.pi / 2) -> "BranchState":
        """Move to x_new along the straight segment, refining so no argument jumps more than max_turn."""
        x_new = complex(x_new)
        logs = self.logs.copy()
        stack = [(self.x, x_new)]
        cur = self.x
        while stack:
            a, b = stack.pop()
            turns = [abs(np.angle((b - c) / (a - c))) for c in self._centers()]
            if max(turns) > max_turn:
                m = 0.5 * (a + b)
                stack.append((m, b))
                stack.append((a, m))
                continue
            for i, c in enumerate(self._centers()):
                logs[i] += np.log((b - c) / (a - c))
            cur = b
        return BranchState(self.eps, cur, logs)

    def walk(self, points) -> list["BranchState"]:
        out = [self]
        for z in points:
            out.append(out[-1].advance(z))
        return out


def model_solution(fi: FormalInvariants, eps: UnfoldedParameter, x: complex, branch: BranchState | None = None) -> np.ndarray:
    """Diagonal model fundamental matrix F(eps, x) with logarithms from the branch state."""
    if branch is None:
        branch = BranchState.start(eps, x)
    elif abs(branch.x - complex(x)) > 1e-14 * max(1.0, abs(x)):
        branch = branch.advance(x)
    if eps.is_zero:
        lam0, lam1 = fi.lam[:, 0], fi.lam[:, 1]
        return np.diag(np.exp(lam1 * branch.logs[0] - lam0 / complex(x)))
    if any(complex(x) == c for c in (eps.x_L, eps.x_R)):
        raise IntegrationError("model solution evaluated at a singular point")
    return np.diag(np.exp(fi.mu[:, 0] * branch.logs[0] + fi.mu[:, 1] * branch.logs[1]))


def model_along(fi: FormalInvariants, eps: UnfoldedParameter, path: PathPlan, samples: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Model matrices at the start and the end of a path, with the branch continued along it."""
    nodes = path.nodes(samples)
    st = BranchState.start(eps, nodes[0])
    states = st.walk(nodes[1:])
    return model_solution(fi, eps, nodes[0], states[0]), model_solution(fi, eps, nodes[-1], states[-1])
