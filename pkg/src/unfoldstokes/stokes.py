"""Unfolded Stokes matrices: extraction, gauge normalization, diagonalizers, transition
invariants, auto-intersection, summability gap, reducibility and log-term predicates."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import IntegrationError, LeakageError, MalformedInput, ResonanceError
from .geometry import (SectorS, StripGeometry, admissible_sector, circle_connector, circle_loop, connector,
                       lens_base_point, sector_domains, t_path, x_of_t)
from .systems import (FormalInvariants, UnfoldedParameter, UnfoldedSystem, ZERO, delta,
                      formal_invariants, match_to, strictly_ordered)
from .transport import local_floquet_basis, monodromy_matrices, transfer_matrix, transport_columns

__all__ = [
    "StokesCollection", "GaugeWitness", "DiagonalizerResult", "AutoIntersectionReport",
    "mixed_basis", "extract_stokes", "canonicalize", "equivalent", "distance", "diagonalizer_T",
    "transition_invariants", "check_autointersection", "summability_gap", "reducibility_analysis",
    "log_term_predicates", "delta", "ladder_limit",
]

TWO_PI = 2.0 * math.pi


def _cpl(a):
    a = np.asarray(a, complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def _from_cpl(rows):
    return np.array([[complex(re, im) for re, im in row] for row in rows])


@dataclass
class StokesCollection:
    eps: UnfoldedParameter
    C_R: np.ndarray
    C_L: np.ndarray
    fi: FormalInvariants | None = None
    normalization: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.C_R.shape[0]

    @property
    def D_R(self):
        return None if self.fi is None or self.eps.is_zero else self.fi.D("R")

    @property
    def D_L(self):
        return None if self.fi is None or self.eps.is_zero else self.fi.D("L")

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        return self.C_R, self.C_L

    def leakage(self) -> float:
        return float(max(np.linalg.norm(np.tril(self.C_R, -1)), np.linalg.norm(np.triu(self.C_L, 1)),
                         np.max(np.abs(np.diag(self.C_R) - 1)), np.max(np.abs(np.diag(self.C_L) - 1))))

    def with_matrices(self, C_R, C_L, normalization=None) -> "StokesCollection":
        return StokesCollection(self.eps, np.array(C_R), np.array(C_L), self.fi, normalization, dict(self.diagnostics))

    def to_dict(self) -> dict:
        out = {"eps": self.eps.to_dict(), "C_R": _cpl(self.C_R), "C_L": _cpl(self.C_L)}
        if self.normalization is not None:
            out["normalization"] = [[float(z.real), float(z.imag)] for z in np.diag(self.normalization)]
        if self.fi is not None:
            out["formal_invariants"] = self.fi.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StokesCollection":
        try:
            eps = UnfoldedParameter.from_dict(d["eps"]) if "eps" in d else ZERO
            C_R, C_L = _from_cpl(d["C_R"]), _from_cpl(d["C_L"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInput(f"malformed Stokes collection: {exc}") from exc
        if C_R.shape != C_L.shape or C_R.ndim != 2 or C_R.shape[0] != C_R.shape[1]:
            raise MalformedInput("C_R and C_L must be square matrices of equal size")
        fi = FormalInvariants.from_dict(d["formal_invariants"]) if "formal_invariants" in d else None
        return cls(eps, C_R, C_L, fi)

    @classmethod
    def identity(cls, n: int, eps: UnfoldedParameter = ZERO, fi=None) -> "StokesCollection":
        return cls(eps, np.eye(n, dtype=complex), np.eye(n, dtype=complex), fi)


@dataclass(frozen=True)
class GaugeWitness:
    K: np.ndarray
    residual: float = 0.0


@dataclass
class DiagonalizerResult:
    T: np.ndarray
    margin: float
    check: float


@dataclass
class AutoIntersectionReport:
    N_bar: dict
    N_tilde: dict
    Q_D: np.ndarray
    Q_U: np.ndarray
    residual: float
    deviation: float  # max |Q_s - I|
    entry_gaps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"residual": self.residual, "deviation": self.deviation,
                "Q_D": [[z.real, z.imag] for z in np.diag(self.Q_D)],
                "Q_U": [[z.real, z.imag] for z in np.diag(self.Q_U)]}


# ---------------------------------------------------------------- subspaces


def _orth(A: np.ndarray) -> np.ndarray:
    if A.shape[1] == 0:
        return A
    return sla.orth(A)


def _null(A: np.ndarray, dim: int | None = None) -> np.ndarray:
    _, s, vh = np.linalg.svd(A)
    if dim is None:
        tol = max(A.shape) * np.finfo(float).eps * (s[0] if len(s) else 1.0)
        dim = A.shape[1] - int(np.sum(s > tol))
    return vh[A.shape[1] - dim:].conj().T


def _dominant_vector(M: np.ndarray, index: int, targets: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(M)
    k = match_to(targets, vals)[index]
    v = vecs[:, k]
    return v / np.linalg.norm(v)


def eigenlines(M: np.ndarray, M_inv: np.ndarray, targets: np.ndarray, spread_limit: float = 1e6) -> np.ndarray:
    """Eigenvectors of M for the eigenvalues `targets` (columns in target order).

    With a mild spread in modulus, a dense eigensolver suffices. Otherwise each
    line is the intersection of a dominant invariant subspace of M with one of
    M_inv (the reverse-loop transfer): the top subspace of M is its dominant
    eigenvector, the next-to-full one is the annihilator of the dominant left
    eigenvector of M_inv. This is exact for n <= 3; beyond that the remaining
    subspaces come from an ordered Schur form.
    """
    n = len(targets)
    mods = np.abs(targets)
    if n == 1:
        return np.ones((1, 1), complex)
    if mods.max() / mods.min() < spread_limit:
        vals, vecs = np.linalg.eig(M)
        idx = match_to(targets, vals)
        V = vecs[:, idx]
        return V / np.linalg.norm(V, axis=0)
    order = np.argsort(-mods)  # order[0]: largest modulus
    rank = np.empty(n, int)
    rank[order] = np.arange(n)
    inv_targets = 1.0 / targets

    def top(mat, tg, k, by):
        """Basis of the invariant subspace of `mat` for its k largest target moduli."""
        if k == n:
            return np.eye(n, dtype=complex)
        if k == 1:
            return _dominant_vector(mat, int(by[0]), tg)[:, None]
        if k == n - 1:
            # annihilator of the left eigenvector of the smallest one, i.e. the dominant one of the inverse
            other = M_inv if mat is M else M
            other_tg = inv_targets if mat is M else targets
            ell = _dominant_vector(other.T, int(by[-1]), other_tg)
            return _null(ell[None, :], n - 1)
        T, Z, sdim = sla.schur(mat, output="complex", sort=lambda z: abs(z) >= abs(tg[by[k - 1]]) * (1 - 1e-9))
        return Z[:, :k]

    out = np.zeros((n, n), complex)
    for j in range(n):
        k = rank[j] + 1
        A = top(M, targets, k, order)
        B = top(M_inv, inv_targets, n - k + 1, order[::-1])
        v = _intersection(A, B)
        out[:, j] = v
    return out


def _intersection(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Unit vector spanning the (assumed one-dimensional) intersection of span A and span B."""
    A, B = _orth(A), _orth(B)
    z = _null(np.hstack([A, -B]), 1)[:, 0]
    v = A @ z[: A.shape[1]]
    return v / np.linalg.norm(v)


def _phase_fix(v: np.ndarray) -> np.ndarray:
    v = v / np.linalg.norm(v)
    k = int(np.argmax(np.abs(v) > 1e-8 * np.max(np.abs(v))))
    return v * (abs(v[k]) / v[k])


def _flags_from_lines(lines: np.ndarray, which: str) -> list[np.ndarray]:
    """V_j = span(lines 1..j) for R, W_j = span(lines j..n) for L."""
    n = lines.shape[1]
    if which == "R":
        return [_orth(lines[:, : j + 1]) for j in range(n)]
    return [_orth(lines[:, j:]) for j in range(n)]


# ---------------------------------------------------------------- extraction


def mixed_basis(mono, fi: FormalInvariants, tol: float = 1e-8) -> np.ndarray:
    """Basis at the common base point with M_R upper and M_L lower triangular.

    Column j spans V_j^R (M_R-invariant, eigenvalues (D_R)_{11..jj}) intersected
    with W_j^L (M_L-invariant, eigenvalues (D_L)_{jj..nn}).
    """
    dR, dL = np.exp(fi.log_D("R")), np.exp(fi.log_D("L"))
    for d in (dR, dL):
        n = len(d)
        sep = min((abs(np.log(d[i] / d[j])) for i in range(n) for j in range(n) if i != j), default=math.inf)
        if sep < tol:
            raise ResonanceError("monodromy eigenvalues are not separated; eigenvalue matching is ambiguous")
    V = _flags_from_lines(eigenlines(mono.M_R, mono.M_R_inv, dR), "R")
    W = _flags_from_lines(eigenlines(mono.M_L, mono.M_L_inv, dL), "L")
    cols = [_phase_fix(_intersection(V[j], W[j])) for j in range(len(dR))]
    return np.stack(cols, axis=1)


def _default_geometry(sys: UnfoldedSystem, eps: UnfoldedParameter, r: float, S: SectorS | None,
                      delta_angle: float | None, c: float) -> tuple[StripGeometry, SectorS]:
    if S is None:
        fi0 = formal_invariants(sys, ZERO)
        if not strictly_ordered(fi0.lam[:, 0]):
            raise MalformedInput("leading eigenvalues are not strictly ordered; apply systems.normalized first")
        S = admissible_sector(fi0, rho_max=max(0.05, 2 * eps.modulus))
    doms = sector_domains(eps, S, r, c, delta_angle)
    return doms["D"].geometry, S


def _resonance_margin(fi: FormalInvariants) -> tuple[float, tuple]:
    worst, pair = math.inf, None
    n = fi.n
    for which in ("L", "R"):
        for s in range(n):
            for j in range(n):
                if s != j:
                    m = abs(1 - fi.delta(s, j, which))
                    if m < worst:
                        worst, pair = m, (s + 1, j + 1, which)
    return worst, pair


def extract_stokes(sys: UnfoldedSystem, eps: UnfoldedParameter, rtol: float = 1e-11, r: float = 0.5,
                   S: SectorS | None = None, delta_angle: float | None = None, c: float = 1.0,
                   resonance_margin: float = 1e-4, leak_tol: float | None = None,
                   base_radius: float | None = None, route: str = "two-sided",
                   fi: FormalInvariants | None = None) -> StokesCollection:
    """Stokes collection (C_R, C_L) of a strictly ordered system at eps in S or eps = 0.

    Two bases at the base point b_R are compared. Column j of W_D spans V_j^R
    intersected with the transport of W_j^L from b_L along Omega_D; W_U uses the
    transport along Omega_U. Then C_R = W_D^{-1} W_U and
    C_L e^{2 pi i Lambda_1} = W_D^{-1} (loop around both points) W_U.
    For eps != 0 the flags are invariant subspaces of the loop transfers; for
    eps = 0 they are the recessive filtrations along the lens axes.
    route="mixed" uses the mixed basis at one base point instead.
    """
    geo, S = _default_geometry(sys, eps, r, S, delta_angle, c)
    fi = formal_invariants(sys, eps) if fi is None else fi
    leak_tol = 100 * rtol if leak_tol is None else leak_tol
    n = sys.n
    diag: dict = {"route": route}
    if not eps.is_zero:
        margin, pair = _resonance_margin(fi)
        diag["resonance_margin"] = margin
        if margin < resonance_margin:
            raise ResonanceError(f"resonance margin {margin:.3g} below {resonance_margin:.3g} "
                                 f"(pair Delta_{pair[0]}{pair[1]},{pair[2]})", pair=pair)
    bR, uR = lens_base_point(geo, "R", base_radius)
    bL, uL = lens_base_point(geo, "L", base_radius)
    # deformed onto the base circle: the straight t-plane routes lose precision when solutions separate
    loop_both = transfer_matrix(sys, eps, circle_loop(geo, uR, geo.r), rtol)
    if route == "mixed":
        if eps.is_zero:
            raise MalformedInput("the mixed-basis route needs eps != 0")
        mono = monodromy_matrices(sys, eps, geo, rtol, base_radius=base_radius)
        Wm = mixed_basis(mono, fi)
        raw_R = np.linalg.solve(Wm, mono.M_R @ Wm) / np.exp(fi.log_D("R"))[None, :]
        raw_L = np.linalg.solve(Wm, mono.M_L @ Wm) / np.exp(fi.log_D("L"))[None, :]
        # fix the column scaling so that both diagonals are 1: raw_l = K C_l K^{-1} diag
        C_R, C_L = raw_R / np.diag(raw_R)[None, :], raw_L / np.diag(raw_L)[None, :]
        sc = StokesCollection(eps, C_R, C_L, fi, None, diag)
        diag["raw"] = {"R": raw_R, "L": raw_L}
        # a mismatched eigenline order still triangularizes, but leaves a diagonal away from 1
        diag["diag_defect"] = float(max(np.max(np.abs(np.diag(raw_R) - 1)), np.max(np.abs(np.diag(raw_L) - 1))))
        diag["leakage"] = max(sc.leakage(), diag["diag_defect"])
        if diag["leakage"] > leak_tol:
            raise LeakageError(f"off-triangle leakage {diag['leakage']:.3g} exceeds {leak_tol:.3g}", raw=diag["raw"])
        return sc

    if eps.is_zero:
        V = _recessive_flags(sys, geo, "R", uR, fi, rtol)
        WL = _recessive_flags(sys, geo, "L", uL, fi, rtol)
    else:
        V = _floquet_flags(sys, geo, "R", uR, fi, rtol)
        WL = _floquet_flags(sys, geo, "L", uL, fi, rtol)
    back_D = transfer_matrix(sys, eps, circle_connector(geo, "D", uL, uR), rtol)
    back_U = transfer_matrix(sys, eps, circle_connector(geo, "U", uL, uR), rtol)
    W_D = np.stack([_phase_fix(_intersection(V[j], back_D @ WL[j])) for j in range(n)], axis=1)
    W_U = np.stack([_phase_fix(_intersection(V[j], back_U @ WL[j])) for j in range(n)], axis=1)
    C_R = np.linalg.solve(W_D, W_U)
    scale = np.diag(C_R).copy()
    W_U = W_U / scale[None, :]
    C_R = C_R / scale[None, :]
    X = np.linalg.solve(W_D, loop_both @ W_U)
    e1 = np.exp(TWO_PI * 1j * fi.lam[:, 1])
    C_L = X / e1[None, :]
    diag.update({"diag_defect": float(np.max(np.abs(np.diag(C_L) - 1))), "basis": W_D,
                 "basis_condition": float(np.linalg.cond(W_D)),
                 "base_points": {"R": bR, "L": bL}})
    sc = StokesCollection(eps, C_R, C_L, fi, None, diag)
    diag["leakage"] = float(max(np.linalg.norm(np.tril(C_R, -1)), np.linalg.norm(np.triu(C_L, 1))))
    # the diagonal of C_L carries the conditioning of the big loop, so it is judged relative to |C_L|
    diag["relative_diag_defect"] = diag["diag_defect"] / max(1.0, float(np.linalg.norm(C_L)))
    if max(diag["leakage"], diag["relative_diag_defect"]) > leak_tol:
        raise LeakageError(f"off-triangle leakage {diag['leakage']:.3g} exceeds {leak_tol:.3g}",
                           raw={"R": C_R, "L": C_L})
    # exact unipotent triangular parts
    return StokesCollection(eps, np.triu(C_R, 1) + np.eye(n), np.tril(C_L, -1) + np.eye(n), fi, None, diag)


def _recessive_flags(sys: UnfoldedSystem, geo: StripGeometry, which: str, u_base: float,
                     fi: FormalInvariants, rtol: float, decay: float = 40.0) -> list[np.ndarray]:
    """Flags of solutions ordered by decay toward x = 0 along the lens axis (eps = 0).

    A generic frame is transported from deep inside the lens out to the base
    point, re-orthonormalized along the way. The leading k columns then span
    the k most recessive solutions: lines 1..k on the right, n-k+1..n on the left.
    """
    lam0 = fi.lam[:, 0]
    n = len(lam0)
    gaps = [abs((lam0[q] - lam0[j]).real) for q in range(n) for j in range(q + 1, n)]
    gmin = min(gaps) if gaps else 1.0
    gmax = max(gaps) if gaps else 1.0
    u_far = u_base + math.copysign(decay / gmin, u_base)
    steps = max(8, int(math.ceil(abs(u_far - u_base) * gmax / 4.0)))
    us = np.linspace(u_far, u_base, steps + 1)
    Y = np.linalg.qr(np.random.default_rng(12345).standard_normal((n, n))
                     + 1j * np.random.default_rng(54321).standard_normal((n, n)))[0]
    for a, b in zip(us[:-1], us[1:]):
        Y, _ = transport_columns(sys, geo.eps, t_path(geo, [(a, 0.0), (b, 0.0)]), Y, rtol, renormalize=True)
    if which == "R":
        return [_orth(Y[:, : j + 1]) for j in range(n)]
    return [_orth(Y[:, : n - j]) for j in range(n)]


def _axis_point_near(geo: StripGeometry, which: str, u_base: float, fraction: float) -> float:
    """Parameter u on the lens axis with |x(u) - x_l| = fraction * |x_L - x_R|."""
    eps = geo.eps
    xl = eps.point(which)
    target = fraction * abs(eps.x_L - eps.x_R)

    def dist(u):
        return abs(complex(x_of_t(eps, geo.t_of(u, 0.0))) - xl)

    lo, hi = u_base, u_base
    while dist(hi) > target:
        lo, hi = hi, 2.0 * hi
        if abs(hi) > 1e12:
            raise IntegrationError("lens axis does not reach the singular point")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if dist(mid) > target:
            lo = mid
        else:
            hi = mid
        if abs(hi - lo) < 1e-12 * abs(hi):
            break
    return hi


def _floquet_flags(sys: UnfoldedSystem, geo: StripGeometry, which: str, u_base: float,
                   fi: FormalInvariants, rtol: float, fraction: float = 0.25) -> list[np.ndarray]:
    """Monodromy-invariant flags at the base point, started from the Floquet series near x_l.

    The Floquet solutions are ordered (1..n at x_R, n..1 at x_L) and carried out
    along the lens axis with QR renormalization every few units of growth, so the
    leading subspaces stay accurate even when the solutions separate strongly.
    """
    n = sys.n
    basis = local_floquet_basis(sys, geo.eps, which, fi=fi)
    u0 = _axis_point_near(geo, which, u_base, fraction)
    z0 = complex(x_of_t(geo.eps, geo.t_of(u0, 0.0)))
    G = basis.series(z0)
    order = list(range(n)) if which == "R" else list(range(n - 1, -1, -1))
    Y, _ = np.linalg.qr(G[:, order])
    lam = fi.lam[:, 0] + fi.lam[:, 1] * geo.eps.point(which)
    gmax = max([abs(a - b) for a in lam for b in lam] + [1.0])
    steps = max(4, int(math.ceil(abs(u0 - u_base) * gmax / 4.0)))
    us = np.linspace(u0, u_base, steps + 1)
    for a, b in zip(us[:-1], us[1:]):
        Y, _ = transport_columns(sys, geo.eps, t_path(geo, [(a, 0.0), (b, 0.0)]), Y, rtol, renormalize=True)
    return [_orth(Y[:, : j + 1]) for j in range(n)] if which == "R" else [_orth(Y[:, : n - j]) for j in range(n)]


# ---------------------------------------------------------------- gauge


def _components_order(n: int):
    """Traversal order: C_R superdiagonals by distance then row, then C_L likewise."""
    order = []
    for d in range(1, n):
        for i in range(n - d):
            order.append(("R", i, i + d))
    for d in range(1, n):
        for i in range(d, n):
            order.append(("L", i, i - d))
    return order


def canonicalize(sc: StokesCollection, tol: float = 1e-12) -> tuple[StokesCollection, GaugeWitness]:
    """Fix the diagonal gauge K (C -> K C K^{-1}) by setting leading entries to 1."""
    n = sc.n
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    edges = []  # (i, j, value): k_i / k_j = 1 / value
    mats = {"R": sc.C_R, "L": sc.C_L}
    for which, i, j in _components_order(n):
        v = mats[which][i, j]
        if abs(v) > tol and find(i) != find(j):
            parent[find(i)] = find(j)
            edges.append((i, j, v))
    K = _solve_tree(n, [(i, j, 1.0 / v) for i, j, v in edges])
    Kd = np.diag(K)
    C_R = K[:, None] * sc.C_R / K[None, :]
    C_L = K[:, None] * sc.C_L / K[None, :]
    for i, j, _ in edges:
        # selected entries are exactly 1
        (C_R if i < j else C_L)[i, j] = 1.0
    return sc.with_matrices(C_R, C_L, Kd), GaugeWitness(K)


def _solve_tree(n: int, ratios: list) -> np.ndarray:
    """Diagonal k with k_i / k_j = ratio on a forest; roots (smallest index) set to 1."""
    adj = {i: [] for i in range(n)}
    for i, j, q in ratios:
        adj[i].append((j, q))  # k_i = q k_j
        adj[j].append((i, 1.0 / q))  # k_j = k_i / q
    k = np.full(n, np.nan + 0j)
    for root in range(n):
        if not np.isnan(k[root]):
            continue
        k[root] = 1.0
        stack = [root]
        while stack:
            a = stack.pop()
            for b, q in adj[a]:
                # edge stored as k_a = q k_b
                if np.isnan(k[b]):
                    k[b] = k[a] / q
                    stack.append(b)
    return k


def distance(a: StokesCollection, b: StokesCollection) -> float:
    """Max-entry distance between the canonical forms."""
    ca, _ = canonicalize(a)
    cb, _ = canonicalize(b)
    return float(max(np.max(np.abs(ca.C_R - cb.C_R)), np.max(np.abs(ca.C_L - cb.C_L))))


def equivalent(a: StokesCollection, b: StokesCollection, tol: float = 1e-8) -> GaugeWitness | None:
    """Diagonal K with K C_l^a K^{-1} = C_l^b, if one exists within tol.

    Log-ratios of matching nonzero entries give a linear least-squares problem
    for log K (phases unwrapped against a spanning-tree solution first); the
    full residual then decides.
    """
    if a.n != b.n:
        raise MalformedInput("collections of different sizes")
    n = a.n
    pairs = []
    for which, i, j in _components_order(n):
        va = (a.C_R if which == "R" else a.C_L)[i, j]
        vb = (b.C_R if which == "R" else b.C_L)[i, j]
        if abs(va) > tol and abs(vb) > tol:
            pairs.append((i, j, vb / va))
    # spanning-forest solution
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    tree = []
    for i, j, q in pairs:
        if find(i) != find(j):
            parent[find(i)] = find(j)
            tree.append((i, j, q))
    k0 = _solve_tree(n, tree)
    if pairs:
        rows, rhs = [], []
        for i, j, q in pairs:
            row = np.zeros(n)
            row[i], row[j] = 1.0, -1.0
            rows.append(row)
            rhs.append(np.log(q / (k0[i] / k0[j])))
        rows.append(np.eye(n)[0])
        rhs.append(0.0)
        corr, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs, complex), rcond=None)
        k = k0 * np.exp(corr)
    else:
        k = k0
    res = 0.0
    for A, B in ((a.C_R, b.C_R), (a.C_L, b.C_L)):
        res = max(res, float(np.max(np.abs(k[:, None] * A / k[None, :] - B))))
    return GaugeWitness(k, res) if res < tol else None


# ---------------------------------------------------------------- diagonalizers


def _delta_matrix(D_or_logs: np.ndarray, logs: bool = False) -> np.ndarray:
    if logs:
        L = np.asarray(D_or_logs)
        return np.exp(L[:, None] - L[None, :])
    d = np.asarray(D_or_logs)
    if d.ndim == 2:
        d = np.diag(d)
    return d[:, None] / d[None, :]


def diagonalizer_T(C: np.ndarray, D: np.ndarray, tol: float = 1e-12, which: str | None = None,
                   log_D: np.ndarray | None = None) -> DiagonalizerResult:
    """Unipotent triangular T with T^{-1} C D T = D, from the entrywise recursion.

    (T)_{ij}(1 - Delta_{ij}) = C_{ij} + sum_k C_{ik} T_{kj} Delta_{kj}, k strictly between i and j.
    """
    C = np.asarray(C, complex)
    n = C.shape[0]
    if which is None:
        which = "R" if np.allclose(np.tril(C, -1), 0) else "L"
    Dl = _delta_matrix(log_D, logs=True) if log_D is not None else _delta_matrix(D)
    T = np.eye(n, dtype=complex)
    margin = math.inf
    for d in range(1, n):
        idx = [(i, i + d) for i in range(n - d)] if which == "R" else [(i, i - d) for i in range(d, n)]
        for i, j in idx:
            gap = 1 - Dl[i, j]
            margin = min(margin, abs(gap))
            if abs(gap) <= tol:
                raise ResonanceError(f"|1 - Delta_{i + 1}{j + 1},{which}| = {abs(gap):.3g} at or below {tol:.3g}",
                                     pair=(i + 1, j + 1, which))
            ks = range(i + 1, j) if which == "R" else range(j + 1, i)
            acc = C[i, j] + sum(C[i, k] * T[k, j] * Dl[k, j] for k in ks)
            T[i, j] = acc / gap
    # T^{-1} C (D T D^{-1}) should be the identity
    DTD = Dl * T
    check = float(np.max(np.abs(np.linalg.solve(T, C @ DTD) - np.eye(n))))
    return DiagonalizerResult(T, margin, check)


def _diagonalizers(sc: StokesCollection, tol: float):
    fi = sc.fi
    TR = diagonalizer_T(sc.C_R, None, tol, "R", fi.log_D("R")).T
    TL = diagonalizer_T(sc.C_L, None, tol, "L", fi.log_D("L")).T
    return TR, TL


def _conj_D(fi: FormalInvariants, which: str, M: np.ndarray) -> np.ndarray:
    """D_l M D_l^{-1}."""
    return fi.delta_table(which) * M


def transition_invariants(sc_bar: StokesCollection, sc_tilde: StokesCollection, tol: float = 1e-12):
    """N_L, N_R on both presentations of the same eps."""
    TRb, TLb = _diagonalizers(sc_bar, tol)
    TRt, TLt = _diagonalizers(sc_tilde, tol)
    N_tilde = {"L": _conj_D(sc_tilde.fi, "L", np.linalg.solve(TLt, TRt)), "R": np.linalg.solve(TLt, TRt)}
    N_bar = {"L": np.linalg.solve(TRb, TLb), "R": _conj_D(sc_bar.fi, "R", np.linalg.solve(TRb, TLb))}
    return N_bar, N_tilde


def check_autointersection(sc_bar: StokesCollection, sc_tilde: StokesCollection, tol: float = 1e-10) -> AutoIntersectionReport:
    """Diagonal Q_D, Q_U closest to I solving Q_D N_bar_l = N_tilde_l Q_U for l = L, R."""
    N_bar, N_tilde = transition_invariants(sc_bar, sc_tilde)
    n = sc_bar.n
    rows = []
    for which in ("L", "R"):
        Nb, Nt = N_bar[which], N_tilde[which]
        for i in range(n):
            for j in range(n):
                row = np.zeros(2 * n, complex)
                row[i] += Nb[i, j]
                row[n + j] -= Nt[i, j]
                rows.append(row)
    A = np.array(rows)
    scale = np.linalg.norm(A, axis=1, keepdims=True)
    A = A / np.where(scale > 0, scale, 1.0)
    _, s, vh = np.linalg.svd(A)
    null = vh[s.size:].conj().T if s.size < 2 * n else np.zeros((2 * n, 0))
    small = vh[: s.size][s <= tol * max(s[0], 1.0)].conj().T if s.size else np.zeros((2 * n, 0))
    basis = np.hstack([small, null])
    ones = np.ones(2 * n, complex)
    if basis.shape[1] == 0:
        z = vh[-1].conj()
        z = z / np.mean(z)
    else:
        z = basis @ (basis.conj().T @ ones)
        z = z / np.mean(z)
    Q_D, Q_U = np.diag(z[:n]), np.diag(z[n:])
    residual = max(float(np.max(np.abs(Q_D @ N_bar[w] - N_tilde[w] @ Q_U))) for w in ("L", "R"))
    deviation = float(np.max(np.abs(z - 1)))
    gaps = {w: np.abs(N_tilde[w] - N_bar[w]) for w in ("L", "R")}
    return AutoIntersectionReport(N_bar, N_tilde, Q_D, Q_U, residual, deviation, gaps)


# ---------------------------------------------------------------- families


def summability_gap(family: dict, tol: float = 1e-300) -> dict:
    """Regress log ||C(eps_tilde) - C(eps_bar)|| on -1/sqrt|eps| over a ladder.

    `family` maps |eps| to a pair (canonical collection at eps_bar, at eps_tilde).
    """
    if len(family) < 3:
        raise MalformedInput("summability_gap needs at least three ladder points")
    mods = sorted(family)
    gaps = []
    for m in mods:
        a, b = family[m]
        ca, _ = canonicalize(a)
        cb, _ = canonicalize(b)
        gaps.append(float(max(np.max(np.abs(ca.C_R - cb.C_R)), np.max(np.abs(ca.C_L - cb.C_L)))))
    gaps = np.array(gaps)
    if np.all(gaps <= tol):
        return {"moduli": mods, "gaps": gaps.tolist(), "identically_summable": True,
                "slope": math.inf, "log_intercept": -math.inf, "r2": 1.0}
    xs = -1.0 / np.sqrt(np.array(mods))
    ys = np.log(np.maximum(gaps, tol))
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return {"moduli": mods, "gaps": gaps.tolist(), "identically_summable": False,
            "slope": float(slope), "log_intercept": float(intercept), "r2": r2,
            "flag": "exponential" if slope > 0 and r2 > 0.9 else "not exponential"}


def ladder_limit(moduli: Sequence[float], collections: Sequence[StokesCollection], degree: int = 2) -> StokesCollection:
    """Extrapolate canonical collections along a ray to |eps| = 0 by a polynomial fit in |eps|."""
    cans = [canonicalize(c)[0] for c in collections]
    m = np.asarray(moduli, float)
    deg = min(degree, len(m) - 1)
    V = np.vander(m, deg + 1)
    out = []
    for attr in ("C_R", "C_L"):
        stack = np.array([getattr(c, attr) for c in cans])
        flat = stack.reshape(len(m), -1)
        coef, *_ = np.linalg.lstsq(V, flat, rcond=None)
        out.append(coef[-1].reshape(stack.shape[1:]))
    return StokesCollection(ZERO, out[0], out[1], None, None, {"extrapolated_from": list(map(float, m))})


def reducibility_analysis(family: Sequence[StokesCollection], tol: float = 1e-8, unstable_factor: float = 100.0) -> dict:
    """Block structure, trivial columns and rows common to every collection of the family.

    An entry is nonzero if it exceeds tol at every sample, zero if it stays below tol
    everywhere; anything in between is reported as unstable and ignored.
    """
    n = family[0].n
    support = np.zeros((n, n), bool)  # symmetric coupling pattern from both matrices
    unstable = []
    colR = np.ones(n, bool)
    rowR = np.ones(n, bool)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            vals = np.array([abs((c.C_R if i < j else c.C_L)[i, j]) for c in family])
            big = vals > tol
            if big.all():
                support[i, j] = support[j, i] = True
                colR[j] = False
                rowR[i] = False
            elif big.any():
                unstable.append((i + 1, j + 1))
    # connected components give the finest block partition
    seen, blocks = set(), []
    for s in range(n):
        if s in seen:
            continue
        comp, stack = [], [s]
        seen.add(s)
        while stack:
            a = stack.pop()
            comp.append(a)
            for b in range(n):
                if support[a, b] and b not in seen:
                    seen.add(b)
                    stack.append(b)
        blocks.append(sorted(comp))
    blocks.sort()
    perm = [i for b in blocks for i in b]
    return {
        "blocks": [[i + 1 for i in b] for b in blocks],
        "permutation": [i + 1 for i in perm],
        "order_preserving": all(perm[k] < perm[k + 1] for b in blocks for k in range(len(b) - 1)),
        "trivial_columns": [j + 1 for j in range(n) if colR[j]],
        "trivial_rows": [i + 1 for i in range(n) if rowR[i]],
        "unstable": unstable,
    }


def log_term_predicates(sc0: StokesCollection, resonance: tuple, fi_along: FormalInvariants | None = None,
                        tol: float = 1e-10, limit_tol: float = 1e-3) -> dict:
    """Obstruction to a Floquet solution at the resonance Delta_{sj,l} -> 1.

    The obstruction is lim (1 - Delta_{sj,l}) (T_l)_{sj}. Intermediate ratios
    Delta_{kj,l} tend to 0 or infinity along the resonance sequence (decided from
    `fi_along`), so Delta/(1 - Delta) tends to 0 or -1 and the limit is an
    integer-coefficient polynomial in the Stokes entries.
    """
    s, j, which = resonance
    s0, j0 = s - 1, j - 1
    C = sc0.C_R if which == "R" else sc0.C_L
    if (which == "R" and not s0 < j0) or (which == "L" and not s0 > j0):
        return {"status": "inconclusive", "reason": "index order does not match the triangle"}
    lo, hi = min(s0, j0), max(s0, j0)
    limits = {}
    for k in range(lo + 1, hi):
        if fi_along is None:
            return {"status": "inconclusive", "reason": "non-adjacent resonance needs a sample along the sequence"}
        dk = abs(fi_along.delta(k, j0, which))
        if abs(math.log(dk)) < limit_tol:
            return {"status": "inconclusive", "reason": f"Delta_{k + 1}{j},{which} has no limit in {{0, inf}}"}
        limits[k] = -1 if dk > 1 else 0

    memo = {}

    def N(i):
        """Limit numerator for row i, column j0, with its polynomial text."""
        if i in memo:
            return memo[i]
        val = C[i, j0]
        text = f"C{i + 1}{j}"
        ks = range(i + 1, j0) if which == "R" else range(j0 + 1, i)
        for k in ks:
            g = limits.get(k, 0)
            if g == 0:
                continue
            v, t = N(k)
            val = val + g * C[i, k] * v
            text += f" - C{i + 1}{k + 1}*({t})" if "+" in t or " - " in t else f" - C{i + 1}{k + 1}*{t}"
        memo[i] = (val, text)
        return memo[i]

    value, poly = N(s0)
    return {"status": "conclusive", "blocked": bool(abs(value) > tol), "value": complex(value),
            "polynomial": poly, "blocks": f"w_{j},{which}"}
