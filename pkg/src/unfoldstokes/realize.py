"""Realization of a Stokes collection at a fixed parameter by iterated Cauchy integrals.

The jump I + Z lives on the two overlap lenses at x_L and x_R (Z = 0 on the
central component). Each step splits the current jump additively with Cauchy
integrals over a pair of contours hugging the lens from outside,
Z_U - Z_D = Z_old, and passes on the quadratically smaller remainder
Z_new = Z_D Z_old (I + Z_U)^{-1}. The products of the factors I + Z_s give
H_D, H_U with H_D^{-1} H_U = I + Z, and A = p H' H^{-1} + H Lambda H^{-1}.

All contours are described in the oblique strip coordinates (u, sigma) of the
t-plane: the lens around the axis is |sigma| < a(u), and the level-nu contour of
side s sits at sigma = -+(1 + eta_nu) a(u) (U below, D above), cut off at
|x| = r_nu. The D contours are closed across the lens by an arc of radius r_nu.
Both eta_nu and r_nu decrease with nu, so every later contour lies inside the
analyticity domains of all earlier factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractionError, GeometryError, ResonanceError
from .geometry import SectorS, StripGeometry, admissible_sector, sector_domains, t_coordinate, x_of_t
from .systems import FormalInvariants, UnfoldedParameter, UnfoldedSystem, ZERO, side_index, system_from_matrices

__all__ = [
    "model_log_frame", "jump_data", "JumpData", "RealizationState", "cauchy_split", "birkhoff_factorize",
    "assemble_system", "ReconstructedSystem", "fit_polynomial_system", "roundtrip", "realization_geometry",
    "jump_residual", "boundedness_certificate", "band_coordinates",
]

GL_ORDER = 16
PANEL = 1.2  # panel length over the gap to the next level
_CHUNK = 2048


# ---------------------------------------------------------------- model frame and jump


def realization_geometry(fi: FormalInvariants, eps: UnfoldedParameter, r: float = 1.0,
                         S: SectorS | None = None, delta: float | None = None, c: float = 1.0):
    if S is None:
        S = admissible_sector(FormalInvariants.from_model(fi.lam[:, 0], fi.lam[:, 1], ZERO))
    geo = sector_domains(eps, S, r, c, delta)["D"].geometry
    return geo, S


def band_coordinates(geo: StripGeometry, x):
    """(u, sigma) of x with sigma reduced to the band around the lens axis."""
    t = t_coordinate(geo.eps, np.asarray(x, complex))
    u, s = geo.oblique(t)
    u, s = np.asarray(u, float), np.asarray(s, float)
    if not geo.is_zero:
        P = geo.period_length
        s = s - P * np.round(s / P)
    return u, s


def _log_one_minus_E(geo: StripGeometry, u, sigma, samples: int = 96) -> np.ndarray:
    """log(1 - e^{2 w t}) continued from (u, sigma) = (0, -P/2), where it equals log 2.

    The path goes along sigma = -P/2 to the target u, then straight in sigma; it
    meets no zero of 1 - e^{2 w t} (those sit at t in the period lattice).
    """
    w = geo.eps.sqrt_eps
    P = geo.period_length
    u = np.atleast_1d(np.asarray(u, float))
    sigma = np.atleast_1d(np.asarray(sigma, float))
    s = np.linspace(0.0, 1.0, samples)[None, :]
    leg1 = geo.t_of(u[:, None] * s, -0.5 * P * np.ones_like(s))
    leg2 = geo.t_of(u[:, None] * np.ones_like(s), -0.5 * P + (sigma[:, None] + 0.5 * P) * s)
    t = np.concatenate([leg1, leg2[:, 1:]], axis=1)
    val = 1.0 - np.exp(2 * w * t)
    ang = np.unwrap(np.angle(val), axis=1)
    ang = ang - ang[:, :1]  # the reference value is 2, argument 0
    return np.log(np.abs(val[:, -1])) + 1j * ang[:, -1]


def model_log_frame(fi: FormalInvariants, geo: StripGeometry, u, sigma) -> np.ndarray:
    """log of the diagonal of F_D at the band points (u, sigma), continuous on Omega_D."""
    u = np.atleast_1d(np.asarray(u, float))
    sigma = np.atleast_1d(np.asarray(sigma, float))
    t = geo.t_of(u, sigma)
    lam = fi.lam
    if geo.is_zero:
        # arg x in (-pi - delta', delta'): the branch of Omega_D
        phi = np.angle(-t)
        phi = np.where(phi < -0.5 * math.pi, phi + 2 * math.pi, phi)
        logx = -(np.log(np.abs(t)) + 1j * phi)
        return logx[:, None] * lam[None, :, 1] + t[:, None] * lam[None, :, 0]
    eps = geo.eps
    w = eps.sqrt_eps
    two_wt = 2 * w * t
    log_p = math.log(4 * eps.modulus) + 1j * eps.argument + two_wt - 2 * _log_one_minus_E(geo, u, sigma)
    logL = 0.5 * (log_p + two_wt)
    logR = 0.5 * (log_p - two_wt)
    muL = fi.mu[:, side_index("L")]
    muR = fi.mu[:, side_index("R")]
    return logL[:, None] * muL[None, :] + logR[:, None] * muR[None, :]


def _jump_from_logs(C: np.ndarray, logs: np.ndarray) -> np.ndarray:
    n = C.shape[0]
    out = np.zeros((logs.shape[0], n, n), complex)
    for i in range(n):
        for j in range(n):
            if i != j and C[i, j] != 0:
                out[:, i, j] = C[i, j] * np.exp(logs[:, i] - logs[:, j])
    return out


def _jump(fi, target, geo, u, sigma) -> np.ndarray:
    """Z = F_D C_l F_D^{-1} - I on the band of lens l (l = L for u > 0)."""
    u = np.atleast_1d(np.asarray(u, float))
    logs = model_log_frame(fi, geo, u, sigma)
    left = u > 0
    out = np.zeros((len(u), fi.n, fi.n), complex)
    if np.any(left):
        out[left] = _jump_from_logs(target.C_L, logs[left])
    if np.any(~left):
        out[~left] = _jump_from_logs(target.C_R, logs[~left])
    return out


@dataclass
class JumpData:
    nodes: dict  # (lens, side) -> (x, Z) on the level-1 contours
    flatness: dict  # lens -> {N: K_N}
    slopes: dict  # lens -> fitted slope of log|Z| against log|x - x_l|
    sup: float


def _axis_samples(geo: StripGeometry, lens: str, u_inner: float, r: float, m: int = 40):
    """Points on the lens axis from |x| ~ r/2 toward the inner end."""
    sgn = 1.0 if lens == "L" else -1.0
    u0 = _edge_u(geo, lambda uu: geo.t_of(uu, 0.0), 0.5 * r, sgn)
    us = sgn * np.geomspace(abs(u0), abs(u_inner), m)
    return us, x_of_t(geo.eps, geo.t_of(us, 0.0))


def jump_data(fi: FormalInvariants, target, eps: UnfoldedParameter, geo: StripGeometry | None = None,
              nu: int = 1, max_nu: int = 20, eta1: float = 0.6, shrink: float = 0.25,
              limit: float = 0.5) -> JumpData:
    """Jump Z on the level-nu contours with flatness estimates K_N, N = 1..4, near x_L and x_R."""
    if geo is None:
        geo, _ = realization_geometry(fi, eps)
    sched = _Schedule(geo, max_nu, eta1, shrink)
    u_inner = {lens: _inner_end(fi, target, geo, lens, sched) for lens in ("L", "R")}
    nodes = {}
    sup = 0.0
    for lens in ("L", "R"):
        for side in ("D", "U"):
            piece = _lens_piece(geo, lens, side, nu, sched, u_inner[lens])
            Z = _jump(fi, target, geo, piece["u"], piece["sigma"])
            nodes[(lens, side)] = (piece["x"], Z)
            sup = max(sup, float(np.max(np.abs(Z))) if len(Z) else 0.0)
    if sup > limit:
        raise GeometryError(f"jump reaches {sup:.3g} > {limit} on the contours; reduce the radius r")
    flat, slopes = {}, {}
    for lens in ("L", "R"):
        us, xs = _axis_samples(geo, lens, u_inner[lens], geo.r)
        Z = _jump(fi, target, geo, us, np.zeros_like(us))
        nz = np.linalg.norm(Z, axis=(1, 2))
        xl = 0j if geo.is_zero else geo.eps.point(lens)
        d = np.abs(xs - xl)
        flat[lens] = {N: float(np.max(nz / d ** N)) for N in range(1, 5)}
        ok = (nz > 1e-250) & (nz < 1e-3)
        slopes[lens] = float(np.polyfit(np.log(d[ok]), np.log(nz[ok]), 1)[0]) if ok.sum() >= 3 else math.inf
    return JumpData(nodes, flat, slopes, sup)


# ---------------------------------------------------------------- contours


@dataclass(frozen=True)
class _Schedule:
    geo: StripGeometry
    max_nu: int
    eta1: float
    shrink: float

    def eta(self, nu: int) -> float:
        return self.eta1 * (self.max_nu + 1 - nu) / self.max_nu

    def radius(self, nu: int) -> float:
        return self.geo.r * (1.0 - self.shrink * (nu - 1) / self.max_nu)

    @property
    def d_eta(self) -> float:
        return self.eta1 / self.max_nu

    @property
    def d_r(self) -> float:
        return self.geo.r * self.shrink / self.max_nu


def _edge_u(geo: StripGeometry, t_fn, radius: float, sgn: float) -> float:
    """u (of sign sgn) where the curve u -> x(t_fn(u)) leaves the disk |x| < radius."""

    def inside(uu):
        return abs(complex(x_of_t(geo.eps, t_fn(uu)))) < radius

    far = sgn * 1.0
    while not inside(far):
        far *= 2.0
        if abs(far) > 1e9:
            raise GeometryError("lens does not enter the disk")
    near = sgn * 1e-9
    while inside(near):
        near *= 0.5
    lo, hi = far, near
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if inside(mid):
            lo = mid
        else:
            hi = mid
        if abs(hi - lo) < 1e-14 * max(1.0, abs(mid)):
            break
    return lo


def _contour_sigma(geo, sign, eta, u):
    return sign * (1.0 + eta) * geo.lens_half_width(u)


def _inner_end(fi, target, geo: StripGeometry, lens: str, sched: _Schedule, flat_tol: float = 1e-17) -> float:
    """Common inner cutoff in u: where the jump is negligible on the widest contours,
    or where the widest contour would leave the band (a(u) saturates)."""
    sgn = 1.0 if lens == "L" else -1.0
    scale = max(1.0, float(np.max(np.abs(target.C_L if lens == "L" else target.C_R))))
    u = sgn * max(1.0, abs(_edge_u(geo, lambda uu: geo.t_of(uu, 0.0), geo.r, sgn)))
    depth = 4.0 * abs(u)  # keeps the lens nondegenerate when the jump vanishes identically
    cap = math.inf
    if not geo.is_zero:
        cap = 0.24 * geo.period_length / ((1 + sched.eta1) * math.tan(geo.delta))
    while True:
        if abs(u) >= cap:
            return sgn * cap
        probe = []
        for sign in (-1.0, 1.0):
            Z = _jump(fi, target, geo, np.array([u]), _contour_sigma(geo, sign, sched.eta1, np.array([u])))
            probe.append(float(np.max(np.abs(Z))))
        if max(probe) < flat_tol * scale and abs(u) >= depth:
            return u
        u *= 1.05
        if abs(u) > 1e7:
            raise GeometryError("jump does not decay toward the singular point")


def _gl(a: float, b: float):
    z, w = np.polynomial.legendre.leggauss(GL_ORDER)
    return 0.5 * (a + b) + 0.5 * (b - a) * z, 0.5 * (b - a) * w


def _lens_piece(geo: StripGeometry, lens: str, side: str, nu: int, sched: _Schedule, u_inner: float) -> dict:
    """Quadrature nodes of the level-nu contour of `side` at lens `lens`, inner end first."""
    sgn = 1.0 if lens == "L" else -1.0
    sign = 1.0 if side == "D" else -1.0
    eta = sched.eta(nu)
    tan_d = math.tan(geo.delta)

    def t_fn(uu):
        return geo.t_of(uu, _contour_sigma(geo, sign, eta, uu))

    u_outer = _edge_u(geo, t_fn, sched.radius(nu), sgn)
    # panel lengths: a fraction of the gap to the neighbouring level, in t and near the rim in x
    brk = [abs(u_inner)]
    while brk[-1] > abs(u_outer):
        uu = brk[-1]
        x = complex(x_of_t(geo.eps, t_fn(sgn * uu)))
        dxdt = abs(x * x - geo.eps.eps)
        gap_t = sched.d_eta * tan_d * uu
        gap_rim = max(sched.radius(nu) - sched.radius(nu + 1), 1e-3 * geo.r)
        step = min(PANEL * gap_t, PANEL * gap_rim / max(dxdt, 1e-300), 0.5 * uu)
        brk.append(max(uu - step, abs(u_outer)))
    kinks = [] if geo.is_zero else [geo.half_length, 0.25 * geo.period_length / tan_d]
    inner = [k for k in kinks if abs(u_outer) < k < abs(u_inner)]
    brk = np.array(sorted(set(brk) | set(inner), reverse=True)) * sgn  # axis bend, a(u) saturation
    us, ws = [], []
    for a, b in zip(brk[:-1], brk[1:]):
        z, w = _gl(a, b)
        us.append(z)
        ws.append(w)
    u = np.concatenate(us)
    wu = np.concatenate(ws)  # signed: inner -> outer
    sigma = _contour_sigma(geo, sign, eta, u)
    t = geo.t_of(u, sigma)
    x = x_of_t(geo.eps, t)
    sat = geo.lens_half_width(u) < tan_d * np.abs(u)
    dsig = np.where(sat, 0.0, sign * (1.0 + eta) * tan_d * np.sign(u))
    dtdu = geo.axis_derivative(u) + dsig * geo.e_p
    dh = (x * x - geo.eps.eps) * dtdu * wu
    end = complex(x_of_t(geo.eps, t_fn(u_outer)))
    return {"u": u, "sigma": sigma, "x": x, "dh": dh, "u_outer": u_outer, "end": end}


def _rim_arc(geo: StripGeometry, start: complex, end: complex, gap: float) -> dict:
    """Short arc |x| = const from start to end."""
    rad = abs(start)
    a0 = float(np.angle(start))
    da = float(np.angle(end / start))
    panels = max(2, int(math.ceil(abs(da) * rad / (PANEL * gap))))
    ths, ws = [], []
    for k in range(panels):
        z, w = _gl(a0 + da * k / panels, a0 + da * (k + 1) / panels)
        ths.append(z)
        ws.append(w)
    th = np.concatenate(ths)
    x = rad * np.exp(1j * th)
    dh = 1j * x * np.concatenate(ws)
    u, s = band_coordinates(geo, x)
    return {"u": u, "sigma": s, "x": x, "dh": dh}


def _winding(points: np.ndarray, z: complex) -> float:
    closed = np.append(points, points[0])
    return float(np.sum(np.angle((closed[1:] - z) / (closed[:-1] - z))) / (2 * math.pi))


@dataclass
class ContourLevel:
    """Level-nu contours of one side: nodes, weights and the jump Z^nu there."""

    nu: int
    side: str
    x: np.ndarray
    dh: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    orient: np.ndarray  # +-1 per node, from the lens winding
    values: np.ndarray | None = None  # (N, n, n)

    def weights(self) -> np.ndarray:
        return -self.orient * self.dh / (2j * math.pi)


def _build_level(geo, sched, nu, u_inner) -> dict:
    levels = {}
    pieces = {(lens, side): _lens_piece(geo, lens, side, nu, sched, u_inner[lens])
              for lens in ("L", "R") for side in ("D", "U")}
    parts = {"D": [], "U": []}
    for lens in ("L", "R"):
        pD, pU = pieces[(lens, "D")], pieces[(lens, "U")]
        arc = _rim_arc(geo, pD["end"], pU["end"], sched.d_r)
        loop = np.concatenate([pD["x"], arc["x"], pU["x"][::-1]])
        sgn = 1.0 if lens == "L" else -1.0
        um = sgn * math.sqrt(abs(u_inner[lens] * pD["u_outer"]))
        probe = complex(x_of_t(geo.eps, geo.t_of(um, 0.0)))
        wnd = _winding(loop, probe)
        if abs(abs(wnd) - 1) > 1e-6:
            raise GeometryError(f"lens contours at {lens} do not enclose the lens (winding {wnd:.3f})")
        o = float(np.sign(wnd))
        for key, piece in (("D", pD), ("D", arc), ("U", pU)):
            parts[key].append((piece, o))
    for side in ("D", "U"):
        cat = lambda k: np.concatenate([p[k] for p, _ in parts[side]])
        orient = np.concatenate([np.full(len(p["x"]), o) for p, o in parts[side]])
        levels[side] = ContourLevel(nu, side, cat("x"), cat("dh"), cat("u"), cat("sigma"), orient)
    return levels


# ---------------------------------------------------------------- iteration


def _cauchy(level: ContourLevel, x: np.ndarray, power: int = 1) -> np.ndarray:
    """sum_k w_k Z(h_k) / (h_k - x)^power, the Cauchy integral (power 1) or its derivative (power 2)."""
    n = level.values.shape[1]
    V = (level.weights()[:, None] * level.values.reshape(len(level.x), n * n))
    out = np.empty((len(x), n * n), complex)
    for a in range(0, len(x), _CHUNK):
        xx = x[a:a + _CHUNK]
        K = 1.0 / (level.x[None, :] - xx[:, None]) ** power
        out[a:a + _CHUNK] = K @ V
    return out.reshape(len(x), n, n)


@dataclass
class RealizationState:
    fi: FormalInvariants
    target: object
    geo: StripGeometry
    schedule: _Schedule
    u_inner: dict
    levels: list = field(default_factory=list)  # levels[k] = {"D": ContourLevel, "U": ...} for nu = k + 1
    norms: list = field(default_factory=list)  # sup |Z^nu| on the level-nu contours
    nu: int = 1

    @property
    def n(self) -> int:
        return self.fi.n

    def jump(self, u, sigma) -> np.ndarray:
        return _jump(self.fi, self.target, self.geo, u, sigma)

    def factor(self, mu: int, side: str, x: np.ndarray, power: int = 1) -> np.ndarray:
        """Z_side^mu at x (the Cauchy integral over the level mu - 1 contours)."""
        return _cauchy(self.levels[mu - 2][side], np.asarray(x, complex), power)

    def remainder(self, level: int, x, u, sigma) -> np.ndarray:
        """Z^level at band points, continued analytically from the lens."""
        Z = self.jump(u, sigma)
        eye = np.eye(self.n)
        for mu in range(2, level + 1):
            ZD = self.factor(mu, "D", x)
            ZU = self.factor(mu, "U", x)
            Z = ZD @ Z @ np.linalg.inv(eye + ZU)
        return Z

    def H(self, side: str, x) -> np.ndarray:
        """H_side = (I + Z^nu_side) ... (I + Z^2_side) at x."""
        x = np.atleast_1d(np.asarray(x, complex))
        out = np.broadcast_to(np.eye(self.n, dtype=complex), (len(x), self.n, self.n)).copy()
        for mu in range(2, self.nu + 1):
            out = (np.eye(self.n) + self.factor(mu, side, x)) @ out
        return out

    def H_and_derivative(self, side: str, x):
        x = np.atleast_1d(np.asarray(x, complex))
        eye = np.eye(self.n)
        H = np.broadcast_to(np.eye(self.n, dtype=complex), (len(x), self.n, self.n)).copy()
        dH = np.zeros_like(H)
        for mu in range(2, self.nu + 1):
            F = eye + self.factor(mu, side, x)
            dF = self.factor(mu, side, x, power=2)
            dH = dF @ H + F @ dH
            H = F @ H
        return H, dH

    def ledger(self) -> dict:
        return {"nu": self.nu, "norms": list(self.norms),
                "nodes": [int(len(lv["D"].x) + len(lv["U"].x)) for lv in self.levels]}


def cauchy_split(state: RealizationState, nu: int, s: str, points) -> np.ndarray:
    """Z_s^nu at the given points: the Cauchy integral of Z^{nu-1} over the level nu - 1 contours."""
    if nu < 2 or nu - 2 >= len(state.levels):
        raise ValueError(f"level {nu} is not available")
    return state.factor(nu, s, np.asarray(points, complex))


def _new_state(fi, target, eps, r, S, max_nu, eta1, shrink):
    geo, S = realization_geometry(fi, eps, r, S)
    sched = _Schedule(geo, max_nu, eta1, shrink)
    u_inner = {lens: _inner_end(fi, target, geo, lens, sched) for lens in ("L", "R")}
    state = RealizationState(fi, target, geo, sched, u_inner)
    lv = _build_level(geo, sched, 1, u_inner)
    for side in ("D", "U"):
        lv[side].values = state.jump(lv[side].u, lv[side].sigma)
    state.levels.append(lv)
    state.norms.append(float(max(np.max(np.abs(lv[s].values)) for s in ("D", "U"))))
    return state, S


def _factorize_once(fi, target, eps, max_nu, tol, r, S, eta1, shrink, limit):
    state, S = _new_state(fi, target, eps, r, S, max_nu, eta1, shrink)
    if state.norms[0] > limit:
        raise GeometryError(f"jump reaches {state.norms[0]:.3g} > {limit} on the contours; reduce r")
    slow = 0
    while state.norms[-1] >= tol and state.nu < max_nu:
        nu = state.nu + 1
        lv = _build_level(state.geo, state.schedule, nu, state.u_inner)
        state.nu = nu  # the factors of level nu use the level nu - 1 contours, already stored
        for side in ("D", "U"):
            c = lv[side]
            c.values = state.remainder(nu, c.x, c.u, c.sigma)
        state.levels.append(lv)
        state.norms.append(float(max(np.max(np.abs(lv[s].values)) for s in ("D", "U"))))
        slow = slow + 1 if state.norms[-1] > 0.5 * state.norms[-2] else 0
        if slow >= 3:
            raise ContractionError(f"|Z^nu| stalls: {state.norms}")
    return state, S


def birkhoff_factorize(fi: FormalInvariants, target, eps: UnfoldedParameter, max_nu: int = 20,
                       tol: float = 1e-12, r: float = 1.0, S: SectorS | None = None, eta1: float = 0.6,
                       shrink: float = 0.25, retries: int = 3, limit: float = 0.5):
    """Factor I + Z = H_D^{-1} H_U. Returns (H_D, H_U, state); H_s are callables of x.

    On contraction failure (or a jump above `limit`) the radius is halved, up to
    `retries` times.
    """
    if not eps.is_zero and fi.mu is None:
        raise ResonanceError("formal invariants lack exponents at this parameter")
    last = None
    for attempt in range(retries + 1):
        try:
            state, S = _factorize_once(fi, target, eps, max_nu, tol, r, S, eta1, shrink, limit)
            state.S = S
            state.attempts = attempt + 1
            return (lambda x: state.H("D", x)), (lambda x: state.H("U", x)), state
        except (ContractionError, GeometryError) as exc:
            last = exc
            r *= 0.5
    raise ContractionError(f"factorization failed after {retries + 1} attempts: {last}")


def jump_residual(state: RealizationState, samples: int = 50, seed: int = 0) -> dict:
    """max |H_D^{-1} H_U - (I + Z)| on fresh lens points of each component (and on C)."""
    rng = np.random.default_rng(seed)
    geo = state.geo
    r_in = state.schedule.radius(state.nu + 1)
    out = {}
    for lens in ("L", "R"):
        sgn = 1.0 if lens == "L" else -1.0
        u_out = _edge_u(geo, lambda uu: geo.t_of(uu, 0.0), r_in, sgn)
        lo, hi = math.log(abs(u_out)), math.log(abs(state.u_inner[lens]))
        u = sgn * np.exp(rng.uniform(lo, lo + 0.7 * (hi - lo), samples))
        sig = rng.uniform(-0.9, 0.9, samples) * geo.lens_half_width(u)
        x = x_of_t(geo.eps, geo.t_of(u, sig))
        keep = np.abs(x) < r_in
        u, sig, x = u[keep], sig[keep], x[keep]
        J = np.eye(state.n) + state.jump(u, sig)
        HD, HU = state.H("D", x), state.H("U", x)
        out[lens] = float(np.max(np.abs(np.linalg.solve(HD, HU) - J))) if len(x) else math.nan
    if not geo.is_zero:
        P = geo.period_length
        u = rng.uniform(-1.0, 1.0, samples) * 0.5 * geo.half_length
        x = x_of_t(geo.eps, geo.t_of(u, -0.5 * P + rng.uniform(-0.05, 0.05, samples) * P))
        x = x[np.abs(x) < r_in]
        if len(x):
            out["C"] = float(np.max(np.abs(np.linalg.solve(state.H("D", x), state.H("U", x)) - np.eye(state.n))))
    return out


# ---------------------------------------------------------------- reconstruction


@dataclass
class ReconstructedSystem:
    grid: np.ndarray
    values: np.ndarray  # A at the grid points
    sides: np.ndarray
    certificates: dict

    def at(self, k: int) -> np.ndarray:
        return self.values[k]


def _side_for(state: RealizationState, x: np.ndarray) -> np.ndarray:
    """Per point, the side whose own contours are farthest (among sides containing the point)."""
    geo = state.geo
    inD = geo.member(x, "D")
    inU = geo.member(x, "U")
    dist = {}
    for side in ("D", "U"):
        pts = np.concatenate([lv[side].x for lv in state.levels[: max(1, state.nu - 1)]])
        d = np.full(len(x), np.inf)
        for a in range(0, len(x), 256):
            d[a:a + 256] = np.min(np.abs(pts[None, :] - x[a:a + 256, None]), axis=1)
        dist[side] = d
    pickD = np.where(inD & inU, dist["D"] >= dist["U"], inD)
    if np.any(~(inD | inU)):
        raise GeometryError("grid point outside both sectorial domains")
    return np.where(pickD, "D", "U"), np.where(pickD, dist["D"], dist["U"])


def assemble_system(state: RealizationState, grid) -> ReconstructedSystem:
    """A = (x^2 - eps) H' H^{-1} + H Lambda H^{-1} at the grid points."""
    x = np.atleast_1d(np.asarray(grid, complex))
    sides, clearance = _side_for(state, x)
    vals = np.empty((len(x), state.n, state.n), complex)
    lam = state.fi.lam
    e = state.geo.eps.eps
    for side in ("D", "U"):
        m = sides == side
        if not np.any(m):
            continue
        H, dH = state.H_and_derivative(side, x[m])
        Hinv = np.linalg.inv(H)
        Lam = lam[None, :, 0] + lam[None, :, 1] * x[m][:, None]
        vals[m] = ((x[m] ** 2 - e)[:, None, None] * dH @ Hinv) + (H * Lam[:, None, :]) @ Hinv
    cert = {"min_clearance": float(np.min(clearance)) if len(x) else math.nan,
            "max_abs": float(np.max(np.abs(vals))) if len(x) else math.nan}
    return ReconstructedSystem(x, vals, sides, cert)


def fit_polynomial_system(state: RealizationState, radius: float | None = None, samples: int = 256,
                          degree: int | None = None, drop: float = 1e-15):
    """Taylor coefficients of A from samples on |x| = radius; returns (UnfoldedSystem, info).

    The system has no eps dependence: it is meant for use at the realized parameter.
    """
    radius = 0.7 * state.schedule.radius(state.nu + 1) if radius is None else radius
    th = 2 * math.pi * np.arange(samples) / samples
    rec = assemble_system(state, radius * np.exp(1j * th))
    coef = np.fft.fft(rec.values, axis=0) / samples  # coef[k] ~ a_k radius^k for k < samples / 2
    half = samples // 2
    mags = np.array([np.max(np.abs(coef[k])) for k in range(half)])
    if degree is None:
        big = np.nonzero(mags > drop * mags.max())[0]
        degree = int(big.max()) if len(big) else 0
    terms = {(k, 0): coef[k] / radius ** k for k in range(degree + 1)}
    tail = float(np.max(mags[degree + 1:half])) if degree + 1 < half else 0.0
    # consistency inside the circle: direct evaluation against the polynomial
    probe = 0.5 * radius * np.exp(1j * (th[:16] + 0.1))
    direct = assemble_system(state, probe).values
    poly = sum(terms[(k, 0)][None] * probe[:, None, None] ** k for k in range(degree + 1))
    info = {"radius": radius, "degree": degree, "tail": tail,
            "interior_mismatch": float(np.max(np.abs(direct - poly))), "clearance": rec.certificates["min_clearance"]}
    return system_from_matrices(terms), info


def boundedness_certificate(state: RealizationState, system: UnfoldedSystem, radii=(0.3, 0.1, 0.03)) -> dict:
    """Sup of |A| on shrinking circles around x_L, x_R (polynomial and direct evaluation)."""
    geo = state.geo
    if geo.is_zero:
        centers = {"0": 0j}
        scale = state.schedule.radius(state.nu + 1)
    else:
        centers = {"L": geo.eps.x_L, "R": geo.eps.x_R}
        scale = abs(geo.eps.x_L - geo.eps.x_R)
    poly = system.at_eps(geo.eps.eps)
    out = {}
    for name, c in centers.items():
        out[name] = [float(max(np.max(np.abs(poly(complex(c + rho * scale * np.exp(1j * a)))))
                               for a in np.linspace(0, 2 * math.pi, 24, endpoint=False))) for rho in radii]
    return out


def roundtrip(fi: FormalInvariants, target, eps: UnfoldedParameter, r: float = 1.0, max_nu: int = 20,
              tol: float = 1e-12, S: SectorS | None = None, rtol: float = 1e-11, ladder=None,
              samples: int = 256) -> dict:
    """Realize `target`, refit A as a polynomial, extract again and compare canonical forms.

    At eps = 0 a `ladder` of moduli (on the ray arg 2 pi) adds the extrapolated
    extraction as a second route.
    """
    from .stokes import canonicalize, distance, extract_stokes, ladder_limit

    HD, HU, state = birkhoff_factorize(fi, target, eps, max_nu=max_nu, tol=tol, r=r, S=S)
    system, info = fit_polynomial_system(state, samples=samples)
    resid = jump_residual(state)
    ext = extract_stokes(system, eps, rtol=rtol, S=state.S)
    out = {"distance": distance(target, ext), "residual": resid, "fit": info, "ledger": state.ledger(),
           "extracted": canonicalize(ext)[0], "target": canonicalize(target)[0], "system": system}
    if eps.is_zero and ladder:
        cols = [extract_stokes(system, UnfoldedParameter(m, 2 * math.pi), rtol=rtol, S=state.S) for m in ladder]
        limit = ladder_limit(ladder, cols)
        out["ladder_distance"] = distance(target, limit)
    return out
