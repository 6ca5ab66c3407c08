"""Parameter sector, sectorial domains in x, monodromy loops and realization contours.

Domains for eps != 0 are described in the t-plane, t = log((x - x_L)/(x - x_R)) / (2 sqrt(eps)),
where x is periodic with period p = pi i / sqrt(eps). A point t is written in oblique
coordinates t = axis(u) + sigma * e_p with e_p = -p/|p|, so a period shift only changes
sigma by |p|. The axis is straight ("horizontal") on |u| < L = c / (2 sqrt|eps|) and has
slope theta_hat outside. Then
    Gamma_U = {-a(u) < sigma < 3|p|/4},   Gamma_D = {-3|p|/4 < sigma < a(u)},
with a(u) = min(tan(delta) |u|, |p|/4). The overlap |sigma| < a(u) splits into the
component R (u < 0, closure contains x_R) and L (u > 0); the shifted overlap
|p|/4 < sigma < 3|p|/4 is the component C containing x = 0.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import GeometryError
from .systems import FormalInvariants, UnfoldedParameter, side_index

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------- sector S


def gamma_from_theta0(theta0: float) -> float:
    """Positive root of gamma (1 + 2 gamma / pi) = theta0."""
    return 0.25 * math.pi * (math.sqrt(1.0 + 8.0 * theta0 / math.pi) - 1.0)


@dataclass(frozen=True)
class SectorS:
    gamma: float
    rho: float
    theta0: float

    def __post_init__(self):
        if not (self.gamma > 0 and self.rho > 0 and self.theta0 > 0):
            raise GeometryError("sector parameters must be positive")
        if not self.gamma * (1 + 2 * self.gamma / math.pi) < self.theta0:
            raise GeometryError("gamma (1 + 2 gamma / pi) must be smaller than theta0")

    @property
    def window(self) -> tuple[float, float]:
        return (math.pi - 2 * self.gamma, 3 * math.pi + 2 * self.gamma)

    def contains(self, eps: UnfoldedParameter) -> bool:
        lo, hi = self.window
        return 0.0 < eps.modulus < self.rho and lo < eps.argument < hi

    def in_autointersection(self, eps: UnfoldedParameter) -> bool:
        a = eps.argument
        return self.contains(eps) and (abs(a - 3 * math.pi) < 2 * self.gamma or abs(a - math.pi) < 2 * self.gamma)

    def partner(self, eps: UnfoldedParameter) -> UnfoldedParameter:
        """The other point of S over the same eps (eps_bar <-> eps_tilde)."""
        if not self.in_autointersection(eps):
            raise GeometryError(f"{eps} is not in the self-overlap of S")
        return eps.turned(-1 if eps.argument > 2 * math.pi else 1)

    def slope(self, eps: UnfoldedParameter) -> float:
        """theta_hat = (2 gamma / pi) (pi - arg sqrt(eps))."""
        return (2 * self.gamma / math.pi) * (math.pi - 0.5 * eps.argument)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "rho": self.rho, "theta0": self.theta0}


def _pair_differences(values: np.ndarray):
    n = len(values)
    return [values[q] - values[j] for q in range(n) for j in range(q + 1, n)]


def max_opening(lam0: np.ndarray) -> float:
    """theta0: largest angle in (0, pi/2] with Re(e^{+-i theta0} d) >= 0 for every ordered difference d."""
    diffs = _pair_differences(np.asarray(lam0, complex))
    if not diffs:
        return math.pi / 2
    if any(d.real <= 0 for d in diffs):
        raise GeometryError("leading eigenvalues are not strictly ordered; normalize the system first")
    return math.pi / 2 - max(abs(float(np.angle(d))) for d in diffs)


def admissible_sector(fi0: FormalInvariants, safety: float = 0.9,
                      fi_fn: Callable[[UnfoldedParameter], FormalInvariants] | None = None,
                      rho_max: float = 0.05, margin: float = 1e-3, grid: tuple[int, int] = (5, 9),
                      max_halvings: int = 30) -> SectorS:
    """Sector S for a strictly ordered family.

    theta0 comes in closed form from the leading differences. When `fi_fn` is
    given, rho is halved from rho_max until the margin condition
    Re(e^{+-i gamma(1+2gamma/pi)} (lam_q - lam_j)(eps, x_l)) > margin holds on a
    grid of moduli and arguments covering S.
    """
    if not 0.0 < safety < 1.0:
        raise ValueError("safety must lie in (0, 1)")
    theta0 = max_opening(fi0.lam[:, 0])
    gamma = safety * gamma_from_theta0(theta0)
    rho = rho_max
    if fi_fn is not None:
        ang = gamma * (1 + 2 * gamma / math.pi)
        for _ in range(max_halvings):
            if _margin_ok(fi_fn, gamma, rho, ang, margin, grid):
                break
            rho *= 0.5
        else:
            raise GeometryError("could not certify a sector radius")
    return SectorS(gamma, rho, theta0)


def _margin_ok(fi_fn, gamma, rho, ang, margin, grid) -> bool:
    nmod, narg = grid
    lo, hi = math.pi - 2 * gamma, 3 * math.pi + 2 * gamma
    for mod in rho * np.geomspace(1e-3, 0.999, nmod):
        for arg in np.linspace(lo, hi, narg + 2)[1:-1]:
            par = UnfoldedParameter(float(mod), float(arg))
            try:
                fi = fi_fn(par)
            except Exception:
                return False
            for which in ("L", "R"):
                vals = fi.Lambda(par.point(which))
                for d in _pair_differences(vals):
                    for sgn in (1, -1):
                        if (np.exp(1j * sgn * ang) * d).real <= margin:
                            return False
    return True


def separation_rays(fi0: FormalInvariants) -> dict:
    """For each pair (q, j): the two opposite directions of x where Re((lam_q0 - lam_j0)/x) = 0."""
    lam0 = fi0.lam[:, 0]
    out = {}
    for q in range(len(lam0)):
        for j in range(q + 1, len(lam0)):
            a = float(np.angle(lam0[q] - lam0[j])) + math.pi / 2
            out[(q, j)] = (a, a + math.pi)
    return out


# ---------------------------------------------------------------- t coordinate


def t_coordinate(eps: UnfoldedParameter, x, branch: int = 0):
    """t(x), with `branch` adding that many periods pi i / sqrt(eps)."""
    x = np.asarray(x, complex)
    if eps.is_zero:
        if np.any(x == 0):
            raise GeometryError("x = 0 is the singular point")
        return -1.0 / x
    w = eps.sqrt_eps
    if np.any(np.isclose(x, w, rtol=0, atol=0)) or np.any(np.isclose(x, -w, rtol=0, atol=0)):
        raise GeometryError("x is a singular point")
    return np.log((x - w) / (x + w)) / (2 * w) + branch * (1j * math.pi / w)


def x_of_t(eps: UnfoldedParameter, t):
    t = np.asarray(t, complex)
    if eps.is_zero:
        return -1.0 / t
    w = eps.sqrt_eps
    E = np.exp(2 * w * t)
    return w * (1 + E) / (1 - E)


def period(eps: UnfoldedParameter) -> complex:
    return 1j * math.pi / eps.sqrt_eps


# ---------------------------------------------------------------- domains

LABELS = ("D", "U", "L", "R", "C")


@dataclass(frozen=True)
class StripGeometry:
    """Shared description of Omega_D, Omega_U and their overlap components at one parameter."""

    eps: UnfoldedParameter
    r: float
    delta: float
    c: float = 1.0
    theta_hat: float = 0.0
    transverse_floor: float = 0.15  # minimal angle between the axis and the period direction

    @property
    def is_zero(self) -> bool:
        return self.eps.is_zero

    @property
    def period_length(self) -> float:
        return math.inf if self.is_zero else math.pi / math.sqrt(self.eps.modulus)

    @property
    def e_p(self) -> complex:
        if self.is_zero:
            return 1j
        p = period(self.eps)
        return -p / abs(p)

    @property
    def half_length(self) -> float:
        return math.inf if self.is_zero else self.c / (2 * math.sqrt(self.eps.modulus))

    @property
    def middle_direction(self) -> complex:
        """Direction of the central axis piece: horizontal unless nearly parallel to e_p."""
        if self.is_zero:
            return 1.0 + 0j
        beta = 0.5 * self.eps.argument - math.pi
        if math.cos(beta) >= math.sin(self.transverse_floor):
            return 1.0 + 0j
        eta = math.copysign(math.pi / 2 - self.transverse_floor, beta) - beta
        return complex(math.cos(eta), math.sin(eta))

    @property
    def arm_direction(self) -> complex:
        return complex(math.cos(self.theta_hat), math.sin(self.theta_hat))

    def lens_half_width(self, u):
        a = math.tan(self.delta) * np.abs(u)
        if not self.is_zero:
            a = np.minimum(a, 0.25 * self.period_length)
        return a

    def axis(self, u):
        u = np.asarray(u, float)
        if self.is_zero:
            return u.astype(complex)
        L, dm, da = self.half_length, self.middle_direction, self.arm_direction
        mid = np.clip(u, -L, L) * dm
        return mid + np.where(u > L, (u - L) * da, 0) + np.where(u < -L, (u + L) * da, 0)

    def axis_derivative(self, u):
        u = np.asarray(u, float)
        if self.is_zero:
            return np.ones_like(u, complex)
        L = self.half_length
        return np.where(np.abs(u) <= L, self.middle_direction, self.arm_direction)

    def t_of(self, u, sigma):
        return self.axis(u) + np.asarray(sigma, float) * self.e_p

    def oblique(self, t):
        """(u, sigma) with t = axis(u) + sigma e_p (sigma not reduced modulo the period)."""
        t = np.asarray(t, complex)
        ep = self.e_p
        if self.is_zero:
            return t.real, t.imag

        def solve(d, rhs):
            det = d.real * ep.imag - d.imag * ep.real
            uu = (rhs.real * ep.imag - rhs.imag * ep.real) / det
            ss = (d.real * rhs.imag - d.imag * rhs.real) / det
            return uu, ss

        L, dm, da = self.half_length, self.middle_direction, self.arm_direction
        u_m, s_m = solve(dm, t)
        u_r, s_r = solve(da, t - L * dm)
        u_l, s_l = solve(da, t + L * dm)
        u = np.where(np.abs(u_m) <= L, u_m, np.where(u_m > L, u_r + L, u_l - L))
        s = np.where(np.abs(u_m) <= L, s_m, np.where(u_m > L, s_r, s_l))
        return u, s

    # membership

    def _reps(self, x):
        x = np.asarray(x, complex)
        t0 = t_coordinate(self.eps, x)
        u, s0 = self.oblique(t0)
        return x, u, s0

    def sigma_rep(self, x, label: str):
        """sigma of the representative of x in Gamma_label (nan when x is not in it)."""
        x, u, s0 = self._reps(x)
        a = self.lens_half_width(u)
        inside = np.abs(x) < self.r
        if self.is_zero:
            s = s0
            if label == "U":
                ok = s > -a
            elif label == "D":
                ok = s < a
            else:
                raise ValueError(label)
            return np.where(inside & ok, s, np.nan)
        P = self.period_length
        if label == "U":
            s = s0 - P * np.floor((s0 + a) / P)
            ok = (s > -a) & (s < 0.75 * P)
        elif label == "D":
            s = s0 - P * np.floor((s0 - a) / P) - P
            ok = (s > -0.75 * P) & (s < a)
        else:
            raise ValueError(label)
        return np.where(inside & ok, s, np.nan)

    def representative(self, x, label: str):
        """t in Gamma_label corresponding to x (nan outside)."""
        x, u, _ = self._reps(x)
        s = self.sigma_rep(x, label)
        return self.t_of(u, np.nan_to_num(s)) + np.where(np.isnan(s), np.nan, 0)

    def member(self, x, label: str):
        x = np.asarray(x, complex)
        if label in ("D", "U"):
            return ~np.isnan(self.sigma_rep(x, label))
        _, u, _ = self._reps(x)
        sU = self.sigma_rep(x, "U")
        sD = self.sigma_rep(x, "D")
        both = ~np.isnan(sU) & ~np.isnan(sD)
        same = both & np.isclose(np.nan_to_num(sU), np.nan_to_num(sD), rtol=0, atol=1e-9 * max(1.0, abs(u).max() if np.size(u) else 1.0))
        if label == "C":
            return both & ~same
        if label == "L":
            return same & (u > 0)
        if label == "R":
            return same & (u < 0)
        raise ValueError(label)

    def labels(self, x: complex) -> set:
        return {lab for lab in LABELS if bool(self.member(np.array([x]), lab)[0])}


@dataclass(frozen=True)
class DomainDescriptor:
    label: str
    geometry: StripGeometry

    @property
    def eps(self) -> UnfoldedParameter:
        return self.geometry.eps

    @property
    def r(self) -> float:
        return self.geometry.r

    @property
    def theta_hat(self) -> float:
        return self.geometry.theta_hat

    @property
    def c(self) -> float:
        return self.geometry.c

    def contains(self, x) -> np.ndarray | bool:
        res = self.geometry.member(np.atleast_1d(np.asarray(x, complex)), self.label)
        return bool(res[0]) if np.ndim(x) == 0 else res


def sector_domains(eps: UnfoldedParameter, S: SectorS, r: float, c: float = 1.0,
                   delta: float | None = None) -> dict[str, DomainDescriptor]:
    if not (eps.is_zero or S.contains(eps)):
        raise GeometryError(f"parameter {eps} is outside S and not zero")
    if r <= 0:
        raise GeometryError("radius must be positive")
    delta = S.gamma / 2 if delta is None else delta
    theta_hat = 0.0 if eps.is_zero else S.slope(eps)
    geo = StripGeometry(eps, r, delta, c, theta_hat)
    labels = ("D", "U", "L", "R") if eps.is_zero else LABELS
    return {lab: DomainDescriptor(lab, geo) for lab in labels}


# ---------------------------------------------------------------- paths


class Segment:
    """A path piece parametrized by tau in [0, 1]."""

    def point(self, tau):
        raise NotImplementedError

    def velocity(self, tau):
        raise NotImplementedError

    def reversed(self) -> "Segment":
        raise NotImplementedError

    def state(self, tau: float) -> tuple[complex, complex]:
        """(point, velocity) at one scalar tau; overridden where a cheap form exists."""
        return complex(self.point(tau)), complex(self.velocity(tau))

    def length(self, samples: int = 200) -> float:
        tau = np.linspace(0, 1, samples + 1)
        pts = self.point(tau)
        return float(np.sum(np.abs(np.diff(pts))))


@dataclass(frozen=True)
class Line(Segment):
    a: complex
    b: complex

    def point(self, tau):
        return self.a + (self.b - self.a) * np.asarray(tau)

    def velocity(self, tau):
        return (self.b - self.a) * np.ones_like(np.asarray(tau, float), complex)

    def reversed(self):
        return Line(self.b, self.a)

    def state(self, tau: float) -> tuple[complex, complex]:
        d = self.b - self.a
        return self.a + d * tau, d

    def to_dict(self):
        return {"kind": "line", "start": [self.a.real, self.a.imag], "end": [self.b.real, self.b.imag]}


@dataclass(frozen=True)
class Arc(Segment):
    center: complex
    radius: float
    angle0: float
    angle1: float

    def point(self, tau):
        ang = self.angle0 + (self.angle1 - self.angle0) * np.asarray(tau)
        return self.center + self.radius * np.exp(1j * ang)

    def velocity(self, tau):
        ang = self.angle0 + (self.angle1 - self.angle0) * np.asarray(tau)
        return 1j * (self.angle1 - self.angle0) * self.radius * np.exp(1j * ang)

    def reversed(self):
        return Arc(self.center, self.radius, self.angle1, self.angle0)

    def state(self, tau: float) -> tuple[complex, complex]:
        span = self.angle1 - self.angle0
        z = self.radius * cmath.exp(1j * (self.angle0 + span * tau))
        return self.center + z, 1j * span * z

    def to_dict(self):
        return {"kind": "arc", "center": [self.center.real, self.center.imag], "radius": self.radius,
                "angles": [self.angle0, self.angle1]}


@dataclass(frozen=True)
class MappedCurve(Segment):
    """x = f(s) for s from s0 to s1 (used for contours given in the t-plane)."""

    f: Callable
    df: Callable
    s0: float
    s1: float

    def point(self, tau):
        return self.f(self.s0 + (self.s1 - self.s0) * np.asarray(tau, float))

    def velocity(self, tau):
        return (self.s1 - self.s0) * self.df(self.s0 + (self.s1 - self.s0) * np.asarray(tau, float))

    def reversed(self):
        return MappedCurve(self.f, self.df, self.s1, self.s0)

    def to_dict(self):
        tau = np.linspace(0, 1, 65)
        return {"kind": "curve", "nodes": [[z.real, z.imag] for z in self.point(tau)]}


@dataclass(frozen=True)
class PathPlan:
    segments: tuple
    windings: dict = field(default_factory=dict)

    @property
    def start(self) -> complex:
        return complex(self.segments[0].point(0.0))

    @property
    def end(self) -> complex:
        return complex(self.segments[-1].point(1.0))

    def __add__(self, other: "PathPlan") -> "PathPlan":
        if abs(self.end - other.start) > 1e-12 * max(1.0, abs(self.end)):
            raise GeometryError("paths do not join")
        return PathPlan(self.segments + other.segments)

    def reversed(self) -> "PathPlan":
        return PathPlan(tuple(s.reversed() for s in reversed(self.segments)),
                        {k: -v for k, v in self.windings.items()})

    def nodes(self, per_segment: int = 64) -> np.ndarray:
        tau = np.linspace(0, 1, per_segment + 1)
        pts = [self.segments[0].point(tau[:1])]
        for s in self.segments:
            pts.append(s.point(tau[1:]))
        return np.concatenate(pts)

    def length(self) -> float:
        return sum(s.length() for s in self.segments)

    def winding_number(self, z: complex, per_segment: int = 512) -> float:
        pts = self.nodes(per_segment) - z
        return float(np.sum(np.angle(pts[1:] / pts[:-1])) / TWO_PI)

    def min_distance(self, z: complex, per_segment: int = 256) -> float:
        return float(np.min(np.abs(self.nodes(per_segment) - z)))

    def to_dict(self) -> dict:
        return {"segments": [s.to_dict() for s in self.segments],
                "windings": {k: v for k, v in self.windings.items()}}


def t_path(geometry: StripGeometry, corners: Sequence[tuple[float, float]]) -> PathPlan:
    """Polygonal path in oblique (u, sigma) coordinates, mapped to x.

    Each side is cut where u crosses the axis bends at +-L; the pieces are then
    straight in t.
    """
    g = geometry
    eps = g.eps
    bends = [] if g.is_zero else [-g.half_length, g.half_length]
    segs = []
    for (u0, s0), (u1, s1) in zip(corners[:-1], corners[1:]):
        if u0 == u1 and s0 == s1:
            continue
        cuts = [0.0]
        if u0 != u1:
            cuts += sorted((b - u0) / (u1 - u0) for b in bends if 0 < (b - u0) / (u1 - u0) < 1)
        cuts.append(1.0)
        for a, b in zip(cuts[:-1], cuts[1:]):
            ta = complex(g.t_of(u0 + (u1 - u0) * a, s0 + (s1 - s0) * a))
            tb = complex(g.t_of(u0 + (u1 - u0) * b, s0 + (s1 - s0) * b))
            segs.append(TSegment(eps, ta, tb))
    return PathPlan(tuple(segs))


@dataclass(frozen=True)
class TSegment(Segment):
    """Image in x of the straight t-segment from ta to tb."""

    eps: UnfoldedParameter
    ta: complex
    tb: complex

    def __post_init__(self):
        object.__setattr__(self, "_w", self.eps.sqrt_eps)
        object.__setattr__(self, "_e", self.eps.eps)

    def point(self, tau):
        return x_of_t(self.eps, self.ta + (self.tb - self.ta) * np.asarray(tau, float))

    def velocity(self, tau):
        x = self.point(tau)
        return (x * x - self.eps.eps) * (self.tb - self.ta)

    def reversed(self):
        return TSegment(self.eps, self.tb, self.ta)

    def state(self, tau: float) -> tuple[complex, complex]:
        dt = self.tb - self.ta
        t = self.ta + dt * tau
        w = self._w
        if w == 0:
            x = -1.0 / t
        else:
            E = cmath.exp(2 * w * t)
            x = w * (1 + E) / (1 - E)
        return x, (x * x - self._e) * dt

    def to_dict(self):
        tau = np.linspace(0, 1, 65)
        return {"kind": "curve", "nodes": [[z.real, z.imag] for z in self.point(tau)]}


def _axis_u_at(geometry: StripGeometry, which: str, predicate, u_start: float) -> float:
    """Smallest |u| beyond u_start on the lens axis (sigma = 0) where predicate(x) turns true."""
    g = geometry
    sgn = 1.0 if which == "L" else -1.0
    xa = lambda u: complex(x_of_t(g.eps, g.t_of(u, 0.0)))
    lo = sgn * abs(u_start)
    step = sgn * max(1e-3, abs(u_start))
    hi = lo
    while not predicate(xa(hi)):
        lo = hi
        hi = hi + step
        step *= 1.5
        if abs(hi) > 1e15:
            raise GeometryError("lens axis search failed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if predicate(xa(mid)):
            hi = mid
        else:
            lo = mid
        if abs(hi - lo) < 1e-13 * max(1.0, abs(mid)):
            break
    return hi


def lens_base_point(geometry: StripGeometry, which: str, radius: float | None = None) -> tuple[complex, float]:
    """Point of the lens axis in Omega_which with |x| = radius (default r/2), and its u."""
    radius = 0.5 * geometry.r if radius is None else radius
    u = _axis_u_at(geometry, which, lambda x: abs(x) <= radius, 1e-9)
    return complex(x_of_t(geometry.eps, geometry.t_of(u, 0.0))), u


def default_base_points(geometry: StripGeometry, radius: float | None = None) -> dict:
    return {w: lens_base_point(geometry, w, radius)[0] for w in ("L", "R")}


def monodromy_loop(geometry: StripGeometry, which: str, base_u: float | None = None,
                   loop_radius: float | None = None) -> PathPlan:
    """Loop inside Omega_which: along the lens axis toward x_which, one turn around it, and back.

    Turns are clockwise around x_R and counterclockwise around x_L.
    """
    g = geometry
    eps = g.eps
    if eps.is_zero:
        raise GeometryError("no monodromy loops at eps = 0")
    sep = abs(eps.x_L - eps.x_R)
    if base_u is None:
        base_u = lens_base_point(g, which)[1]
    center = eps.point(which)
    reach = abs(complex(x_of_t(eps, g.t_of(base_u, 0.0))) - center)
    loop_radius = min(0.25 * sep, 0.5 * reach) if loop_radius is None else loop_radius
    if not 0 < loop_radius < sep / 2:
        raise GeometryError("loop radius must lie in (0, |x_L - x_R|/2)")
    if reach <= loop_radius:
        raise GeometryError("base point inside the exclusion radius")
    u_stop = _axis_u_at(g, which, lambda x: abs(x - center) <= loop_radius, base_u)
    appr = t_path(g, [(base_u, 0.0), (u_stop, 0.0)])
    a0 = float(np.angle(appr.end - center))
    sign = 1.0 if which == "L" else -1.0
    circle = PathPlan((Arc(center, abs(appr.end - center), a0, a0 + sign * TWO_PI),))
    path = appr + circle + appr.reversed()
    wL = path.winding_number(eps.x_L)
    wR = path.winding_number(eps.x_R)
    if abs(wL - round(wL)) > 1e-6 or abs(wR - round(wR)) > 1e-6 or abs(round(wL)) + abs(round(wR)) != 1:
        raise GeometryError("loop does not encircle exactly one singular point")
    return PathPlan(path.segments, {"L": int(round(wL)), "R": int(round(wR))})


def connector(geometry: StripGeometry, through: str, u_from: float, u_to: float) -> PathPlan:
    """Path inside Omega_through (D or U) from the lens-axis point u_from to u_to.

    For eps != 0 it detours through sigma = -+|p|/2, the middle of Gamma_through.
    For eps = 0 it follows the arc |t| = const through the upper (U) or lower (D) half t-plane.
    """
    g = geometry
    if g.is_zero:
        rad = max(abs(u_from), abs(u_to))
        a0 = 0.0 if u_from > 0 else math.pi
        a1 = 0.0 if u_to > 0 else math.pi
        if through not in ("D", "U"):
            raise ValueError(through)
        if a0 == a1:
            return t_path(g, [(u_from, 0.0), (u_to, 0.0)])
        # the arc midpoint must sit at +i (Gamma_U) or -i (Gamma_D)
        if through == "D":
            a1 = a0 + math.pi if a0 == math.pi else -math.pi
        arc_t = lambda tau: rad * np.exp(1j * (a0 + (a1 - a0) * np.asarray(tau, float)))
        lead = t_path(g, [(u_from, 0.0), (math.copysign(rad, u_from), 0.0)]).segments
        tail = t_path(g, [(math.copysign(rad, u_to), 0.0), (u_to, 0.0)]).segments
        f = lambda tau: -1.0 / arc_t(tau)
        df = lambda tau: (1j * (a1 - a0) * arc_t(tau)) / arc_t(tau) ** 2
        return PathPlan(tuple(lead) + (MappedCurve(f, df, 0.0, 1.0),) + tuple(tail))
    if through not in ("D", "U"):
        raise ValueError(through)
    mid = -0.5 * g.period_length if through == "D" else 0.5 * g.period_length
    # when the domains spiral the direct detour can leave the disk; slide it toward the singular points
    best = None
    for k in (1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0):
        path = t_path(g, [(u_from, 0.0), (k * u_from, 0.0), (k * u_from, mid), (k * u_to, mid),
                          (k * u_to, 0.0), (u_to, 0.0)])
        reach = float(np.abs(path.nodes(64)).max())
        if best is None or reach < best[0]:
            best = (reach, path)
        if reach < 0.95 * g.r:
            break
    return best[1]


def circle_connector(geometry: StripGeometry, through: str, u_from: float, u_to: float) -> PathPlan:
    """A path homotopic to connector(...) that runs along |x| = |base| where possible.

    Solutions separate much less on that circle than near the singular points, so
    transfer matrices along it keep their precision. The arc (with up to one extra
    turn either way) is accepted when the loop it closes with the t-plane connector
    winds around neither singular point; otherwise the t-plane connector is used.
    """
    ref = connector(geometry, through, u_from, u_to)
    a, b = ref.start, ref.end
    if abs(abs(a) - abs(b)) > 1e-9 * abs(a):
        return ref
    rad = abs(a)
    a0, a1 = float(np.angle(a)), float(np.angle(b))
    centers = (0j,) if geometry.is_zero else (geometry.eps.x_L, geometry.eps.x_R)
    base = a1 - a0
    candidates = sorted((base + TWO_PI * k for k in range(-2, 3)), key=abs)
    for sweep in candidates:
        if sweep == 0:
            continue
        arc = PathPlan((Arc(0j, rad, a0, a0 + sweep),))
        closed = arc + ref.reversed()
        if all(abs(closed.winding_number(cz)) < 0.5 for cz in centers):
            if geometry.is_zero and abs(rad) > 0:
                return arc
            if min(abs(rad - abs(cz)) for cz in centers) > 0:
                return arc
    return ref


def circle_loop(geometry: StripGeometry, u_base: float, radius: float | None = None) -> PathPlan:
    """Positive loop around both singular points, based on the lens axis point.

    With `radius` larger than |base| the loop goes out radially, around the circle
    of that radius and back in.
    """
    b = complex(x_of_t(geometry.eps, geometry.t_of(u_base, 0.0)))
    a0 = float(np.angle(b))
    if radius is None or radius <= abs(b):
        return PathPlan((Arc(0j, abs(b), a0, a0 + TWO_PI),))
    out = radius * np.exp(1j * a0)
    return PathPlan((Line(b, out), Arc(0j, radius, a0, a0 + TWO_PI), Line(out, b)))


def based_loop(geometry: StripGeometry, which: str, base_radius: float | None = None,
               loop_radius: float | None = None) -> PathPlan:
    """The loop around x_which as seen from the common base point on the R side.

    The L loop is reached through Omega_D, the same route the monodromy matrices use.
    """
    _, uR = lens_base_point(geometry, "R", base_radius)
    if which == "R":
        return monodromy_loop(geometry, "R", uR, loop_radius)
    _, uL = lens_base_point(geometry, "L", base_radius)
    path = (circle_connector(geometry, "D", uR, uL) + monodromy_loop(geometry, "L", uL, loop_radius)
            + circle_connector(geometry, "D", uL, uR))
    return PathPlan(path.segments, {"L": 1, "R": 0})


# ---------------------------------------------------------------- realization contours


@dataclass(frozen=True)
class LensContour:
    """One boundary curve of the overlap lens at x_l: sigma = sign * (a(u) + e_nu(u)).

    The curve runs from the singular point side (u_inner) to the circle |x| = r
    (u_outer). `sign` is -1 for the boundary of Omega_U(nu) and +1 for Omega_D(nu).
    """

    geometry: StripGeometry
    which: str
    side: str
    nu: int
    theta: float
    u_inner: float
    u_outer: float

    @property
    def sign(self) -> float:
        return -1.0 if self.side == "U" else 1.0

    def offset(self, u):
        g = self.geometry
        u = np.asarray(u, float)
        base_t = g.t_of(u, self.sign * g.lens_half_width(u))
        x = x_of_t(g.eps, base_t)
        if g.is_zero:
            extra = 2.0 ** (-self.nu) * self.theta * np.ones_like(u)
        else:
            xl = g.eps.point(self.which)
            xo = g.eps.point("R" if self.which == "L" else "L")
            extra = 2.0 ** (-self.nu) * self.theta * np.abs(x - xl) / np.abs(x - xo)
        return g.lens_half_width(u) + extra

    def t(self, u):
        return self.geometry.t_of(u, self.sign * self.offset(u))

    def x(self, u):
        return x_of_t(self.geometry.eps, self.t(u))

    def dx_du(self, u, h: float = 1e-6):
        # t(u) is piecewise smooth; x'(u) = (x^2 - eps) t'(u)
        u = np.asarray(u, float)
        hh = h * np.maximum(1.0, np.abs(u))
        dt = (self.t(u + hh) - self.t(u - hh)) / (2 * hh)
        x = self.x(u)
        return (x * x - self.geometry.eps.eps) * dt

    def as_path(self) -> PathPlan:
        return PathPlan((MappedCurve(self.x, self.dx_du, self.u_inner, self.u_outer),))


def _edge_parameter(curve_x: Callable, r: float, u_far: float, u_near: float) -> float:
    """u where |x(u)| crosses r, between a point inside (u_far) and one outside (u_near)."""
    lo, hi = u_far, u_near
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if abs(curve_x(mid)) < r:
            lo = mid
        else:
            hi = mid
        if abs(hi - lo) < 1e-13 * max(1.0, abs(mid)):
            break
    return lo


def lens_contour(geometry: StripGeometry, which: str, side: str, nu: int, theta: float,
                 inner_cutoff: float | None = None) -> LensContour:
    g = geometry
    sgn_u = -1.0 if which == "R" else 1.0
    if g.is_zero:
        inner_cutoff = 1e-6 * g.r if inner_cutoff is None else inner_cutoff
        xl = 0j
    else:
        inner_cutoff = 1e-6 * abs(g.eps.x_L - g.eps.x_R) if inner_cutoff is None else inner_cutoff
        xl = g.eps.point(which)
    proto = LensContour(g, which, side, nu, theta, 0.0, 0.0)
    # outer end: walk from large |u| toward the hole until |x| >= r
    u = sgn_u * 1.0
    while abs(proto.x(u)) >= g.r:
        u *= 2.0
        if abs(u) > 1e12:
            raise GeometryError("could not locate the lens inside the disk")
    u_in_disk = u
    u_out = sgn_u * 1e-9
    while abs(proto.x(u_out)) < g.r:
        u_out *= 0.5
    u_outer = _edge_parameter(proto.x, g.r, u_in_disk, u_out)
    # inner end: grow |u| until the curve is within the cutoff of x_l
    u = u_outer
    step = sgn_u * max(1.0, abs(u_outer))
    while abs(proto.x(u) - xl) > inner_cutoff:
        u += step
        step *= 1.5
        if abs(u) > 1e15:
            raise GeometryError("cutoff too small: contour does not reach the inner radius")
    lo, hi = u - step / 1.5, u
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if abs(proto.x(mid) - xl) > inner_cutoff:
            lo = mid
        else:
            hi = mid
        if abs(hi - lo) < 1e-12 * max(1.0, abs(mid)):
            break
    return LensContour(g, which, side, nu, theta, hi, u_outer)


def boundary_paths(eps: UnfoldedParameter, domains: dict, nu: int, theta_shrink: float | None = None,
                   inner_cutoff: float | None = None) -> dict:
    """Boundary curves gamma_{nu,s} of Omega_cap(nu), s in {D, U}, as pairs of lens contours.

    gamma_{nu,s} = gamma_{nu,s,L} (from -r to x_L) followed by gamma_{nu,s,R} (from x_R to r).
    """
    if nu < 1:
        raise GeometryError("nu must be at least 1")
    geo = next(iter(domains.values())).geometry
    theta = 0.05 * geo.r if theta_shrink is None else theta_shrink
    out = {}
    for s in ("D", "U"):
        cL = lens_contour(geo, "L", s, nu, theta, inner_cutoff)
        cR = lens_contour(geo, "R", s, nu, theta, inner_cutoff)
        out[(nu, s)] = {"L": cL, "R": cR,
                        "path": PathPlan((MappedCurve(cL.x, cL.dx_du, cL.u_outer, cL.u_inner),
                                          MappedCurve(cR.x, cR.dx_du, cR.u_inner, cR.u_outer)))}
    return out
