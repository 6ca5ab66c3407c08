"""Projective (Riccati) transport and the monodromy of first integrals.

A direction y in C^n is written in chart j as g_i = -y_i / y_j (i != j). The
Riccati flow is the linear flow read in such a chart; charts are switched
whenever a coordinate grows past `switch_at`, so the flow can pass through
points at infinity of any single chart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError
from .geometry import PathPlan

__all__ = [
    "ProjectivePoint", "FirstIntegralVector", "projectivize", "projective_distance", "riccati_flow",
    "first_integrals", "first_integral_monodromy", "first_integral_map",
]


@dataclass(frozen=True)
class ProjectivePoint:
    chart: int
    coords: np.ndarray  # length n - 1, the chart coordinate with index `chart` omitted

    @property
    def n(self) -> int:
        return len(self.coords) + 1

    def vector(self) -> np.ndarray:
        """Homogeneous representative with component `chart` equal to 1."""
        v = np.empty(self.n, complex)
        v[self.chart] = 1.0
        v[np.arange(self.n) != self.chart] = -np.asarray(self.coords)
        return v

    def in_chart(self, j: int, tiny: float = 1e-300) -> "ProjectivePoint | None":
        """The same point in chart j, or None when it lies at infinity there."""
        return projectivize(self.vector(), j, tiny)

    def __repr__(self) -> str:
        return f"ProjectivePoint(chart={self.chart}, coords={np.round(self.coords, 12).tolist()})"


def projectivize(v: np.ndarray, j: int, tiny: float = 1e-300) -> ProjectivePoint | None:
    v = np.asarray(v, complex)
    if abs(v[j]) <= tiny * max(np.max(np.abs(v)), tiny):
        return None
    mask = np.arange(len(v)) != j
    return ProjectivePoint(j, -v[mask] / v[j])


def projective_distance(a, b) -> float:
    """Sine of the angle between two lines (points or vectors)."""
    u = a.vector() if isinstance(a, ProjectivePoint) else np.asarray(a, complex)
    w = b.vector() if isinstance(b, ProjectivePoint) else np.asarray(b, complex)
    u = u / np.linalg.norm(u)
    w = w / np.linalg.norm(w)
    return float(np.linalg.norm(w - np.vdot(u, w) * u))


def _riccati_rhs(sys, eps: complex, seg, j: int, n: int):
    poly = sys.at_eps(eps)
    mask = np.arange(n) != j

    def rhs(tau, g):
        x, vel = seg.state(float(tau))
        v = np.empty(n, complex)
        v[j] = 1.0
        v[mask] = -g
        Av = poly(x) @ v
        dv = Av[mask] - v[mask] * Av[j]
        return -dv * (vel / (x * x - eps))

    return rhs


@dataclass
class RiccatiResult:
    point: ProjectivePoint
    switches: list = field(default_factory=list)  # (segment index, tau, old chart, new chart)


def riccati_flow(sys, eps, chart: int, start: ProjectivePoint, path: PathPlan, rtol: float = 1e-11,
                 switch_at: float = 10.0, history: bool = False):
    """Carry a projective point along the path by the Riccati equation in moving charts.

    Returns the end point in `chart` when it is finite there, otherwise in the last
    chart used. With `history`, returns a RiccatiResult including the chart switches.
    """
    n = sys.n
    e = eps.eps
    cur = start if start.chart == chart else start.in_chart(chart)
    if cur is None:
        raise ValueError("start point is at infinity in the requested chart")
    switches = []
    atol = rtol * 1e-3
    for si, seg in enumerate(path.segments):
        tau = 0.0
        while tau < 1.0:
            v = cur.vector()
            q = int(np.argmax(np.abs(v)))
            if q != cur.chart and abs(v[q]) >= switch_at * (1 - 1e-9):
                switches.append((si, tau, cur.chart, q))
                cur = projectivize(v, q)
            rhs = _riccati_rhs(sys, e, seg, cur.chart, n)

            def leave(t, g):
                return switch_at - np.max(np.abs(g), initial=0.0)

            leave.terminal = True
            leave.direction = -1
            sol = solve_ivp(rhs, (tau, 1.0), np.asarray(cur.coords, complex), method="DOP853",
                            rtol=rtol, atol=atol, events=leave)
            if not sol.success:
                raise IntegrationError(f"Riccati integration failed: {sol.message}")
            cur = ProjectivePoint(cur.chart, sol.y[:, -1])
            tau = float(sol.t_events[0][0]) if sol.status == 1 else 1.0
    back = cur.in_chart(chart, tiny=1e-14)
    out = back if back is not None else cur
    return RiccatiResult(out, switches) if history else out


# ---------------------------------------------------------------- first integrals


@dataclass(frozen=True)
class FirstIntegralVector:
    """H^j with H^j_q = k_q / k_j for a homogeneous coefficient vector k."""

    chart: int
    k: np.ndarray

    @property
    def n(self) -> int:
        return len(self.k)

    @property
    def at_infinity(self) -> bool:
        return abs(self.k[self.chart]) <= 1e-14 * np.max(np.abs(self.k))

    @property
    def values(self) -> np.ndarray:
        """Entries as complex numbers; entries at the point at infinity are inf."""
        if self.at_infinity:
            out = np.full(self.n, complex(np.inf, 0.0))
            out[self.chart] = 1.0
            out[np.abs(self.k) <= 1e-14 * np.max(np.abs(self.k))] = np.nan
            out[self.chart] = 1.0
            return out
        return self.k / self.k[self.chart]

    def distance(self, other: "FirstIntegralVector", relative: bool = False) -> float:
        """Max difference of the chart values; `relative` divides by the largest value (at least 1)."""
        if not (self.at_infinity or other.at_infinity):
            d = float(np.max(np.abs(self.values - other.values)))
            if relative:
                d /= max(1.0, float(np.max(np.abs(self.values))), float(np.max(np.abs(other.values))))
            return d
        return projective_distance(self.k, other.k)


def first_integrals(W: np.ndarray, chart: int, point: ProjectivePoint | np.ndarray) -> FirstIntegralVector:
    """Decompose the direction y on the basis columns of W: y ~ sum_q k_q w_q.

    `W` holds the basis solutions evaluated at the point's x. The linear solve is
    the conditioned form of the determinant-ratio formula.
    """
    y = point.vector() if isinstance(point, ProjectivePoint) else np.asarray(point, complex)
    k = np.linalg.solve(np.asarray(W, complex), y)
    return FirstIntegralVector(chart, k)


def first_integral_map(C_inv: np.ndarray, deltas: np.ndarray, H: FirstIntegralVector) -> FirstIntegralVector:
    """k -> diag(deltas) C^{-1} k, the projective map behind the monodromy formula."""
    return FirstIntegralVector(H.chart, np.asarray(deltas) * (np.asarray(C_inv) @ H.k))


def first_integral_monodromy(sc, chart: int, H: FirstIntegralVector, which: str) -> FirstIntegralVector:
    """Continuation of H^j once around x_which (loop orientation as for the monodromy).

    M(H^j) = diag(Delta_{j1}, ..., Delta_{jn}) C^{-1} H^j / ([C^{-1}]_{j.} H^j).
    """
    C = sc.C_L if which == "L" else sc.C_R
    logs = sc.fi.log_D(which)
    deltas = np.exp(logs[chart] - logs)
    return first_integral_map(np.linalg.inv(C), deltas, FirstIntegralVector(chart, H.k))
