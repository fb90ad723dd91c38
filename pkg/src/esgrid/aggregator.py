"""Electric-spring (back-to-back) aggregator algebra.

An aggregator is a series ES inverter cascaded with an exponential noncritical
load, plus a shunt inverter that returns the series active power to the bus.
Everything here works in a local d-q frame with the bus voltage on the d axis.

Sign conventions: powers are *consumed* by the aggregator (positive = load).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, InfeasibleError, NumericalError

# |Delta| below this is treated as a boundary point rather than infeasible
DELTA_CLAMP = 1e-12
_LIMIT_TOL = 1e-12


@dataclass(frozen=True)
class AggregatorParams:
    """Constants of one ES aggregator (per-unit on the network base)."""

    p0: float
    q0: float
    alpha_p: float
    alpha_q: float
    v0: float = 1.0
    v_nl_limits: tuple[float, float] = (0.6, 1.4)
    v_es_d_limits: tuple[float, float] = (-0.7, 0.7)
    v_es_q_limits: tuple[float, float] = (-0.7, 0.7)
    h: float = 100.0
    g: float = 40.0

    def __post_init__(self):
        problems = []
        if not self.p0 > 0:
            problems.append(f"p0 must be > 0 (got {self.p0})")
        if self.alpha_p == 0:
            problems.append("alpha_p must be nonzero")
        if not self.v0 > 0:
            problems.append(f"v0 must be > 0 (got {self.v0})")
        lo, hi = self.v_nl_limits
        if not lo > 0:
            problems.append(f"lower noncritical-load voltage limit must be > 0 (got {lo})")
        for name in ("v_nl_limits", "v_es_d_limits", "v_es_q_limits"):
            lo, hi = getattr(self, name)
            if lo > hi:
                problems.append(f"{name} out of order: [{lo}, {hi}]")
        if problems:
            from .errors import CaseError

            raise CaseError("invalid aggregator parameters", problems)

    @property
    def p_limits(self) -> tuple[float, float]:
        lo, hi = self.v_nl_limits
        return (self.p0 * (lo / self.v0) ** self.alpha_p, self.p0 * (hi / self.v0) ** self.alpha_p)


def noncritical_power(v_nl, params: AggregatorParams):
    """Exponential-load consumption at noncritical-load voltage ``v_nl``.

    Returns ``(P_nl, Q_nl)``; accepts scalars or arrays.
    """
    v = np.asarray(v_nl, dtype=float)
    lo, hi = params.v_nl_limits
    if np.any(v < lo - _LIMIT_TOL) or np.any(v > hi + _LIMIT_TOL):
        raise DomainError(f"noncritical-load voltage {v_nl} outside [{lo}, {hi}]")
    ratio = v / params.v0
    p = params.p0 * ratio**params.alpha_p
    q = params.q0 * ratio**params.alpha_q
    if np.ndim(v) == 0:
        return float(p), float(q)
    return p, q


def reactive_from_active(p_nl, params: AggregatorParams):
    """Q_nl expressed through P_nl (the voltage eliminated between the two exponentials)."""
    return params.q0 * (np.asarray(p_nl, dtype=float) / params.p0) ** (params.alpha_q / params.alpha_p)


@dataclass(frozen=True)
class Setpoints:
    v_es_d: float
    v_es_q: float
    clamped: bool
    raw_d: float
    raw_q: float


def setpoint_discriminant(p_star: float, q_star: float, params: AggregatorParams) -> float:
    ratio = p_star / params.p0
    ap, aq = params.alpha_p, params.alpha_q
    return p_star**2 - ratio ** (2.0 / ap) * q_star**2 + params.q0**2 * ratio ** (2.0 * aq / ap)


def es_voltage_setpoints(
    p_star: float, q_star: float, params: AggregatorParams, v_s_star: float | None = None
) -> Setpoints:
    """Closed-form ES voltage components that make the aggregator draw ``(P*, Q*)``.

    Assumes the bus voltage sits at the load's nominal voltage ``v0``.  Of the two
    roots of the quadratic in the q component, the one with non-negative series
    current d component is returned; it is the root that gives zero ES voltage
    at the nominal command.  Results are clamped to the saturation limits and
    ``clamped`` reports whether that happened.
    """
    if v_s_star is None:
        v_s_star = params.v0
    if abs(v_s_star - params.v0) > 1e-12:
        raise DomainError("setpoint formula requires the bus voltage setpoint to equal v0")
    if not p_star > 0:
        raise DomainError(f"commanded active power must be > 0 (got {p_star})")
    if p_star == params.p0 and q_star == params.q0:
        # nominal command: exact zero rather than round-off of the closed form
        return Setpoints(0.0, 0.0, False, 0.0, 0.0)
    ratio = p_star / params.p0
    ap, aq, q0, v0 = params.alpha_p, params.alpha_q, params.q0, params.v0
    delta = setpoint_discriminant(p_star, q_star, params)
    if delta < 0:
        if delta > -DELTA_CLAMP:
            delta = 0.0
        else:
            raise InfeasibleError(
                f"setpoint (P*={p_star:.6g}, Q*={q_star:.6g}) infeasible: discriminant {delta:.3e} < 0"
            )
    root = math.sqrt(delta)
    den = p_star**2 + q0**2 * ratio ** (2.0 * aq / ap)
    v_d = v_s_star - v0 * (q0 * ratio ** ((aq + 2.0) / ap) * q_star + ratio ** (1.0 / ap) * p_star * root) / den
    v_q = v0 * (ratio ** (2.0 / ap) * p_star * q_star - q0 * ratio ** ((aq + 1.0) / ap) * root) / den
    cd = min(max(v_d, params.v_es_d_limits[0]), params.v_es_d_limits[1])
    cq = min(max(v_q, params.v_es_q_limits[0]), params.v_es_q_limits[1])
    return Setpoints(cd, cq, (cd != v_d) or (cq != v_q), v_d, v_q)


def setpoint_quadratic_residual(v_es_q: float, p_star: float, q_star: float, params: AggregatorParams) -> float:
    """Residual of the quadratic in the ES q component (bus voltage at v0)."""
    ratio = p_star / params.p0
    ap, aq, q0, v0 = params.alpha_p, params.alpha_q, params.q0, params.v0
    a = p_star**2 + q0**2 * ratio ** (2 * aq / ap)
    b = -2.0 * v0 * ratio ** (2 / ap) * q_star * p_star
    c = v0**2 * ratio ** (4 / ap) * q_star**2 - v0**2 * ratio ** (2 / ap) * q0**2 * ratio ** (2 * aq / ap)
    return a * v_es_q**2 + b * v_es_q + c


@dataclass(frozen=True)
class ForwardState:
    v_nl: np.ndarray
    p_nl: np.ndarray
    q_nl: np.ndarray
    i_d: np.ndarray
    i_q: np.ndarray
    p_sl: np.ndarray
    q_sl: np.ndarray


def forward_state(v_es_d, v_es_q, v_s, params: AggregatorParams, check_limits: bool = True) -> ForwardState:
    """Full phasor state of the aggregator for given ES voltage components."""
    v_es_d = np.asarray(v_es_d, dtype=float)
    v_es_q = np.asarray(v_es_q, dtype=float)
    v_s = np.asarray(v_s, dtype=float)
    vd = v_s - v_es_d
    vq = -v_es_q
    m2 = vd * vd + vq * vq
    if np.any(m2 == 0.0):
        raise NumericalError("noncritical-load voltage is zero; load current undefined")
    m = np.sqrt(m2)
    if check_limits:
        p_nl, q_nl = noncritical_power(m, params)
    else:
        ratio = m / params.v0
        p_nl, q_nl = params.p0 * ratio**params.alpha_p, params.q0 * ratio**params.alpha_q
    i_d = (p_nl * vd + q_nl * vq) / m2
    i_q = (p_nl * vq - q_nl * vd) / m2
    return ForwardState(m, p_nl, q_nl, i_d, i_q, p_nl, -v_s * i_q)


def forward_power(v_es_d, v_es_q, v_s, params: AggregatorParams):
    """Aggregator consumption ``(P_sl, Q_sl)`` produced by the given ES voltage.

    The shunt inverter carries no reactive power and cancels the series active
    power, so ``P_sl`` equals the noncritical load's active power.
    """
    st = forward_state(v_es_d, v_es_q, v_s, params)
    if np.ndim(st.p_sl) == 0:
        return float(st.p_sl), float(st.q_sl)
    return st.p_sl, st.q_sl


# ---------------------------------------------------------------------------
# operating region


@dataclass(frozen=True)
class OperatingRegion:
    p_limits: tuple[float, float]
    q_limits: tuple[float, float]
    p: np.ndarray
    q_lower: np.ndarray
    q_upper: np.ndarray

    def contains(self, p: float, q: float) -> bool:
        return self.p_limits[0] <= p <= self.p_limits[1] and self.q_limits[0] <= q <= self.q_limits[1]

    def to_csv(self) -> str:
        lines = ["p,q_lower,q_upper"]
        for p, lo, hi in zip(self.p, self.q_lower, self.q_upper):
            lines.append(f"{p:.9g},{lo:.9g},{hi:.9g}")
        return "\n".join(lines) + "\n"


def _angle_candidates(m: float, v_s: float, params: AggregatorParams, phi_l: float) -> np.ndarray:
    # Boundaries of the feasible load-voltage angle set: branch ends and box edges.
    cands = [phi_l - math.pi / 2, phi_l + math.pi / 2]
    for lim in params.v_es_d_limits:
        c = (v_s - lim) / m
        if -1.0 <= c <= 1.0:
            a = math.acos(c)
            cands += [a, -a]
    for lim in params.v_es_q_limits:
        s = -lim / m
        if -1.0 <= s <= 1.0:
            a = math.asin(s)
            cands += [a, math.pi - a]
    out = []
    for psi in cands:
        # wrap into the branch window around phi_l
        k = round((psi - phi_l) / (2 * math.pi))
        out.append(psi - 2 * math.pi * k)
    return np.array(out)


def q_bounds_at(p: float, v_s: float, params: AggregatorParams, tol: float = 1e-12):
    """Min and max aggregator reactive power achievable at active power ``p``.

    Only the setpoint formula's branch (non-negative series current d axis) is
    considered, with ES voltages inside their saturation box.  Returns
    ``(nan, nan)`` if no ES voltage realises ``p``.
    """
    m = params.v0 * (p / params.p0) ** (1.0 / params.alpha_p)
    q_nl = params.q0 * (m / params.v0) ** params.alpha_q
    phi_l = math.atan2(q_nl, p)
    psi = _angle_candidates(m, v_s, params, phi_l)
    v_es_d = v_s - m * np.cos(psi)
    v_es_q = -m * np.sin(psi)
    (dlo, dhi), (qlo, qhi) = params.v_es_d_limits, params.v_es_q_limits
    ok = (
        (v_es_d >= dlo - tol) & (v_es_d <= dhi + tol) & (v_es_q >= qlo - tol) & (v_es_q <= qhi + tol)
        & (np.abs(psi - phi_l) <= math.pi / 2 + tol)
    )
    if not ok.any():
        return math.nan, math.nan
    st = forward_state(
        np.clip(v_es_d[ok], dlo, dhi), np.clip(v_es_q[ok], qlo, qhi), v_s, params, check_limits=False
    )
    return float(st.q_sl.min()), float(st.q_sl.max())


def operating_region(params: AggregatorParams, v_s: float | None = None, n_samples: int = 201) -> OperatingRegion:
    """Sample the P-Q capability curves and inscribe the rectangular limits.

    The rectangle spans the full active-power range and the reactive band
    ``[max g_lower(P), min g_upper(P)]`` over that range.
    """
    if v_s is None:
        v_s = params.v0
    p_lo, p_hi = params.p_limits
    ps = np.linspace(p_lo, p_hi, n_samples)
    bounds = np.array([q_bounds_at(p, v_s, params) for p in ps])
    lower, upper = bounds[:, 0], bounds[:, 1]
    if np.isnan(lower).any():
        bad = ps[np.isnan(lower)]
        raise InfeasibleError(
            f"ES limits cannot realise active power in [{bad.min():.6g}, {bad.max():.6g}]"
        )
    # refine the extremes between samples
    k = int(np.argmax(lower))
    q_min = max(lower[k], -_refine(lambda p: -q_bounds_at(p, v_s, params)[0], ps, k))
    k = int(np.argmin(upper))
    q_max = min(upper[k], _refine(lambda p: q_bounds_at(p, v_s, params)[1], ps, k))
    if q_min > q_max:
        raise InfeasibleError(f"empty operating rectangle: Q lower {q_min:.6g} > Q upper {q_max:.6g}")
    return OperatingRegion((p_lo, p_hi), (q_min, q_max), ps, lower, upper)


def _refine(fun, ps, k):
    lo = ps[max(k - 1, 0)]
    hi = ps[min(k + 1, len(ps) - 1)]
    if hi <= lo:
        return fun(ps[k])
    res = minimize_scalar(fun, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return min(float(res.fun), fun(ps[k]))


# ---------------------------------------------------------------------------
# PI voltage tracking


@dataclass(frozen=True)
class PIGains:
    """PI loop on a first-order inverter voltage response.

    The integral time equals the inverter time constant, so the closed loop is
    first order with time constant ``t_inv / kp``.
    """

    kp: float = 1.0
    ki: float = 50.0
    t_inv: float = 0.02
    max_substep: float = 5e-4


@dataclass(frozen=True)
class AggregatorState:
    v_es_d: float = 0.0
    v_es_q: float = 0.0
    v_es_d_star: float = 0.0
    v_es_q_star: float = 0.0
    p_star: float = math.nan
    q_star: float = math.nan
    p_sl: float = math.nan
    q_sl: float = math.nan
    integ_d: float = 0.0
    integ_q: float = 0.0

    @classmethod
    def at_rest(cls, params: AggregatorParams, v_s: float, v_es_d: float = 0.0, v_es_q: float = 0.0):
        p, q = forward_power(v_es_d, v_es_q, v_s, params)
        return cls(v_es_d, v_es_q, v_es_d, v_es_q, params.p0, params.q0, p, q, v_es_d, v_es_q)


def pi_track_arrays(v, integ, target, lo, hi, dt, gains: PIGains = PIGains()):
    """Vectorised PI tracking with conditional-integration anti-windup.

    ``v``, ``integ``, ``target``, ``lo``, ``hi`` are same-shaped arrays; returns
    the new ``(v, integ)``.
    """
    v = np.array(v, dtype=float)
    integ = np.array(integ, dtype=float)
    n = max(1, int(math.ceil(dt / gains.max_substep - 1e-9)))
    h = dt / n
    for _ in range(n):
        err = target - v
        u = gains.kp * err + integ
        u_sat = np.clip(u, lo, hi)
        # freeze the integrator while saturated and the error pushes further out
        wind = ((u > hi) & (err > 0)) | ((u < lo) & (err < 0))
        integ = np.where(wind, integ, integ + gains.ki * err * h)
        integ = np.clip(integ, lo, hi)
        v = v + h * (u_sat - v) / gains.t_inv
        v = np.clip(v, lo, hi)
    return v, integ


def pi_track_step(
    state: AggregatorState, params: AggregatorParams, v_s: float, dt: float, gains: PIGains = PIGains()
) -> AggregatorState:
    """Advance both ES voltage loops by ``dt`` and refresh the realised powers."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    lo = np.array([params.v_es_d_limits[0], params.v_es_q_limits[0]])
    hi = np.array([params.v_es_d_limits[1], params.v_es_q_limits[1]])
    v, integ = pi_track_arrays(
        [state.v_es_d, state.v_es_q],
        [state.integ_d, state.integ_q],
        np.array([state.v_es_d_star, state.v_es_q_star]),
        lo,
        hi,
        dt,
        gains,
    )
    p, q = forward_power(v[0], v[1], v_s, params)
    return replace(
        state, v_es_d=float(v[0]), v_es_q=float(v[1]), integ_d=float(integ[0]), integ_q=float(integ[1]),
        p_sl=p, q_sl=q,
    )
