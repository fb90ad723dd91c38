"""Power flow: decoupled linearized model, full AC Newton-Raphson, loss regression."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DomainError, NumericalError
from .grid import AdmittanceTriple, NetworkCase, build_admittance

AC_TOL = 1e-8
AC_MAX_ITER = 50


@dataclass(frozen=True)
class InjectionSpec:
    """Specified injections (p.u., loads negative) with one voltage-controlled slack.

    Entries of ``p``/``q`` at the slack are ignored.  ``pv`` optionally maps extra
    bus indices to a held voltage magnitude; those buses drop their Q equation.
    """

    p: np.ndarray
    q: np.ndarray
    slack: int = 0
    v_slack: float = 1.0
    theta_slack: float = 0.0
    pv: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.p)
        if len(self.q) != n:
            raise DomainError("p and q must have the same length")
        if not 0 <= self.slack < n:
            raise DomainError(f"slack index {self.slack} out of range")
        if self.slack in self.pv:
            raise DomainError("the slack bus cannot also be a PV bus")

    @classmethod
    def from_case(cls, case: NetworkCase, v_slack: float | None = None, theta_slack: float | None = None):
        if any(b.kind == "pcc" for b in case.buses):
            slack = case.pcc
        else:
            slack = next(i for i, b in enumerate(case.buses) if b.kind == "generator")
        bus = case.buses[slack]
        if v_slack is None:
            v_slack = bus.v_limits[0] if bus.kind == "pcc" else 1.0
        if theta_slack is None:
            theta_slack = np.deg2rad(bus.theta_limits_deg[0]) if bus.kind == "pcc" else 0.0
        return cls(case.p_injection(), case.q_injection(), slack, float(v_slack), float(theta_slack))

    def scaled(self, factor: float) -> "InjectionSpec":
        return InjectionSpec(self.p * factor, self.q * factor, self.slack, self.v_slack, self.theta_slack, dict(self.pv))


@dataclass(frozen=True)
class PowerFlowSolution:
    V: np.ndarray
    theta: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    P_pcc: float
    Q_pcc: float
    P_loss: float
    converged: bool
    iterations: int
    mismatch: float = 0.0


def _others(n: int, slack: int) -> np.ndarray:
    return np.array([i for i in range(n) if i != slack], dtype=int)


def dlpf_injections(adm: AdmittanceTriple, V: np.ndarray, theta: np.ndarray):
    """Injections predicted by the linear model for a given (V, theta)."""
    P = adm.G @ V - adm.B_prime @ theta
    Q = -adm.B @ V - adm.G @ theta
    return P, Q


def solve_dlpf(adm: AdmittanceTriple, spec: InjectionSpec) -> PowerFlowSolution:
    """Direct solve of the decoupled linearized power flow.

    The slack rows are dropped and its fixed (V, theta) moved to the right-hand
    side; every other bus is PQ.
    """
    n = adm.G.shape[0]
    s = spec.slack
    o = _others(n, s)
    G, B, Bp = adm.G, adm.B, adm.B_prime
    A = np.block([[G[np.ix_(o, o)], -Bp[np.ix_(o, o)]], [-B[np.ix_(o, o)], -G[np.ix_(o, o)]]])
    rhs = np.concatenate(
        [
            spec.p[o] - (G[o, s] * spec.v_slack - Bp[o, s] * spec.theta_slack),
            spec.q[o] - (-B[o, s] * spec.v_slack - G[o, s] * spec.theta_slack),
        ]
    )
    if n > 1:
        if np.linalg.cond(A) > 1e12:
            raise NumericalError("linearized power flow matrix is singular; the case is degenerate")
        sol = np.linalg.solve(A, rhs)
    else:
        sol = np.zeros(0)
    V = np.empty(n)
    th = np.empty(n)
    V[s], th[s] = spec.v_slack, spec.theta_slack
    V[o], th[o] = sol[: n - 1], sol[n - 1 :]
    P, Q = dlpf_injections(adm, V, th)
    return PowerFlowSolution(V, th, P, Q, float(P[s]), float(Q[s]), float(P.sum()), True, 1)


def ac_injections(Y: np.ndarray, V: np.ndarray, theta: np.ndarray):
    Vc = V * np.exp(1j * theta)
    S = Vc * np.conj(Y @ Vc)
    return S.real, S.imag


def solve_ac_newton(
    case: NetworkCase,
    spec: InjectionSpec,
    adm: AdmittanceTriple | None = None,
    tol: float = AC_TOL,
    max_iter: int = AC_MAX_ITER,
    v_init: np.ndarray | None = None,
    theta_init: np.ndarray | None = None,
) -> PowerFlowSolution:
    """Full AC power flow by Newton-Raphson in polar coordinates.

    Starts flat (V = 1, theta = 0 away from the slack) unless an initial point
    is given.  Raises :class:`ConvergenceError` if the largest mismatch is still
    above ``tol`` after ``max_iter`` iterations.
    """
    if adm is None:
        adm = build_admittance(case)
    Y = adm.Y
    n = Y.shape[0]
    s = spec.slack
    pvpq = _others(n, s)
    pq = np.array([i for i in pvpq if i not in spec.pv], dtype=int)

    V = np.ones(n) if v_init is None else np.array(v_init, dtype=float)
    th = np.zeros(n) if theta_init is None else np.array(theta_init, dtype=float)
    V[s], th[s] = spec.v_slack, spec.theta_slack
    for i, vm in spec.pv.items():
        V[i] = vm

    def mismatch(V, th):
        P, Q = ac_injections(Y, V, th)
        return np.concatenate([P[pvpq] - spec.p[pvpq], Q[pq] - spec.q[pq]])

    F = mismatch(V, th)
    norm = float(np.max(np.abs(F))) if F.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_iter or not np.isfinite(norm):
            raise ConvergenceError(
                f"AC power flow did not converge after {it} iterations (mismatch {norm:.3e})", norm, it
            )
        Vc = V * np.exp(1j * th)
        Ibus = Y @ Vc
        dS_dth = 1j * np.diag(Vc) @ np.conj(np.diag(Ibus) - Y @ np.diag(Vc))
        dS_dV = np.diag(Vc) @ np.conj(Y @ np.diag(Vc / V)) + np.diag(np.conj(Ibus) * Vc / V)
        J = np.block(
            [
                [dS_dth.real[np.ix_(pvpq, pvpq)], dS_dV.real[np.ix_(pvpq, pq)]],
                [dS_dth.imag[np.ix_(pq, pvpq)], dS_dV.imag[np.ix_(pq, pq)]],
            ]
        )
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular Jacobian in AC power flow", norm, it) from None
        th[pvpq] += dx[: len(pvpq)]
        V[pq] += dx[len(pvpq) :]
        it += 1
        F = mismatch(V, th)
        norm = float(np.max(np.abs(F)))
        if np.any(V <= 0) or not np.isfinite(norm):
            raise ConvergenceError(f"AC power flow diverged after {it} iterations", norm, it)

    P, Q = ac_injections(Y, V, th)
    return PowerFlowSolution(V, th, P, Q, float(P[s]), float(Q[s]), float(P.sum()), True, it, norm)


@dataclass(frozen=True)
class LossModel:
    """Affine loss model ``P_loss = d_l * P_pcc + c``."""

    d_l: float
    c: float
    max_residual: float = 0.0

    def __call__(self, p_pcc):
        return self.d_l * p_pcc + self.c


DEFAULT_SCALINGS = tuple(np.linspace(0.8, 1.2, 9))


def fit_affine(x, y) -> LossModel:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(np.unique(x)) < 2:
        raise DomainError("need at least two distinct samples to fit a line")
    A = np.column_stack([x, np.ones_like(x)])
    (d, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.max(np.abs(A @ np.array([d, c]) - y)))
    return LossModel(float(d), float(c), res)


def fit_loss_model(case: NetworkCase, load_scalings=DEFAULT_SCALINGS, spec: InjectionSpec | None = None) -> LossModel:
    """Least-squares fit of total losses against PCC active power over load scalings."""
    scalings = list(load_scalings)
    if len(set(scalings)) < 2:
        raise DomainError("fit_loss_model needs at least two distinct load scalings")
    if spec is None:
        spec = InjectionSpec.from_case(case)
    adm = build_admittance(case)
    pcc, loss = [], []
    for k in scalings:
        try:
            sol = solve_ac_newton(case, spec.scaled(k), adm)
        except ConvergenceError as exc:
            raise ConvergenceError(f"loss-model sample at load scaling {k:g} failed: {exc}", exc.mismatch) from exc
        pcc.append(sol.P_pcc)
        loss.append(sol.P_loss)
    return fit_affine(pcc, loss)
