"""Switched distributed load-side frequency controller.

Frequency-regulation mode (FRM): every bus runs average consensus on ``r`` and
loads emit ``u_bar = -K_I r - K_P domega``.  Load-recovery mode (LRM): ``r``
decays exponentially and ``u_bar = -K_I r``.  The control centre enters FRM
when frequency leaves the band and returns to LRM after the frequency has been
back inside the band for ``tau`` continuous seconds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import DomainError
from .grid import NetworkCase

F_NOMINAL = 60.0
DEFAULT_COMM_WEIGHT = 10.0


class Mode(str, Enum):
    FRM = "FRM"
    LRM = "LRM"


def comm_graph_from_case(case: NetworkCase, weight: float = DEFAULT_COMM_WEIGHT) -> np.ndarray:
    """Communication weights mirroring the transmission lines."""
    A = np.zeros((case.n, case.n))
    for ln in case.lines:
        i, j = case.index(ln.from_bus), case.index(ln.to_bus)
        A[i, j] = A[j, i] = weight
    return A


def _connected(A: np.ndarray) -> bool:
    n = A.shape[0]
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.nonzero(A[i])[0]:
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == n


@dataclass(frozen=True)
class ControllerParams:
    """Gains, switching band and communication graph.

    ``load`` lists the bus indices that host controllable loads (the others
    run consensus only); ``u_limits`` gives the per-load saturation pair.
    """

    k_i: float
    k_p: float
    alpha: float
    comm_graph: np.ndarray
    load: np.ndarray
    u_limits: np.ndarray
    tau: float = 3.0
    freq_band: tuple[float, float] = (-0.05, 0.05)
    f_s: float = F_NOMINAL

    def __post_init__(self):
        A = np.asarray(self.comm_graph, dtype=float)
        problems = []
        if not (self.k_i > 0 and self.k_p > 0):
            problems.append("K_I and K_P must be positive")
        if self.alpha < 0:
            problems.append("alpha must be non-negative")
        if self.tau < 0:
            problems.append("tau must be non-negative")
        if self.freq_band[0] > self.freq_band[1]:
            problems.append("frequency band out of order")
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            problems.append("communication graph must be square")
        else:
            if not np.allclose(A, A.T, atol=0):
                problems.append("communication graph must be symmetric")
            if np.any(np.diag(A) != 0):
                problems.append("communication graph must have a zero diagonal")
            if np.any(A < 0):
                problems.append("communication weights must be non-negative")
            if not _connected(A):
                problems.append("communication graph must be connected")
        lim = np.asarray(self.u_limits, dtype=float)
        if lim.shape != (len(self.load), 2) or np.any(lim[:, 0] > lim[:, 1]):
            problems.append("u_limits must be an ordered (lo, hi) pair per load")
        if problems:
            raise DomainError("invalid controller parameters: " + "; ".join(problems))
        if self.alpha == 0:
            warnings.warn("alpha = 0: loads will never recover to nominal in LRM", stacklevel=2)

    @property
    def laplacian(self) -> np.ndarray:
        A = np.asarray(self.comm_graph, dtype=float)
        return np.diag(A.sum(axis=1)) - A

    def in_band(self, f: float) -> bool:
        dev = f - self.f_s
        return self.freq_band[0] <= dev <= self.freq_band[1]


@dataclass(frozen=True)
class ControllerState:
    r: np.ndarray
    u_bar: np.ndarray
    mode: Mode = Mode.LRM
    phi: int = 1
    t_m: float | None = None
    t_m_prime: float | None = None

    @classmethod
    def initial(cls, params: ControllerParams) -> "ControllerState":
        return cls(r=np.zeros(params.laplacian.shape[0]), u_bar=np.zeros(len(params.load)))


@dataclass(frozen=True)
class SwitchEvent:
    time: float
    kind: str  # "enter_frm" or "enter_lrm"
    t_m_prime: float | None = None


def switch_logic(
    freq_history,
    params: ControllerParams,
    now: float,
    ctrl: ControllerState,
) -> tuple[Mode, int, list[SwitchEvent]]:
    """Decide the mode at ``now`` from recent ``(t, f)`` samples.

    ``freq_history`` is a sequence of ``(t, f)`` pairs ending at ``now``.  LRM
    switches to FRM as soon as the latest sample is outside the band; FRM
    switches to LRM once every sample of the last ``tau`` seconds is inside.
    """
    hist = np.asarray(freq_history, dtype=float).reshape(-1, 2)
    if hist.size == 0:
        return ctrl.mode, ctrl.phi, []
    t, f = hist[:, 0], hist[:, 1]
    dev = f - params.f_s
    inside = (dev >= params.freq_band[0]) & (dev <= params.freq_band[1])
    eps = 1e-9
    if ctrl.mode is Mode.LRM:
        if not inside[-1]:
            return Mode.FRM, 0, [SwitchEvent(now, "enter_frm")]
        return Mode.LRM, 1, []
    # FRM: find the start of the current in-band run
    if not inside[-1]:
        return Mode.FRM, 0, []
    out_idx = np.nonzero(~inside)[0]
    if out_idx.size:
        start = t[out_idx[-1] + 1]
    else:
        start = t[0]
    if ctrl.t_m is not None:
        start = max(start, ctrl.t_m)
    if now - start >= params.tau - eps and t[0] <= now - params.tau + eps:
        return Mode.LRM, 1, [SwitchEvent(now, "enter_lrm", float(start))]
    return Mode.FRM, 0, []


def _rk4_linear(r: np.ndarray, A: np.ndarray, dt: float) -> np.ndarray:
    k1 = A @ r
    k2 = A @ (r + 0.5 * dt * k1)
    k3 = A @ (r + 0.5 * dt * k2)
    k4 = A @ (r + dt * k3)
    return r + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def saturate(u: np.ndarray, params: ControllerParams) -> np.ndarray:
    lim = np.asarray(params.u_limits, dtype=float)
    return np.clip(u, lim[:, 0], lim[:, 1])


def frm_step(ctrl: ControllerState, params: ControllerParams, omega_dev: np.ndarray, dt: float) -> ControllerState:
    """One RK4 step of the consensus dynamics and the FRM control law.

    ``omega_dev`` is the per-bus speed deviation (rad/s).
    """
    if ctrl.mode is not Mode.FRM:
        raise DomainError("frm_step called outside FRM")
    r = _rk4_linear(ctrl.r, -params.laplacian, dt)
    load = np.asarray(params.load)
    u = -params.k_i * r[load] - params.k_p * np.asarray(omega_dev)[load]
    return replace(ctrl, r=r, u_bar=saturate(u, params))


def lrm_step(ctrl: ControllerState, params: ControllerParams, dt: float) -> ControllerState:
    """One RK4 step of the exponential recovery ``r' = -alpha r``."""
    if ctrl.mode is not Mode.LRM:
        raise DomainError("lrm_step called outside LRM")
    a = -params.alpha
    k = a * dt
    r = ctrl.r * (1 + k + k * k / 2 + k**3 / 6 + k**4 / 24)
    u = -params.k_i * r[np.asarray(params.load)]
    return replace(ctrl, r=r, u_bar=saturate(u, params))


def reinit(ctrl: ControllerState, d: np.ndarray) -> ControllerState:
    """Reset the consensus state to the measured per-bus imbalance."""
    return replace(ctrl, r=np.array(d, dtype=float))


def apply_switch(ctrl: ControllerState, mode: Mode, phi: int, events: list[SwitchEvent]) -> ControllerState:
    out = replace(ctrl, mode=mode, phi=phi)
    for ev in events:
        if ev.kind == "enter_frm":
            out = replace(out, t_m=ev.time, t_m_prime=None)
        elif ev.kind == "enter_lrm":
            out = replace(out, t_m_prime=ev.t_m_prime)
    return out
