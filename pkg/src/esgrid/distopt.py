"""Aggregator setpoint optimisation on the linearised power-flow model.

Decision vector ``x = (P, Q, V, theta)`` of length 4N in injection convention
(loads negative).  The equality constraints are the linear power-flow rows
``W x = 0``; each bus also has a box.  Every bus hosts one agent; agent ``j``
sees only the rows of ``W`` belonging to its closed neighbourhood and only its
own cost term.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import kernels
from .aggregator import AggregatorParams, OperatingRegion
from .errors import ConvergenceError, DomainError, InfeasibleError, NumericalError
from .grid import AdmittanceTriple, NetworkCase, build_admittance
from .powerflow import InjectionSpec, LossModel, solve_ac_newton, solve_dlpf

KAPPA = 250.0
ZETA = 500.0
ETA = 250.0
DEFAULT_COMM_WEIGHT = 10.0
Q_PCC_LIMITS = (-100.0, 100.0)
MAX_EULER_STEP = 1e-4


def constraint_matrix(adm: AdmittanceTriple) -> np.ndarray:
    """``W = [[I, O, -G, B'], [O, I, B, G]]`` so that ``W x = 0``."""
    n = adm.G.shape[0]
    I = np.eye(n)
    O = np.zeros((n, n))
    return np.block([[I, O, -adm.G, adm.B_prime], [O, I, adm.B, adm.G]])


@dataclass(frozen=True)
class DistOptProblem:
    """Everything the agents and the reference solver need.

    ``x_nom`` is the nominal operating point: nominal injections with the
    linear-model voltages; the cost is measured from its P and Q entries.
    ``rows[j]`` lists the rows of ``W`` that agent ``j`` holds.
    """

    case: NetworkCase
    W: np.ndarray
    rows: tuple[np.ndarray, ...]
    lo: np.ndarray
    hi: np.ndarray
    agent_lo: np.ndarray
    agent_hi: np.ndarray
    hd: np.ndarray  # per-agent diagonal Hessian of f_j, shape (N, 4N)
    x_nom: np.ndarray
    comm: np.ndarray
    agg_index: np.ndarray  # bus indices hosting aggregators
    critical_p: np.ndarray  # critical consumption at aggregator buses (positive = load)
    critical_q: np.ndarray
    u_bar: float
    p_pcc_target: float
    p_loss: float
    p_pin: float

    @property
    def n(self) -> int:
        return self.case.n

    @property
    def dim(self) -> int:
        return 4 * self.case.n

    def W_j(self, j: int) -> np.ndarray:
        return self.W[self.rows[j]]

    def padded_rows(self) -> np.ndarray:
        """Stack of every ``W_j`` zero-padded to the largest row count."""
        r = max(len(rw) for rw in self.rows)
        out = np.zeros((self.n, r, self.dim))
        for j, rw in enumerate(self.rows):
            out[j, : len(rw)] = self.W[rw]
        return out

    def aggregator_powers(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Noncritical consumption (P, Q) at each aggregator implied by ``x``."""
        n = self.n
        p = -x[self.agg_index] - self.critical_p
        q = -x[n + self.agg_index] - self.critical_q
        return p, q


def _neighbourhood_rows(case: NetworkCase) -> tuple[np.ndarray, ...]:
    n = case.n
    out = []
    for j, nb in enumerate(case.neighbors()):
        members = np.array(sorted(nb | {j}), dtype=np.int64)
        out.append(np.concatenate([members, members + n]))
    return tuple(out)


def comm_matrix(case: NetworkCase, weight: float = DEFAULT_COMM_WEIGHT) -> np.ndarray:
    C = np.zeros((case.n, case.n))
    for ln in case.lines:
        i, j = case.index(ln.from_bus), case.index(ln.to_bus)
        C[i, j] = C[j, i] = weight
    return C


def pcc_pin(total_load: float, u_bar: float, loss: LossModel) -> tuple[float, float, float]:
    """PCC injection of the lossless model that realises a response ``u_bar``.

    The uncontrolled import ``p_free`` solves ``p = L + loss(p)``; the target
    import is ``p_free - u_bar`` and the linear model, having no losses, must
    carry that import minus the predicted loss.  Returns
    ``(p_target, p_loss, p_pin)``.
    """
    if not loss.d_l < 1:
        raise DomainError("loss slope must be below 1")
    p_free = (total_load + loss.c) / (1.0 - loss.d_l)
    target = p_free - u_bar
    p_loss = loss(target)
    return target, p_loss, target - p_loss


def build_problem(
    subnet: NetworkCase,
    u_bar: float,
    loss: LossModel,
    regions: Mapping[int, OperatingRegion],
    comm_weight: float = DEFAULT_COMM_WEIGHT,
    q_pcc_limits: tuple[float, float] = Q_PCC_LIMITS,
    adm: AdmittanceTriple | None = None,
) -> DistOptProblem:
    """Assemble the optimisation problem for one subnetwork.

    ``subnet``'s nominal injections are the current loads (critical plus
    nominal noncritical at aggregator buses).  ``u_bar`` is the requested
    reduction of PCC import (positive = consume less).
    """
    if adm is None:
        adm = build_admittance(subnet)
    n = subnet.n
    pcc = subnet.pcc
    p_nom = subnet.p_injection()
    q_nom = subnet.q_injection()
    W = constraint_matrix(adm)

    missing = [b for b in subnet.aggregators if b not in regions]
    if missing:
        raise DomainError(f"no operating region for aggregator buses {missing}")

    lo = np.empty(4 * n)
    hi = np.empty(4 * n)
    x_nom = np.empty(4 * n)
    hd = np.zeros((n, 4 * n))
    agg_index, crit_p, crit_q = [], [], []
    p_nom = p_nom.copy()
    p_nom[pcc] = 0.0
    total_load = -p_nom.sum()
    for i, bus in enumerate(subnet.buses):
        lo[i] = hi[i] = p_nom[i]
        lo[n + i] = hi[n + i] = q_nom[i]
        lo[2 * n + i], hi[2 * n + i] = bus.v_limits
        lo[3 * n + i], hi[3 * n + i] = np.deg2rad(bus.theta_limits_deg)
        agg: AggregatorParams | None = subnet.aggregators.get(bus.id)
        if agg is not None:
            reg = regions[bus.id]
            cp_ = -p_nom[i] - agg.p0
            cq_ = -q_nom[i] - agg.q0
            lo[i], hi[i] = -cp_ - reg.p_limits[1], -cp_ - reg.p_limits[0]
            lo[n + i], hi[n + i] = -cq_ - reg.q_limits[1], -cq_ - reg.q_limits[0]
            hd[i, i] = 2.0 * agg.h
            hd[i, n + i] = 2.0 * agg.g
            agg_index.append(i)
            crit_p.append(cp_)
            crit_q.append(cq_)

    target, p_loss, pin = pcc_pin(total_load, u_bar, loss)
    lo[pcc] = hi[pcc] = pin
    lo[n + pcc], hi[n + pcc] = q_pcc_limits

    # capacity check on the aggregate active power
    agg_index_a = np.array(agg_index, dtype=np.int64)
    fixed = np.delete(np.arange(n), np.concatenate([agg_index_a, [pcc]]))
    fixed_load = -p_nom[fixed].sum()
    cons_min = fixed_load - hi[agg_index_a].sum()
    cons_max = fixed_load - lo[agg_index_a].sum()
    if not cons_min - 1e-12 <= pin <= cons_max + 1e-12:
        side = "reduction" if pin < cons_min else "increase"
        raise InfeasibleError(
            f"requested response u_bar={u_bar:.6g} exceeds the aggregate {side} capacity "
            f"(PCC injection {pin:.6g} outside [{cons_min:.6g}, {cons_max:.6g}])",
            [f"P_{subnet.buses[pcc].id} pin"],
        )

    # nominal operating point of the linear model
    sol = solve_dlpf(adm, InjectionSpec(p_nom, q_nom, pcc, float(lo[2 * n + pcc]), float(lo[3 * n + pcc])))
    x_nom = np.concatenate([p_nom, q_nom, sol.V, sol.theta])
    x_nom[pcc] = sol.P[pcc]
    x_nom[n + pcc] = sol.Q[pcc]

    return DistOptProblem(
        case=subnet,
        W=W,
        rows=_neighbourhood_rows(subnet),
        lo=lo,
        hi=hi,
        agent_lo=np.tile(lo, (n, 1)),
        agent_hi=np.tile(hi, (n, 1)),
        hd=hd,
        x_nom=x_nom,
        comm=comm_matrix(subnet, comm_weight),
        agg_index=agg_index_a,
        critical_p=np.array(crit_p),
        critical_q=np.array(crit_q),
        u_bar=float(u_bar),
        p_pcc_target=float(target),
        p_loss=float(p_loss),
        p_pin=float(pin),
    )


def repin(problem: DistOptProblem, u_bar: float, loss: LossModel) -> DistOptProblem:
    """Same problem with the PCC active-power pin moved for a new ``u_bar``."""
    pcc = problem.case.pcc
    total_load = -np.delete(problem.case.p_injection(), pcc).sum()
    target, p_loss, pin = pcc_pin(total_load, u_bar, loss)
    lo, hi = problem.lo.copy(), problem.hi.copy()
    lo[pcc] = hi[pcc] = pin
    agg = problem.agg_index
    fixed = np.delete(np.arange(problem.n), np.concatenate([agg, [pcc]]))
    fixed_load = -problem.case.p_injection()[fixed].sum()
    if not fixed_load - hi[agg].sum() - 1e-12 <= pin <= fixed_load - lo[agg].sum() + 1e-12:
        raise InfeasibleError(f"requested response u_bar={u_bar:.6g} exceeds aggregate capacity", [f"P_{pcc + 1} pin"])
    agent_lo, agent_hi = problem.agent_lo.copy(), problem.agent_hi.copy()
    agent_lo[:, pcc] = agent_hi[:, pcc] = pin
    return replace(
        problem, lo=lo, hi=hi, agent_lo=agent_lo, agent_hi=agent_hi,
        u_bar=float(u_bar), p_pcc_target=float(target), p_loss=float(p_loss), p_pin=float(pin),
    )


# ---------------------------------------------------------------------------
# cost


def cost(x, problem: DistOptProblem) -> float:
    """Sum of ``h (P - P0)^2 + g (Q - Q0)^2`` over aggregators.

    Accepts a decision vector, a stacked agent array (uses each agent's own
    entries) or an :class:`Allocation`.
    """
    if isinstance(x, Allocation):
        return x.cost
    x = np.asarray(x, dtype=float)
    n = problem.n
    if x.ndim == 2:
        x = own_entries(x, problem)
    dp = x[:n] - problem.x_nom[:n]
    dq = x[n : 2 * n] - problem.x_nom[n : 2 * n]
    h = problem.hd[np.arange(n), np.arange(n)] / 2.0
    g = problem.hd[np.arange(n), n + np.arange(n)] / 2.0
    return float(np.sum(h * dp * dp + g * dq * dq))


def own_entries(X: np.ndarray, problem: DistOptProblem) -> np.ndarray:
    """Decision vector assembled from each agent's estimate of its own bus."""
    n = problem.n
    idx = np.arange(n)
    out = X[0].copy()
    for blk in range(4):
        out[blk * n + idx] = X[idx, blk * n + idx]
    return out


def project_box(w: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the box ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise DomainError("box bounds out of order")
    return np.minimum(np.maximum(w, lo), hi)


# ---------------------------------------------------------------------------
# agents


@dataclass(frozen=True)
class AgentState:
    w: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class AgentSwarm:
    """All agents of one subnetwork; row ``j`` belongs to agent ``j``.

    ``y`` is zero-padded to the largest neighbourhood; padded entries never move
    because the matching rows of the padded ``W_j`` are zero.
    """

    w: np.ndarray
    y: np.ndarray
    z: np.ndarray
    kappa: float = KAPPA
    zeta: float = ZETA
    eta: float = ETA

    def x(self, problem: DistOptProblem) -> np.ndarray:
        return np.minimum(np.maximum(self.w, problem.agent_lo), problem.agent_hi)

    def agent(self, j: int, problem: DistOptProblem) -> AgentState:
        k = len(problem.rows[j])
        return AgentState(self.w[j].copy(), self.x(problem)[j], self.y[j, :k].copy(), self.z[j].copy())

    def copy(self) -> "AgentSwarm":
        return replace(self, w=self.w.copy(), y=self.y.copy(), z=self.z.copy())


def init_agents(problem: DistOptProblem, kappa: float = KAPPA, zeta: float = ZETA, eta: float = ETA) -> AgentSwarm:
    """Agents at the nominal operating point with zero multipliers."""
    if not (kappa > 0 and zeta > 0 and eta > 0):
        raise DomainError("agent gains must be positive")
    n = problem.n
    r = max(len(rw) for rw in problem.rows)
    w = np.tile(project_box(problem.x_nom, problem.lo, problem.hi), (n, 1))
    return AgentSwarm(w=w, y=np.zeros((n, r)), z=np.zeros((n, problem.dim)), kappa=kappa, zeta=zeta, eta=eta)


def stable_step(problem: DistOptProblem, swarm: AgentSwarm) -> float:
    """Step-size heuristic for the semi-implicit Euler scheme.

    The stiff cost term is implicit; the explicit part is bounded by the
    consensus coupling ``kappa * lambda_max(L_c)`` and the multiplier
    oscillation ``sqrt(kappa * zeta * max ||W_j||^2)``.
    """
    C = problem.comm
    L = np.diag(C.sum(1)) - C
    lam_c = float(np.linalg.eigvalsh(L)[-1]) if problem.n > 1 else 0.0
    lam_w = max(float(np.linalg.norm(problem.W_j(j), 2)) ** 2 for j in range(problem.n))
    rate = max(swarm.kappa * (1.0 + lam_c), math.sqrt(swarm.kappa * swarm.zeta * lam_w), swarm.eta)
    return min(MAX_EULER_STEP, 1.0 / rate)


def agent_step(problem: DistOptProblem, swarm: AgentSwarm, dt: float, n_steps: int = 1, use_numba: bool | None = None) -> AgentSwarm:
    """Synchronous Euler advance of every agent (``n_steps`` steps of ``dt``).

    Raises :class:`ConvergenceError` if any state grows beyond 1e6, meaning the
    gains or the step are unstable.
    """
    out = swarm.copy()
    done = kernels.agent_run(
        out.w, out.y, out.z, problem.agent_lo, problem.agent_hi, problem.hd,
        np.tile(problem.x_nom, (problem.n, 1)), problem.padded_rows(), problem.comm,
        out.kappa, out.zeta, out.eta, float(dt), int(n_steps), use_numba=use_numba,
    )
    if done < n_steps:
        raise ConvergenceError(
            f"agent dynamics diverged after {done} steps of {dt:g} s "
            f"(kappa={out.kappa:g}, zeta={out.zeta:g}, eta={out.eta:g}); gains or step unstable"
        )
    return out


@dataclass(frozen=True)
class TracePoint:
    time: float
    consensus: float
    constraint: float
    cost: float


def residuals(problem: DistOptProblem, swarm: AgentSwarm) -> tuple[float, float]:
    """(max_jq ||x_j - x_q||_inf, max_j ||W x_j||_inf)."""
    X = swarm.x(problem)
    cons = float(np.max(X.max(axis=0) - X.min(axis=0)))
    feas = float(np.max(np.abs(X @ problem.W.T)))
    return cons, feas


def run_agents(
    problem: DistOptProblem,
    swarm: AgentSwarm,
    duration: float,
    dt: float | None = None,
    trace_every: float | None = None,
    max_halvings: int = 4,
    use_numba: bool | None = None,
) -> tuple[AgentSwarm, float, list[TracePoint]]:
    """Integrate the agent dynamics over ``duration`` seconds of model time.

    On divergence the run restarts from ``swarm`` with half the step, up to
    ``max_halvings`` times.  Returns the new swarm, the step used and the trace.
    """
    if dt is None:
        dt = stable_step(problem, swarm)
    for _ in range(max_halvings + 1):
        try:
            return _run_fixed(problem, swarm, duration, dt, trace_every, use_numba)
        except ConvergenceError:
            dt /= 2
    raise ConvergenceError(f"agent dynamics unstable even with step {dt * 2:g} s")


def _run_fixed(problem, swarm, duration, dt, trace_every, use_numba):
    n_total = max(1, int(round(duration / dt)))
    trace: list[TracePoint] = []
    if trace_every is None:
        return agent_step(problem, swarm, dt, n_total, use_numba), dt, trace
    chunk = max(1, int(round(trace_every / dt)))
    done = 0
    cur = swarm
    while done < n_total:
        k = min(chunk, n_total - done)
        cur = agent_step(problem, cur, dt, k, use_numba)
        done += k
        c, f = residuals(problem, cur)
        trace.append(TracePoint(done * dt, c, f, cost(cur.x(problem), problem)))
    return cur, dt, trace


def solve_distributed(
    problem: DistOptProblem,
    swarm: AgentSwarm | None = None,
    tol: float = 1e-5,
    max_time: float = 60.0,
    check_every: float = 0.05,
    use_numba: bool | None = None,
) -> tuple[AgentSwarm, list[TracePoint]]:
    """Run the agents until consensus and constraint residuals fall below ``tol``."""
    if swarm is None:
        swarm = init_agents(problem)
    dt = stable_step(problem, swarm)
    t = 0.0
    trace: list[TracePoint] = []
    while t < max_time:
        swarm, dt, _ = run_agents(problem, swarm, check_every, dt, use_numba=use_numba)
        t += check_every
        c, f = residuals(problem, swarm)
        trace.append(TracePoint(t, c, f, cost(swarm.x(problem), problem)))
        if c < tol and f < tol:
            return swarm, trace
    raise ConvergenceError(f"agents did not reach tolerance {tol:g} within {max_time:g} s (consensus {c:.3e}, constraint {f:.3e})")


def trace_csv(trace: list[TracePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "consensus_residual", "constraint_residual", "cost"])
    for p in trace:
        w.writerow([f"{p.time:.9g}", f"{p.consensus:.9g}", f"{p.constraint:.9g}", f"{p.cost:.9g}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# centralised reference


@dataclass(frozen=True)
class QPResult:
    x: np.ndarray
    cost: float
    kkt_residual: float
    active: np.ndarray


def _objective_terms(problem: DistOptProblem):
    H = problem.hd.sum(axis=0)
    return H, problem.x_nom


def _diagnose_infeasible(problem: DistOptProblem) -> list[str]:
    """Elastic LP: the smallest box relaxation making ``W x = 0`` solvable."""
    from scipy.optimize import linprog

    n4 = problem.dim
    # variables: x, s_lo, s_hi ; lo - s_lo <= x <= hi + s_hi
    c = np.concatenate([np.zeros(n4), np.ones(n4), np.ones(n4)])
    I = np.eye(n4)
    Z = np.zeros_like(problem.W)
    A_eq = np.hstack([problem.W, Z, Z])
    A_ub = np.vstack([np.hstack([-I, -I, np.zeros((n4, n4))]), np.hstack([I, np.zeros((n4, n4)), -I])])
    b_ub = np.concatenate([-problem.lo, problem.hi])
    bounds = [(None, None)] * n4 + [(0, None)] * (2 * n4)
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.zeros(A_eq.shape[0]), bounds=bounds, method="highs")
    if res.status != 0:
        return ["linear model (no box relaxation restores feasibility)"]
    names = _var_names(problem)
    s_lo, s_hi = res.x[n4 : 2 * n4], res.x[2 * n4 :]
    out = [f"{names[k]} lower bound" for k in np.nonzero(s_lo > 1e-9)[0]]
    out += [f"{names[k]} upper bound" for k in np.nonzero(s_hi > 1e-9)[0]]
    return out


def _var_names(problem: DistOptProblem) -> list[str]:
    ids = [b.id for b in problem.case.buses]
    return [f"{blk}_{i}" for blk in ("P", "Q", "V", "theta") for i in ids]


def centralized_qp(problem: DistOptProblem, kkt_tol: float = 1e-8) -> QPResult:
    """Solve ``min sum f_j`` s.t. ``W x = 0``, ``lo <= x <= hi`` centrally.

    An interior-point solve identifies the active set; the KKT system of that
    active set is then solved directly so the answer is exact to round-off.
    """
    import cvxpy as cp

    H, x0 = _objective_terms(problem)
    n4 = problem.dim
    lo, hi = problem.lo, problem.hi
    x = cp.Variable(n4)
    obj = 0.5 * cp.sum(cp.multiply(H, cp.square(x - x0)))
    prob = cp.Problem(cp.Minimize(obj), [problem.W @ x == 0, x >= lo, x <= hi])
    try:
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    except cp.error.SolverError as exc:
        raise NumericalError(f"QP solver failed: {exc}") from exc
    if prob.status in ("infeasible", "infeasible_inaccurate") or x.value is None:
        raise InfeasibleError("optimisation problem is infeasible", _diagnose_infeasible(problem))
    xv = np.clip(np.asarray(x.value, dtype=float), lo, hi)
    polished = _polish(problem, xv, H, x0)
    if polished is not None:
        xv = polished
    kkt = _kkt_residual(problem, xv, H, x0)
    if kkt.residual > max(kkt_tol, 1e-6):
        raise NumericalError(f"QP solution fails KKT check (residual {kkt.residual:.3e})")
    return QPResult(xv, cost(xv, problem), kkt.residual, kkt.active)


@dataclass(frozen=True)
class _KKT:
    residual: float
    active: np.ndarray


def _active_set(problem, x, tol=1e-7):
    lo, hi = problem.lo, problem.hi
    pinned = hi - lo <= 1e-12
    at_lo = (x - lo <= tol) & ~pinned
    at_hi = (hi - x <= tol) & ~pinned
    return pinned, at_lo, at_hi


def _polish(problem, x, H, x0):
    pinned, at_lo, at_hi = _active_set(problem, x)
    fixed = pinned | at_lo | at_hi
    xf = x.copy()
    xf[at_lo] = problem.lo[at_lo]
    xf[at_hi] = problem.hi[at_hi]
    xf[pinned] = problem.lo[pinned]
    F = np.nonzero(~fixed)[0]
    A = np.nonzero(fixed)[0]
    W = problem.W
    m = W.shape[0]
    K = np.block([[np.diag(H[F]), W[:, F].T], [W[:, F], np.zeros((m, m))]])
    rhs = np.concatenate([H[F] * x0[F], -W[:, A] @ xf[A]])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    xf[F] = sol[: len(F)]
    if np.any(xf < problem.lo - 1e-10) or np.any(xf > problem.hi + 1e-10):
        return None
    if np.max(np.abs(W @ xf)) > 1e-10:
        return None
    return np.clip(xf, problem.lo, problem.hi)


def _kkt_residual(problem, x, H, x0) -> _KKT:
    """Stationarity residual with sign-constrained bound multipliers."""
    pinned, at_lo, at_hi = _active_set(problem, x, tol=1e-9)
    g = H * (x - x0)
    W = problem.W
    free = ~(pinned | at_lo | at_hi)
    # multipliers from the free rows, then check the bound multipliers' signs
    lam, *_ = np.linalg.lstsq(W[:, free].T, -g[free], rcond=None)
    r = g + W.T @ lam
    res = np.abs(r[free]).max(initial=0.0)
    # at a lower bound r >= 0 (pushes up is blocked), at an upper bound r <= 0
    res = max(res, np.maximum(-r[at_lo], 0).max(initial=0.0), np.maximum(r[at_hi], 0).max(initial=0.0))
    res = max(res, float(np.abs(W @ x).max()))
    return _KKT(float(res), np.nonzero(pinned | at_lo | at_hi)[0])


# ---------------------------------------------------------------------------
# proportional adjustment baseline


@dataclass(frozen=True)
class Allocation:
    """Per-aggregator noncritical (P, Q) consumption and its cost."""

    bus_ids: tuple[int, ...]
    p: np.ndarray
    q: np.ndarray
    dp: np.ndarray
    dq: np.ndarray
    cost: float


def proportional_adjustment(
    problem: DistOptProblem,
    hold_voltage: np.ndarray | None = None,
    regions: Mapping[int, OperatingRegion] | None = None,
) -> Allocation:
    """Capacity-proportional split of the required active-power change.

    The total change in aggregator consumption is whatever the linear model
    needs to meet the PCC pin.  Reactive powers are then chosen so every
    aggregator bus holds ``hold_voltage`` (default: the voltages of the
    uncontrolled AC operating point) and clipped to the operating rectangle.
    """
    case = problem.case
    n = case.n
    idx = problem.agg_index
    params = [case.aggregators[case.buses[i].id] for i in idx]
    p0 = np.array([a.p0 for a in params])
    q0 = np.array([a.q0 for a in params])
    p_lo = -problem.hi[idx] - problem.critical_p
    p_hi = -problem.lo[idx] - problem.critical_p
    q_lo = -problem.hi[n + idx] - problem.critical_q
    q_hi = -problem.lo[n + idx] - problem.critical_q
    # required change of total aggregator consumption
    fixed = np.delete(np.arange(n), np.concatenate([idx, [case.pcc]]))
    fixed_load = -case.p_injection()[fixed].sum()
    required = problem.p_pin - fixed_load - (problem.critical_p.sum() + p0.sum())
    if abs(required) < 1e-15:
        dp = np.zeros(len(idx))
    else:
        cap = (p0 - p_lo) if required < 0 else (p_hi - p0)
        if abs(required) > cap.sum() + 1e-12:
            raise InfeasibleError(
                f"required change {required:.6g} exceeds total capacity {cap.sum():.6g}", ["aggregate capacity"]
            )
        dp = required * cap / cap.sum()
    p = p0 + dp
    if np.all(dp == 0):
        q = q0.copy()
    else:
        q = _hold_voltage_q(problem, p, hold_voltage)
        q = np.clip(q, q_lo, q_hi)
    dq = q - q0
    h = np.array([a.h for a in params])
    g = np.array([a.g for a in params])
    c = float(np.sum(h * dp**2 + g * dq**2))
    return Allocation(tuple(case.buses[i].id for i in idx), p, q, dp, dq, c)


def _hold_voltage_q(problem: DistOptProblem, p_nl: np.ndarray, hold_voltage) -> np.ndarray:
    case = problem.case
    idx = problem.agg_index
    spec = InjectionSpec.from_case(case)
    adm = build_admittance(case)
    if hold_voltage is None:
        hold_voltage = solve_ac_newton(case, spec, adm).V
    p = spec.p.copy()
    p[idx] = -problem.critical_p - p_nl
    pv = {int(i): float(hold_voltage[i]) for i in idx}
    sol = solve_ac_newton(case, InjectionSpec(p, spec.q, spec.slack, spec.v_slack, spec.theta_slack, pv), adm)
    return -sol.Q[idx] - problem.critical_q


# ---------------------------------------------------------------------------
# dumps


def problem_to_json(problem: DistOptProblem) -> str:
    doc = {
        "case": problem.case.name,
        "n": problem.n,
        "u_bar": problem.u_bar,
        "p_pcc_target": problem.p_pcc_target,
        "p_loss": problem.p_loss,
        "p_pin": problem.p_pin,
        "variables": _var_names(problem),
        "lower": problem.lo.tolist(),
        "upper": problem.hi.tolist(),
        "x_nominal": problem.x_nom.tolist(),
        "W": problem.W.tolist(),
        "agent_rows": [r.tolist() for r in problem.rows],
        "comm": problem.comm.tolist(),
        "aggregator_buses": [problem.case.buses[i].id for i in problem.agg_index],
    }
    return json.dumps(doc, indent=1)


def solution_to_json(problem: DistOptProblem, x: np.ndarray) -> str:
    p, q = problem.aggregator_powers(x)
    doc = {
        "x": dict(zip(_var_names(problem), np.asarray(x, dtype=float).tolist())),
        "cost": cost(x, problem),
        "setpoints": {
            str(problem.case.buses[i].id): {"p": float(pi), "q": float(qi)}
            for i, pi, qi in zip(problem.agg_index, p, q)
        },
    }
    return json.dumps(doc, indent=1)
