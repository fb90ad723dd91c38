"""Clocked co-simulation of the transmission layer and its subnetworks.

Each tick of ``dt`` seconds:

1. apply due load events;
2. advance the swing / governor / turbine model with the measured subnetwork
   responses, and run AGC;
3. evaluate the FRM/LRM switching logic and step the load-side controller;
4. on broadcast ticks, re-pin every subnetwork problem to the new ``u_bar``,
   run the agent dynamics for one broadcast period and push the resulting
   (P*, Q*) to the aggregators as ES voltage setpoints;
5. PI-track the ES voltages and re-solve each subnetwork's AC power flow;
6. log.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import controller as ctl
from . import distopt
from . import transmission as tx
from .aggregator import PIGains, es_voltage_setpoints, forward_state, operating_region, pi_track_arrays
from .errors import CaseError, InfeasibleError, NumericalError
from .grid import NetworkCase, build_admittance, read_case
from .powerflow import InjectionSpec, LossModel, fit_loss_model, solve_ac_newton

FLOAT_FMT = "{:.9g}"
GUARD_MARGIN = 1e-3


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Event:
    """Step change of critical load: ``dp``/``dq`` are added to consumption."""

    time: float
    network: str
    bus: int
    dp: float
    dq: float = 0.0


DEFAULTS: dict[str, Any] = {
    "transmission": "case9",
    "subnets": {"5": "feeder7", "7": "case15", "9": "case14"},
    "events": [],
    "t_start": 0.0,
    "t_end": 10.0,
    "dt": 0.01,
    "broadcast_period": 0.15,
    "load_side_control": True,
    "controller": {
        "k_i": 1.5,
        "k_p": 0.02,
        "alpha": 0.1,
        "tau": 3.0,
        "freq_band": [-0.05, 0.05],
        "comm_weight": ctl.DEFAULT_COMM_WEIGHT,
        "u_fraction": 0.1,
        "capacity_fraction": 0.4,
    },
    "generators": None,
    "agc": {"period": 2.0, "gain": 0.2},
    "d_load": 0.02,
    "optimizer": {
        "kappa": {"feeder7": 250.0, "case15": 190.0, "case14": 250.0},
        "zeta": distopt.ZETA,
        "eta": distopt.ETA,
        "comm_weight": distopt.DEFAULT_COMM_WEIGHT,
        "mode": "budget",
        "tolerance": 1e-6,
    },
    "pi": {"kp": 1.0, "ki": 50.0, "t_inv": 0.02},
    "monitor": {"feeder7": 2, "case15": 12, "case14": 10},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    transmission: str
    subnets: dict[int, str]
    events: tuple[Event, ...]
    t_start: float
    t_end: float
    dt: float
    broadcast_period: float
    load_side_control: bool
    controller: dict[str, Any]
    generators: list[dict[str, Any]] | None
    agc: dict[str, Any]
    d_load: float
    optimizer: dict[str, Any]
    pi: dict[str, Any]
    monitor: dict[str, int]
    base_dir: str = "."

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base_dir: str = ".") -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise CaseError("scenario document must be a JSON object")
        unknown = sorted(set(doc) - set(DEFAULTS))
        full = _merge(DEFAULTS, doc)
        problems = [f"unknown key {k!r}" for k in unknown]
        try:
            subnets = {int(k): str(v) for k, v in full["subnets"].items()}
        except (TypeError, ValueError, AttributeError):
            problems.append("subnets must map transmission bus ids to case names")
            subnets = {}
        events = []
        for i, ev in enumerate(full["events"] or []):
            try:
                events.append(Event(float(ev["time"]), str(ev["network"]), int(ev["bus"]), float(ev["dp"]), float(ev.get("dq", 0.0))))
            except (KeyError, TypeError, ValueError) as exc:
                problems.append(f"events[{i}]: {exc.__class__.__name__} {exc}")
        for key in ("t_start", "t_end", "dt", "broadcast_period", "d_load"):
            if not isinstance(full[key], (int, float)) or isinstance(full[key], bool):
                problems.append(f"{key} must be a number")
        if not problems:
            if not full["dt"] > 0:
                problems.append("dt must be positive")
            if not full["t_end"] > full["t_start"]:
                problems.append("t_end must exceed t_start")
            if full["dt"] > 0:
                ratio = full["broadcast_period"] / full["dt"]
                if full["broadcast_period"] <= 0 or abs(ratio - round(ratio)) > 1e-9:
                    problems.append("broadcast_period must be a positive multiple of dt")
            for ev in events:
                if not full["t_start"] <= ev.time <= full["t_end"]:
                    problems.append(f"event at t={ev.time} outside [{full['t_start']}, {full['t_end']}]")
                if ev.network != "transmission" and ev.network not in subnets.values():
                    problems.append(f"event network {ev.network!r} is not part of the scenario")
        if full["optimizer"].get("mode") not in ("budget", "converge"):
            problems.append("optimizer.mode must be 'budget' or 'converge'")
        if problems:
            raise CaseError("invalid scenario", problems)
        return cls(
            transmission=str(full["transmission"]),
            subnets=subnets,
            events=tuple(sorted(events, key=lambda e: e.time)),
            t_start=float(full["t_start"]),
            t_end=float(full["t_end"]),
            dt=float(full["dt"]),
            broadcast_period=float(full["broadcast_period"]),
            load_side_control=bool(full["load_side_control"]),
            controller=full["controller"],
            generators=full["generators"],
            agc=full["agc"],
            d_load=float(full["d_load"]),
            optimizer=full["optimizer"],
            pi=full["pi"],
            monitor={str(k): int(v) for k, v in full["monitor"].items()},
            base_dir=base_dir,
        )

    @classmethod
    def from_json(cls, text: str, base_dir: str = ".") -> "ScenarioConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseError(f"scenario is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}") from None
        return cls.from_dict(doc, base_dir)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise CaseError(f"cannot read scenario {path}: {exc}") from None
        return cls.from_json(text, str(p.parent))

    def to_dict(self) -> dict[str, Any]:
        return {
            "transmission": self.transmission,
            "subnets": {str(k): v for k, v in self.subnets.items()},
            "events": [
                {"time": e.time, "network": e.network, "bus": e.bus, "dp": e.dp, "dq": e.dq} for e in self.events
            ],
            "t_start": self.t_start,
            "t_end": self.t_end,
            "dt": self.dt,
            "broadcast_period": self.broadcast_period,
            "load_side_control": self.load_side_control,
            "controller": self.controller,
            "generators": self.generators,
            "agc": self.agc,
            "d_load": self.d_load,
            "optimizer": self.optimizer,
            "pi": self.pi,
            "monitor": self.monitor,
        }

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    def load_case(self, name: str) -> NetworkCase:
        path = Path(self.base_dir) / name
        return read_case(str(path) if path.suffix == ".json" and path.exists() else name)


def contingency_study(**over) -> ScenarioConfig:
    """The bundled contingency study: +0.2 p.u. at bus 7 of the 15-bus network at 300 s."""
    doc = {
        "t_start": 295.0,
        "t_end": 340.0,
        "events": [{"time": 300.0, "network": "case15", "bus": 7, "dp": 0.2, "dq": 0.0}],
    }
    doc.update(over)
    return ScenarioConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# subnetwork plant


class Subnet:
    """Quasi-static AC plant of one subnetwork plus its aggregators and agents."""

    def __init__(self, name: str, case: NetworkCase, cfg: ScenarioConfig):
        self.name = name
        self.base_case = case
        self.case = case
        self.adm = build_admittance(case)
        self.spec0 = InjectionSpec.from_case(case)
        self.agg_ids = sorted(case.aggregators)
        self.agg_idx = np.array([case.index(b) for b in self.agg_ids], dtype=np.int64)
        self.params = [case.aggregators[b] for b in self.agg_ids]
        self.regions = {b: operating_region(case.aggregators[b]) for b in self.agg_ids}
        self.loss: LossModel = fit_loss_model(case)
        self.gains = PIGains(kp=float(cfg.pi["kp"]), ki=float(cfg.pi["ki"]), t_inv=float(cfg.pi["t_inv"]))
        opt = cfg.optimizer
        kappa = opt["kappa"].get(name, distopt.KAPPA) if isinstance(opt["kappa"], dict) else float(opt["kappa"])
        self.kappa, self.zeta, self.eta = float(kappa), float(opt["zeta"]), float(opt["eta"])
        self.comm_weight = float(opt["comm_weight"])
        self.opt_mode = opt["mode"]
        self.opt_tol = float(opt["tolerance"])

        # critical load (positive consumption) per bus
        p0 = np.zeros(case.n)
        q0 = np.zeros(case.n)
        for b, a in case.aggregators.items():
            p0[case.index(b)] = a.p0
            q0[case.index(b)] = a.q0
        self.crit_p = -case.p_injection() - p0
        self.crit_q = -case.q_injection() - q0
        self.crit_p[case.pcc] = 0.0
        self.crit_q[case.pcc] = 0.0

        n_agg = len(self.agg_ids)
        self.v_es = np.zeros((n_agg, 2))
        self.integ = np.zeros((n_agg, 2))
        self.target = np.zeros((n_agg, 2))
        self.p_sl = np.array([a.p0 for a in self.params])
        self.q_sl = np.array([a.q0 for a in self.params])
        self.v_nl = np.ones(n_agg)

        self.V, self.theta, self.p_pcc = self._steady_state()
        self.V_hold = self.V.copy()
        self.p_pcc_free = self.p_pcc
        self.p_pcc0 = self.p_pcc
        self.response = 0.0
        self.problem: distopt.DistOptProblem | None = None
        self.swarm: distopt.AgentSwarm | None = None
        self.last_u = 0.0
        self.stale = True
        self.cost_do = 0.0
        self.cost_pa = 0.0
        self.rate_do = 0.0
        self.rate_pa = 0.0

    # -- plant ---------------------------------------------------------------
    def _spec(self, p_sl: np.ndarray, q_sl: np.ndarray) -> InjectionSpec:
        p = -self.crit_p.copy()
        q = -self.crit_q.copy()
        p[self.agg_idx] -= p_sl
        q[self.agg_idx] -= q_sl
        return InjectionSpec(p, q, self.spec0.slack, self.spec0.v_slack, self.spec0.theta_slack)

    def _aggregator_powers(self, v_s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = np.empty(len(self.params))
        q = np.empty(len(self.params))
        vnl = np.empty(len(self.params))
        for k, a in enumerate(self.params):
            st = forward_state(self.v_es[k, 0], self.v_es[k, 1], v_s[k], a)
            p[k], q[k], vnl[k] = st.p_sl, st.q_sl, st.v_nl
        return p, q, vnl

    def _steady_state(self, max_iter: int = 100):
        """AC operating point with the current ES voltages, iterating the voltage-dependent load."""
        V = np.ones(self.case.n)
        theta = np.zeros(self.case.n)
        sol = None
        for _ in range(max_iter):
            p, q, vnl = self._aggregator_powers(V[self.agg_idx])
            sol = solve_ac_newton(self.case, self._spec(p, q), self.adm, v_init=V, theta_init=theta)
            done = np.max(np.abs(sol.V - V)) < 1e-13
            V, theta = sol.V, sol.theta
            if done:
                break
        else:
            raise NumericalError(f"{self.name}: voltage-dependent load iteration did not settle")
        self.p_sl, self.q_sl, self.v_nl = self._aggregator_powers(V[self.agg_idx])
        return V, theta, sol.P_pcc

    def apply_event(self, ev: Event) -> None:
        if not 1 <= ev.bus <= self.case.n:
            raise CaseError(f"event bus {ev.bus} not in {self.name}")
        i = self.case.index(ev.bus)
        self.crit_p[i] += ev.dp
        self.crit_q[i] += ev.dq
        p = self.case.p_injection().copy()
        q = self.case.q_injection().copy()
        p[i] -= ev.dp
        q[i] -= ev.dq
        self.case = self.case.with_injections(p, q)
        # uncontrolled import at the new loads (ES voltages at rest)
        saved = (self.v_es.copy(), self.p_sl.copy(), self.q_sl.copy(), self.v_nl.copy())
        self.v_es[:] = 0.0
        _, _, self.p_pcc_free = self._steady_state()
        self.v_es, self.p_sl, self.q_sl, self.v_nl = saved
        self.stale = True

    def _guard(self, v_es: np.ndarray, v_s: np.ndarray) -> np.ndarray:
        """Keep the noncritical-load voltage inside its limits at the measured bus voltage.

        The setpoint formula assumes the bus sits at ``v0``; off-nominal bus
        voltages can push a boundary setpoint slightly outside the range, so
        the aggregator scales the load voltage phasor back onto the limit.
        """
        out = v_es.copy()
        for k, a in enumerate(self.params):
            vd, vq = v_s[k] - v_es[k, 0], -v_es[k, 1]
            m = math.hypot(vd, vq)
            lo, hi = a.v_nl_limits[0] + GUARD_MARGIN, a.v_nl_limits[1] - GUARD_MARGIN
            if lo <= m <= hi:
                continue
            scale = (lo if m < lo else hi) / m
            out[k] = (v_s[k] - vd * scale, -vq * scale)
        return out

    def step_plant(self, dt: float) -> None:
        lo = np.array([[a.v_es_d_limits[0], a.v_es_q_limits[0]] for a in self.params])
        hi = np.array([[a.v_es_d_limits[1], a.v_es_q_limits[1]] for a in self.params])
        self.v_es, self.integ = pi_track_arrays(self.v_es, self.integ, self.target, lo, hi, dt, self.gains)
        self.v_es = self._guard(self.v_es, self.V[self.agg_idx])
        # bus voltage from the previous solve (one-tick lag)
        self.p_sl, self.q_sl, self.v_nl = self._aggregator_powers(self.V[self.agg_idx])
        sol = solve_ac_newton(self.case, self._spec(self.p_sl, self.q_sl), self.adm, v_init=self.V, theta_init=self.theta)
        self.V, self.theta, self.p_pcc = sol.V, sol.theta, sol.P_pcc
        self.response = self.p_pcc_free - self.p_pcc

    # -- optimisation --------------------------------------------------------
    def capacity(self) -> tuple[float, float]:
        """Largest import reduction and increase the aggregators can deliver."""
        red = sum(a.p0 - self.regions[b].p_limits[0] for b, a in zip(self.agg_ids, self.params))
        inc = sum(self.regions[b].p_limits[1] - a.p0 for b, a in zip(self.agg_ids, self.params))
        scale = 1.0 / (1.0 - self.loss.d_l)
        return red * scale, inc * scale

    def broadcast(self, u_bar: float, period: float) -> None:
        if u_bar == 0.0 and self.last_u == 0.0 and not self.stale and self.swarm is not None:
            self.rate_do = self.rate_pa = 0.0
            return
        if u_bar == 0.0 and self.last_u == 0.0 and self.swarm is None:
            self.rate_do = self.rate_pa = 0.0
            return
        if self.problem is None or self.stale:
            self.problem = distopt.build_problem(
                self.case, u_bar, self.loss, self.regions, comm_weight=self.comm_weight, adm=self.adm
            )
            if self.swarm is None:
                self.swarm = distopt.init_agents(self.problem, self.kappa, self.zeta, self.eta)
            self.stale = False
        else:
            self.problem = distopt.repin(self.problem, u_bar, self.loss)
        if self.opt_mode == "converge":
            self.swarm, _ = distopt.solve_distributed(self.problem, self.swarm, tol=self.opt_tol)
        else:
            self.swarm, _, _ = distopt.run_agents(self.problem, self.swarm, period)
        own = distopt.own_entries(self.swarm.x(self.problem), self.problem)
        p_star, q_star = self.problem.aggregator_powers(own)
        for k, a in enumerate(self.params):
            try:
                sp = es_voltage_setpoints(float(p_star[k]), float(q_star[k]), a)
            except InfeasibleError:
                # transient agent estimate outside the reachable set: hold the last target
                continue
            self.target[k] = (sp.v_es_d, sp.v_es_q)
        self.rate_do = distopt.cost(own, self.problem)
        if u_bar == 0.0:
            self.rate_pa = 0.0
        else:
            self.rate_pa = distopt.proportional_adjustment(self.problem, hold_voltage=self.V_hold).cost
        self.last_u = u_bar

    def accrue(self, dt: float) -> None:
        self.cost_do += self.rate_do * dt
        self.cost_pa += self.rate_pa * dt


# ---------------------------------------------------------------------------
# log


@dataclass
class TimeSeriesLog:
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def append(self, row: list[float]) -> None:
        if self.rows and not row[0] > self.rows[-1][0]:
            raise NumericalError("log times must be strictly increasing")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([r[k] for r in self.rows])

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([FLOAT_FMT.format(v) for v in r])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TimeSeriesLog":
        rd = csv.reader(io.StringIO(text))
        cols = next(rd)
        return cls(cols, [[float(v) for v in r] for r in rd if r])


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    log: TimeSeriesLog
    costs: dict[str, dict[str, float]]
    switch_events: list[ctl.SwitchEvent]


# ---------------------------------------------------------------------------
# engine


def _generators(cfg: ScenarioConfig) -> list[tx.GeneratorParams]:
    if cfg.generators is None:
        return tx.default_generators()
    out = []
    for g in cfg.generators:
        g = dict(g)
        if "H" in g:
            out.append(tx.GeneratorParams.from_inertia(**g))
        else:
            out.append(tx.GeneratorParams(**g))
    return out


class Simulation:
    """Holds all layers; ``run`` advances to ``t_end`` and returns the result."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        try:
            self.tcase = cfg.load_case(cfg.transmission)
            self.subnets: dict[int, Subnet] = {}
            for bus, name in sorted(cfg.subnets.items()):
                self.subnets[bus] = Subnet(name, cfg.load_case(name), cfg)
            gens = _generators(cfg)
        except TypeError as exc:
            raise CaseError(f"invalid generator parameters: {exc}") from None
        tcase = self.tcase
        self.model = tx.build_model(tcase, gens, cfg.d_load)
        self.load_ids = [tcase.buses[i].id for i in self.model.load]
        for bus in self.subnets:
            if bus not in self.load_ids:
                raise CaseError(f"subnetwork attached to bus {bus}, which is not a load bus")
        p_d = np.array([-tcase.buses[i].p_nominal for i in self.model.load])
        p_gen = np.array([tcase.buses[i].p_nominal for i in self.model.gen])
        self.p_d0 = p_d.copy()
        self.state, _ = tx.equilibrium(self.model, p_gen, p_d)
        self.agc = tx.AGC(period=float(cfg.agc.get("period", 2.0)))
        if "gain" in cfg.agc:
            gens = [replace(g, agc_gain=float(cfg.agc["gain"])) if g.agc_participation else g for g in self.model.generators]
            self.model = replace(self.model, generators=tuple(gens))

        c = cfg.controller
        frac_u = float(c["u_fraction"])
        frac_c = float(c["capacity_fraction"])
        limits = []
        for k, bus in enumerate(self.load_ids):
            cap = frac_u * self.p_d0[k]
            lo, hi = -cap, cap
            if bus in self.subnets:
                red, inc = self.subnets[bus].capacity()
                lo, hi = max(lo, -frac_c * inc), min(hi, frac_c * red)
            limits.append((lo, hi))
        self.cparams = ctl.ControllerParams(
            k_i=float(c["k_i"]),
            k_p=float(c["k_p"]),
            alpha=float(c["alpha"]),
            comm_graph=ctl.comm_graph_from_case(tcase, float(c["comm_weight"])),
            load=self.model.load,
            u_limits=np.array(limits),
            tau=float(c["tau"]),
            freq_band=tuple(c["freq_band"]),
        )
        self.ctrl = ctl.ControllerState.initial(self.cparams)
        self.history: list[tuple[float, float]] = []
        self.switch_events: list[ctl.SwitchEvent] = []
        self.t = cfg.t_start
        self.k = 0
        self.last_broadcast = -math.inf
        self._pending = list(cfg.events)
        self.log = TimeSeriesLog(self._columns())

    # -- log layout ----------------------------------------------------------
    def _columns(self) -> list[str]:
        cols = ["t", "f_hz", "phi", "since_broadcast"]
        cols += [f"u_bar_{b}" for b in self.load_ids]
        cols += [f"u_{b}" for b in self.load_ids]
        for bus, sn in self.subnets.items():
            cols += [f"p_real_{sn.name}", f"p_pcc_{sn.name}"]
            cols += [f"v_{sn.name}_{b.id}" for b in sn.case.buses]
            cols += [f"v_nl_{sn.name}_{b}" for b in sn.agg_ids]
            cols += [f"cost_do_{sn.name}", f"cost_pa_{sn.name}"]
        return cols

    def _row(self, f: float) -> list[float]:
        row = [self.t, f, float(self.ctrl.phi), self.t - self.last_broadcast if math.isfinite(self.last_broadcast) else -1.0]
        row += list(self.ctrl.u_bar)
        row += list(self.state.u)
        for bus, sn in self.subnets.items():
            row += [sn.response, sn.p_pcc]
            row += list(sn.V)
            row += list(sn.v_nl)
            row += [sn.cost_do, sn.cost_pa]
        return row

    # -- loop ----------------------------------------------------------------
    def _apply_events(self) -> None:
        eps = 1e-9
        while self._pending and self._pending[0].time <= self.t + eps:
            ev = self._pending.pop(0)
            if ev.network == "transmission":
                k = self.load_ids.index(ev.bus)
                self.p_d0[k] += ev.dp
            else:
                for sn in self.subnets.values():
                    if sn.name == ev.network:
                        sn.apply_event(ev)

    def _transmission_inputs(self) -> tuple[np.ndarray, np.ndarray]:
        p_d = self.p_d0.copy()
        u = np.zeros(len(self.load_ids))
        for k, bus in enumerate(self.load_ids):
            sn = self.subnets.get(bus)
            if sn is not None:
                p_d[k] += sn.p_pcc_free - sn.p_pcc0
                u[k] = sn.response
        return p_d, u

    def step(self) -> None:
        cfg = self.cfg
        dt = cfg.dt
        self._apply_events()
        p_d, u = self._transmission_inputs()
        self.state = replace(self.state, p_d=p_d, u=u)
        self.state = tx.step_swing(self.state, self.model, dt)
        self.k += 1
        self.t = cfg.t_start + self.k * dt
        f = tx.frequency(self.state, self.model)
        self.agc.observe(self.t, f - tx.F_NOMINAL)
        if self.agc.due(self.t):
            self.state = self.agc.update(self.t, self.state, self.model)

        # switching and control
        self.history.append((self.t, f))
        horizon = self.cparams.tau + 2 * dt
        while self.history and self.history[0][0] < self.t - horizon:
            self.history.pop(0)
        mode, phi, events = ctl.switch_logic(self.history, self.cparams, self.t, self.ctrl)
        entering = any(e.kind == "enter_frm" for e in events)
        self.ctrl = ctl.apply_switch(self.ctrl, mode, phi, events)
        self.switch_events += events
        if entering:
            self.ctrl = ctl.reinit(self.ctrl, tx.compute_power_imbalance(self.state, self.model))
        if cfg.load_side_control:
            if self.ctrl.mode is ctl.Mode.FRM:
                self.ctrl = ctl.frm_step(self.ctrl, self.cparams, tx.bus_speed(self.state, self.model), dt)
            else:
                self.ctrl = ctl.lrm_step(self.ctrl, self.cparams, dt)
        else:
            self.ctrl = replace(self.ctrl, u_bar=np.zeros(len(self.load_ids)))

        # broadcasts on a fixed grid
        nb = int(round(cfg.broadcast_period / dt))
        if self.k % nb == 0:
            self.last_broadcast = self.t
            for k, bus in enumerate(self.load_ids):
                sn = self.subnets.get(bus)
                if sn is not None:
                    sn.broadcast(float(self.ctrl.u_bar[k]), cfg.broadcast_period)
        for sn in self.subnets.values():
            sn.step_plant(dt)
            sn.accrue(dt)
        self.log.append(self._row(f))

    def run(self) -> ScenarioResult:
        n_steps = int(round((self.cfg.t_end - self.cfg.t_start) / self.cfg.dt))
        try:
            for _ in range(n_steps):
                self.step()
        except NumericalError as exc:
            raise NumericalError(f"at t={self.t:.2f} s: {exc}") from exc
        return ScenarioResult(self.cfg, self.log, self.costs(), self.switch_events)

    def costs(self) -> dict[str, dict[str, float]]:
        return {sn.name: cost_entry(sn.cost_do, sn.cost_pa) for sn in self.subnets.values()}


def cost_entry(do: float, pa: float) -> dict[str, float]:
    diff = pa - do
    rel = diff / pa if pa > 0 else 0.0
    return {"distributed": do, "proportional": pa, "difference": diff, "relative": rel}


def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    return Simulation(config).run()


def compare_costs(log: TimeSeriesLog) -> dict[str, dict[str, float]]:
    """Integrated cost of both allocation strategies per subnetwork, from a log."""
    out = {}
    for c in log.columns:
        if c.startswith("cost_do_"):
            name = c[len("cost_do_") :]
            do = float(log.column(c)[-1]) if log.rows else 0.0
            pa = float(log.column(f"cost_pa_{name}")[-1]) if log.rows else 0.0
            out[name] = cost_entry(do, pa)
    return out


def write_outputs(result: ScenarioResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "log.csv").write_text(result.log.to_csv())
    (out / "costs.json").write_text(json.dumps(result.costs, indent=2, sort_keys=True) + "\n")
    (out / "config-echo.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n")
