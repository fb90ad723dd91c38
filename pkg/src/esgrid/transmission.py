"""Structure-preserving transmission dynamics with governor, reheat turbine and AGC.

Generator buses follow the swing equation; load buses carry a first-order
frequency-dependent aggregate load

    D_i * ddelta_i/dt = u_i - sum_j b_ij sin(delta_i - delta_j) - P_D_i

with ``b_ij = |V_i||V_j| / x_ij`` (flat voltages, lossless lines).  Speeds are
deviations in rad/s from synchronous speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import DomainError, NumericalError
from .grid import NetworkCase

F_NOMINAL = 60.0
OMEGA_S = 2 * math.pi * F_NOMINAL
MAX_DT = 0.05


@dataclass(frozen=True)
class GeneratorParams:
    """One synchronous machine with a droop governor and a reheat steam turbine.

    ``rating`` is on the system base; ``droop`` is the speed regulation R on the
    machine rating, so the droop gain is ``rating / (droop * OMEGA_S)`` p.u. per
    rad/s.  ``agc_gain`` is the integral gain in p.u. per Hz·s.
    """

    bus: int
    M: float
    D: float
    rating: float = 1.0
    droop: float = 0.05
    t_gov: float = 0.2
    t_ch: float = 0.3
    t_rh: float = 7.0
    f_hp: float = 0.3
    agc_participation: bool = False
    agc_gain: float = 0.0

    def __post_init__(self):
        problems = []
        if not self.M > 0:
            problems.append(f"M must be > 0 (got {self.M})")
        if not self.D >= 0:
            problems.append(f"D must be >= 0 (got {self.D})")
        for name in ("t_gov", "t_ch", "t_rh", "droop", "rating"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0 (got {getattr(self, name)})")
        if not 0 <= self.f_hp <= 1:
            problems.append(f"f_hp must lie in [0, 1] (got {self.f_hp})")
        if problems:
            raise DomainError(f"generator at bus {self.bus}: " + "; ".join(problems))

    @property
    def droop_gain(self) -> float:
        return self.rating / (self.droop * OMEGA_S)

    @classmethod
    def from_inertia(cls, bus: int, H: float, rating: float, **kw) -> "GeneratorParams":
        """Build from the inertia constant ``H`` (s) on the machine rating."""
        M = 2.0 * H * rating / OMEGA_S
        D = kw.pop("D", rating / OMEGA_S)
        return cls(bus=bus, M=M, D=D, rating=rating, **kw)


def default_generators() -> list[GeneratorParams]:
    """Machine data for the bundled 9-bus network (typical steam-unit values)."""
    return [
        GeneratorParams.from_inertia(1, H=5.0, rating=2.5, agc_participation=True, agc_gain=0.2),
        GeneratorParams.from_inertia(2, H=5.0, rating=3.0, agc_participation=True, agc_gain=0.2),
        GeneratorParams.from_inertia(3, H=5.0, rating=2.7),
    ]


@dataclass(frozen=True)
class TransmissionModel:
    """Static data of the transmission layer in array form."""

    b: np.ndarray
    gen: np.ndarray
    load: np.ndarray
    generators: tuple[GeneratorParams, ...]
    d_load: np.ndarray
    bus_ids: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.b.shape[0]

    @property
    def M(self) -> np.ndarray:
        return np.array([g.M for g in self.generators])

    def gen_arrays(self):
        g = self.generators
        return (
            np.array([x.M for x in g]),
            np.array([x.D for x in g]),
            np.array([x.droop_gain for x in g]),
            np.array([x.t_gov for x in g]),
            np.array([x.t_ch for x in g]),
            np.array([x.t_rh for x in g]),
            np.array([x.f_hp for x in g]),
        )

    def max_stable_substep(self) -> float:
        # RK4 real-axis stability limit ~2.78; keep a margin on the stiffest load bus
        rate = 0.0
        for c, i in enumerate(self.load):
            rate = max(rate, self.b[i].sum() / self.d_load[c])
        return 2.0 / rate if rate > 0 else MAX_DT


def build_model(
    case: NetworkCase,
    generators: list[GeneratorParams] | None = None,
    d_load: float | dict[int, float] = 0.02,
    voltages: np.ndarray | None = None,
) -> TransmissionModel:
    """Assemble the swing-model arrays for a transmission case."""
    if generators is None:
        generators = default_generators()
    V = np.ones(case.n) if voltages is None else np.asarray(voltages, dtype=float)
    b = np.zeros((case.n, case.n))
    for ln in case.lines:
        i, j = case.index(ln.from_bus), case.index(ln.to_bus)
        val = V[i] * V[j] / ln.x
        b[i, j] += val
        b[j, i] += val
    gen_ids = case.ids_of("generator")
    by_bus = {g.bus: g for g in generators}
    if set(by_bus) != set(gen_ids):
        raise DomainError(f"generator parameters given for buses {sorted(by_bus)}, case has generators {gen_ids}")
    load_ids = [b_.id for b_ in case.buses if b_.kind != "generator"]
    if isinstance(d_load, dict):
        dl = np.array([float(d_load.get(i, 0.0)) for i in load_ids])
    else:
        dl = np.full(len(load_ids), float(d_load))
    if np.any(dl <= 0):
        bad = [i for i, d in zip(load_ids, dl) if d <= 0]
        raise NumericalError(f"load-bus frequency coefficient must be positive (buses {bad}); dynamics are singular")
    return TransmissionModel(
        b=b,
        gen=np.array([case.index(i) for i in gen_ids], dtype=np.int64),
        load=np.array([case.index(i) for i in load_ids], dtype=np.int64),
        generators=tuple(by_bus[i] for i in gen_ids),
        d_load=dl,
        bus_ids=tuple(b_.id for b_ in case.buses),
    )


@dataclass(frozen=True)
class TransmissionState:
    """Dynamic state.  Generator arrays follow ``model.gen``, load arrays ``model.load``."""

    delta: np.ndarray
    omega: np.ndarray
    p_v: np.ndarray
    p_hp: np.ndarray
    p_rh: np.ndarray
    p_ref: np.ndarray
    u: np.ndarray
    p_d: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.delta, self.omega, self.p_v, self.p_hp, self.p_rh])

    def unpack(self, s: np.ndarray) -> "TransmissionState":
        n = len(self.delta)
        ng = len(self.omega)
        return replace(
            self,
            delta=s[:n].copy(),
            omega=s[n : n + ng].copy(),
            p_v=s[n + ng : n + 2 * ng].copy(),
            p_hp=s[n + 2 * ng : n + 3 * ng].copy(),
            p_rh=s[n + 3 * ng :].copy(),
        )


def mechanical_power(state: TransmissionState, model: TransmissionModel) -> np.ndarray:
    f_hp = np.array([g.f_hp for g in model.generators])
    return f_hp * state.p_hp + (1.0 - f_hp) * state.p_rh


def line_flows(delta: np.ndarray, model: TransmissionModel) -> np.ndarray:
    """Net active power leaving each bus over the lines."""
    return (model.b * np.sin(delta[:, None] - delta[None, :])).sum(axis=1)


def compute_power_imbalance(state: TransmissionState, model: TransmissionModel) -> np.ndarray:
    """Per-bus imbalance: mechanical power or controllable load minus demand minus outflow."""
    flow = line_flows(state.delta, model)
    d = np.empty(model.n)
    d[model.gen] = mechanical_power(state, model) - flow[model.gen]
    d[model.load] = state.u - flow[model.load] - state.p_d
    return d


def bus_speed(state: TransmissionState, model: TransmissionModel) -> np.ndarray:
    """Per-bus speed deviation (rad/s): rotor speed at generators, ddelta/dt at loads."""
    out = np.empty(model.n)
    out[model.gen] = state.omega
    flow = line_flows(state.delta, model)
    out[model.load] = (state.u - flow[model.load] - state.p_d) / model.d_load
    return out


def coi_speed(state: TransmissionState, model: TransmissionModel) -> float:
    M = model.M
    return float(M @ state.omega / M.sum())


def frequency(state: TransmissionState, model: TransmissionModel, f_s: float = F_NOMINAL) -> float:
    """System frequency in Hz from the centre-of-inertia speed."""
    return f_s + coi_speed(state, model) / (2 * math.pi)


def _substeps(model: TransmissionModel, dt: float) -> tuple[float, int]:
    n_sub = max(1, math.ceil(dt / model.max_stable_substep() - 1e-12))
    return dt / n_sub, n_sub


def step_swing(state: TransmissionState, model: TransmissionModel, dt: float, use_numba: bool | None = None) -> TransmissionState:
    """Advance the swing, governor and turbine states by ``dt`` with classical RK4.

    ``u``, ``p_d`` and ``p_ref`` are held over the step.  The step is split into
    equal substeps small enough for RK4 stability on the stiff load buses.
    """
    if not 0 < dt <= MAX_DT:
        raise DomainError(f"dt must lie in (0, {MAX_DT}] s (got {dt})")
    M, Dg, droop, t_g, t_ch, t_rh, f_hp = model.gen_arrays()
    h, n_sub = _substeps(model, dt)
    s = kernels.swing_run(
        state.pack(), model.b, model.gen, model.load, M, Dg, model.d_load,
        np.asarray(state.u, dtype=float), np.asarray(state.p_d, dtype=float), state.p_ref,
        droop, t_g, t_ch, t_rh, f_hp, h, n_sub, use_numba=use_numba,
    )
    if not np.all(np.isfinite(s)):
        raise NumericalError("transmission dynamics produced non-finite values")
    return state.unpack(s)


def governor_turbine_step(
    gen: GeneratorParams,
    states: tuple[float, float, float],
    omega_dev: float,
    agc_signal: float,
    dt: float,
    p_ref: float = 0.0,
) -> tuple[tuple[float, float, float], float]:
    """RK4 step of one governor/turbine cascade with frozen speed deviation.

    ``states`` is ``(p_v, p_hp, p_rh)``.  The AGC signal shifts the governor
    reference only on participating units.  Returns the new states and P_m.
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive (got {dt})")
    ref = p_ref + (agc_signal if gen.agc_participation else 0.0)

    def rhs(x):
        pv, php, prh = x
        return np.array([
            (ref - gen.droop_gain * omega_dev - pv) / gen.t_gov,
            (pv - php) / gen.t_ch,
            (php - prh) / gen.t_rh,
        ])

    x = np.array(states, dtype=float)
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    pm = gen.f_hp * x[1] + (1 - gen.f_hp) * x[2]
    return (float(x[0]), float(x[1]), float(x[2])), float(pm)


def equilibrium(
    model: TransmissionModel,
    p_gen: np.ndarray,
    p_d: np.ndarray,
    u: np.ndarray | None = None,
    slack: int = 0,
) -> tuple[TransmissionState, np.ndarray]:
    """Steady state with zero speed for the given demand.

    ``p_gen`` gives the scheduled generator outputs; the generator at position
    ``slack`` in ``model.gen`` absorbs the balance.  Returns the state and the
    balanced generator outputs.
    """
    ng = len(model.gen)
    u = np.zeros(len(model.load)) if u is None else np.asarray(u, dtype=float)
    p_gen = np.array(p_gen, dtype=float)
    p_gen[slack] = p_d.sum() - u.sum() - (p_gen.sum() - p_gen[slack])
    inj = np.zeros(model.n)
    inj[model.gen] = p_gen
    inj[model.load] = u - p_d
    ref = model.gen[slack]
    others = np.array([i for i in range(model.n) if i != ref])

    # DC guess, then Newton on the sine flows
    Bdc = np.diag(model.b.sum(1)) - model.b
    th = np.linalg.solve(Bdc[np.ix_(others, others)], inj[others])
    d = np.zeros(model.n)
    for _ in range(50):
        d[others] = th
        res = (line_flows(d, model) - inj)[others]
        if np.max(np.abs(res)) < 1e-13:
            break
        c = model.b * np.cos(d[:, None] - d[None, :])
        J = np.diag(c.sum(1)) - c
        th = th - np.linalg.solve(J[np.ix_(others, others)], res)
    else:
        raise NumericalError("no transmission equilibrium for the given dispatch (Newton did not converge)")
    sol = th
    delta = np.zeros(model.n)
    delta[others] = sol
    zeros = np.zeros(ng)
    state = TransmissionState(
        delta=delta, omega=zeros.copy(), p_v=p_gen.copy(), p_hp=p_gen.copy(), p_rh=p_gen.copy(),
        p_ref=p_gen.copy(), u=u.copy(), p_d=np.asarray(p_d, dtype=float).copy(),
    )
    return state, p_gen


@dataclass
class AGC:
    """Discrete integral AGC on the averaged frequency deviation.

    Every ``period`` seconds each participating unit moves its governor
    reference by ``-agc_gain * mean(delta_f) * period``.
    """

    period: float = 2.0
    _acc: float = 0.0
    _count: int = 0
    _next: float | None = None

    def observe(self, t: float, f_dev_hz: float) -> None:
        if self._next is None:
            self._next = t + self.period
        self._acc += f_dev_hz
        self._count += 1

    def due(self, t: float) -> bool:
        return self._next is not None and t >= self._next - 1e-9

    def update(self, t: float, state: TransmissionState, model: TransmissionModel) -> TransmissionState:
        mean_dev = self._acc / max(self._count, 1)
        self._acc, self._count = 0.0, 0
        self._next += self.period
        p_ref = state.p_ref.copy()
        for a, g in enumerate(model.generators):
            if g.agc_participation:
                p_ref[a] -= g.agc_gain * mean_dev * self.period
        return replace(state, p_ref=p_ref)
