"""Network description, JSON case loading and admittance assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .aggregator import AggregatorParams
from .errors import CaseError, NumericalError

BUS_KINDS = ("pcc", "generator", "load", "aggregator")
_KIND_ALIASES = {"slack": "pcc"}


@dataclass(frozen=True)
class Bus:
    """One network node.

    ``p_nominal``/``q_nominal`` are net injections in p.u. (loads negative).  For
    an aggregator bus they include the aggregator's nominal consumption.
    """

    id: int
    kind: str
    p_nominal: float = 0.0
    q_nominal: float = 0.0
    v_limits: tuple[float, float] = (0.95, 1.05)
    theta_limits_deg: tuple[float, float] = (-15.0, 15.0)


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float = 100.0
    aggregators: Mapping[int, AggregatorParams] = field(default_factory=dict)
    name: str = ""

    @property
    def n(self) -> int:
        return len(self.buses)

    def index(self, bus_id: int) -> int:
        return bus_id - 1

    @property
    def pcc(self) -> int:
        """Zero-based index of the PCC bus."""
        for i, b in enumerate(self.buses):
            if b.kind == "pcc":
                return i
        raise CaseError(f"case {self.name!r} has no PCC bus")

    @property
    def is_subtransmission(self) -> bool:
        return any(b.kind in ("pcc", "aggregator") for b in self.buses)

    def ids_of(self, kind: str) -> list[int]:
        return [b.id for b in self.buses if b.kind == kind]

    def p_injection(self) -> np.ndarray:
        return np.array([b.p_nominal for b in self.buses])

    def q_injection(self) -> np.ndarray:
        return np.array([b.q_nominal for b in self.buses])

    def neighbors(self) -> list[set[int]]:
        """Zero-based adjacency sets."""
        nb: list[set[int]] = [set() for _ in self.buses]
        for ln in self.lines:
            a, b = ln.from_bus - 1, ln.to_bus - 1
            nb[a].add(b)
            nb[b].add(a)
        return nb

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"name": self.name, "base_mva": self.base_mva}
        doc["buses"] = [
            {
                "id": b.id,
                "kind": b.kind,
                "p_nominal": b.p_nominal,
                "q_nominal": b.q_nominal,
                "v_limits": list(b.v_limits),
                "theta_limits_deg": list(b.theta_limits_deg),
            }
            for b in self.buses
        ]
        doc["lines"] = [
            {"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x, "b_shunt": ln.b_shunt}
            for ln in self.lines
        ]
        doc["aggregators"] = [
            {
                "bus": bus,
                "p0": a.p0,
                "q0": a.q0,
                "v0": a.v0,
                "alpha_p": a.alpha_p,
                "alpha_q": a.alpha_q,
                "v_es_d_limits": list(a.v_es_d_limits),
                "v_es_q_limits": list(a.v_es_q_limits),
                "v_nl_limits": list(a.v_nl_limits),
                "h": a.h,
                "g": a.g,
            }
            for bus, a in sorted(self.aggregators.items())
        ]
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def with_injections(self, p: np.ndarray, q: np.ndarray) -> "NetworkCase":
        buses = tuple(
            Bus(b.id, b.kind, float(pi), float(qi), b.v_limits, b.theta_limits_deg)
            for b, pi, qi in zip(self.buses, p, q)
        )
        return NetworkCase(buses, self.lines, self.base_mva, self.aggregators, self.name)


# ---------------------------------------------------------------------------
# loading


def _pair(value, where: str, problems: list[str]) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        problems.append(f"{where}: expected a [lo, hi] pair, got {value!r}")
        return (0.0, 0.0)
    return (lo, hi)


def _num(obj: Mapping, key: str, where: str, problems: list[str], default=None) -> float:
    if key not in obj:
        if default is not None:
            return default
        problems.append(f"{where}: missing field {key!r}")
        return 0.0
    try:
        return float(obj[key])
    except (TypeError, ValueError):
        problems.append(f"{where}: field {key!r} is not a number ({obj[key]!r})")
        return 0.0


def case_from_dict(doc: Mapping[str, Any], name: str = "") -> NetworkCase:
    problems: list[str] = []
    if not isinstance(doc, Mapping):
        raise CaseError("case document must be a JSON object")
    base = _num(doc, "base_mva", "case", problems, default=100.0)
    raw_buses = doc.get("buses")
    if not isinstance(raw_buses, list) or not raw_buses:
        raise CaseError("case document has no buses")

    buses: list[Bus] = []
    seen: set[int] = set()
    for k, rb in enumerate(raw_buses):
        where = f"buses[{k}]"
        if not isinstance(rb, Mapping) or "id" not in rb:
            problems.append(f"{where}: missing field 'id'")
            continue
        bid = rb["id"]
        if not isinstance(bid, int) or isinstance(bid, bool):
            problems.append(f"{where}: bus id must be an integer, got {bid!r}")
            continue
        if bid in seen:
            problems.append(f"{where}: duplicate bus id {bid}")
            continue
        seen.add(bid)
        kind = _KIND_ALIASES.get(rb.get("kind", "load"), rb.get("kind", "load"))
        if kind not in BUS_KINDS:
            problems.append(f"{where}: unknown kind {rb.get('kind')!r}")
        vl = _pair(rb.get("v_limits", (0.95, 1.05)), f"{where}.v_limits", problems)
        tl = _pair(rb.get("theta_limits_deg", (-15.0, 15.0)), f"{where}.theta_limits_deg", problems)
        buses.append(
            Bus(
                bid,
                kind,
                _num(rb, "p_nominal", where, problems, default=0.0),
                _num(rb, "q_nominal", where, problems, default=0.0),
                vl,
                tl,
            )
        )
    if problems:
        raise CaseError(f"cannot parse case {name!r}", problems)
    buses.sort(key=lambda b: b.id)

    lines: list[Line] = []
    for k, rl in enumerate(doc.get("lines") or []):
        where = f"lines[{k}]"
        if not isinstance(rl, Mapping):
            problems.append(f"{where}: not an object")
            continue
        fb, tb = rl.get("from"), rl.get("to")
        if not isinstance(fb, int) or not isinstance(tb, int):
            problems.append(f"{where}: 'from'/'to' must be integer bus ids")
            continue
        lines.append(
            Line(fb, tb, _num(rl, "r", where, problems, 0.0), _num(rl, "x", where, problems),
                 _num(rl, "b_shunt", where, problems, 0.0))
        )

    aggs: dict[int, AggregatorParams] = {}
    for k, ra in enumerate(doc.get("aggregators") or []):
        where = f"aggregators[{k}]"
        if not isinstance(ra, Mapping) or not isinstance(ra.get("bus"), int):
            problems.append(f"{where}: missing integer field 'bus'")
            continue
        try:
            aggs[ra["bus"]] = AggregatorParams(
                p0=_num(ra, "p0", where, problems),
                q0=_num(ra, "q0", where, problems),
                alpha_p=_num(ra, "alpha_p", where, problems),
                alpha_q=_num(ra, "alpha_q", where, problems),
                v0=_num(ra, "v0", where, problems, 1.0),
                v_nl_limits=_pair(ra.get("v_nl_limits", (0.6, 1.4)), f"{where}.v_nl_limits", problems),
                v_es_d_limits=_pair(ra.get("v_es_d_limits", (-0.7, 0.7)), f"{where}.v_es_d_limits", problems),
                v_es_q_limits=_pair(ra.get("v_es_q_limits", (-0.7, 0.7)), f"{where}.v_es_q_limits", problems),
                h=_num(ra, "h", where, problems, 100.0),
                g=_num(ra, "g", where, problems, 40.0),
            )
        except CaseError as exc:
            problems.extend(f"{where}: {p}" for p in exc.problems)
    if problems:
        raise CaseError(f"cannot parse case {name!r}", problems)

    case = NetworkCase(tuple(buses), tuple(lines), base, aggs, name or str(doc.get("name", "")))
    validate_case(case)
    return case


def validate_case(case: NetworkCase) -> None:
    """Raise :class:`CaseError` listing every violated invariant."""
    problems: list[str] = []
    ids = [b.id for b in case.buses]
    if ids != list(range(1, len(ids) + 1)):
        problems.append(f"bus ids must be contiguous from 1, got {ids}")
    for b in case.buses:
        if b.v_limits[0] > b.v_limits[1]:
            problems.append(f"bus {b.id}: v_limits out of order {b.v_limits}")
        if b.theta_limits_deg[0] > b.theta_limits_deg[1]:
            problems.append(f"bus {b.id}: theta_limits_deg out of order {b.theta_limits_deg}")
    n = len(ids)
    if not case.lines:
        problems.append("network is disconnected / no lines")
    for k, ln in enumerate(case.lines):
        tag = f"line {k} ({ln.from_bus}-{ln.to_bus})"
        if ln.from_bus == ln.to_bus:
            problems.append(f"{tag}: from == to")
        if not (1 <= ln.from_bus <= n and 1 <= ln.to_bus <= n):
            problems.append(f"{tag}: references an unknown bus")
        if not ln.x > 0:
            problems.append(f"{tag}: reactance must be > 0 (got {ln.x})")
        if ln.r < 0:
            problems.append(f"{tag}: resistance must be >= 0 (got {ln.r})")
    if case.lines and not problems and not _connected(n, case.lines):
        problems.append("network is disconnected")
    n_pcc = sum(b.kind == "pcc" for b in case.buses)
    if case.aggregators or n_pcc:
        if n_pcc != 1:
            problems.append(f"subtransmission case needs exactly one PCC bus, found {n_pcc}")
    for bus_id in case.aggregators:
        if not 1 <= bus_id <= n:
            problems.append(f"aggregator at unknown bus {bus_id}")
        elif case.buses[bus_id - 1].kind != "aggregator":
            problems.append(f"aggregator at bus {bus_id} whose kind is {case.buses[bus_id - 1].kind!r}")
    for b in case.buses:
        if b.kind == "aggregator" and b.id not in case.aggregators:
            problems.append(f"bus {b.id} is kind 'aggregator' but has no aggregator parameters")
    if problems:
        raise CaseError(f"case {case.name!r} violates invariants", problems)


def _connected(n: int, lines) -> bool:
    nb: list[list[int]] = [[] for _ in range(n)]
    for ln in lines:
        nb[ln.from_bus - 1].append(ln.to_bus - 1)
        nb[ln.to_bus - 1].append(ln.from_bus - 1)
    seen = {0}
    stack = [0]
    while stack:
        for j in nb[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


def load_case(text: str, name: str = "") -> NetworkCase:
    """Parse a JSON case document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"case {name!r} is not valid JSON: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return case_from_dict(doc, name)


BUNDLED_CASES = ("case9", "feeder7", "case15", "case14")


def bundled_case(name: str) -> NetworkCase:
    """Load one of the networks shipped with the package."""
    try:
        text = resources.files("esgrid.cases").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise CaseError(f"no bundled case named {name!r}; available: {', '.join(BUNDLED_CASES)}") from None
    return load_case(text, name)


def read_case(path_or_name: str) -> NetworkCase:
    p = Path(path_or_name)
    if p.suffix == ".json" or p.exists():
        return load_case(p.read_text(), p.stem)
    return bundled_case(path_or_name)


# ---------------------------------------------------------------------------
# admittance


@dataclass(frozen=True)
class AdmittanceTriple:
    G: np.ndarray
    B: np.ndarray
    B_prime: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B


def build_admittance(case: NetworkCase) -> AdmittanceTriple:
    """Dense bus admittance split into G, B and the shunt-free B'."""
    n = case.n
    Y = np.zeros((n, n), dtype=complex)
    Yp = np.zeros((n, n), dtype=complex)
    for ln in case.lines:
        z = complex(ln.r, ln.x)
        if z == 0:
            raise NumericalError(f"line {ln.from_bus}-{ln.to_bus} has zero impedance")
        y = 1.0 / z
        i, j = ln.from_bus - 1, ln.to_bus - 1
        for M in (Y, Yp):
            M[i, j] -= y
            M[j, i] -= y
            M[i, i] += y
            M[j, j] += y
        Y[i, i] += 0.5j * ln.b_shunt
        Y[j, j] += 0.5j * ln.b_shunt
    return AdmittanceTriple(Y.real.copy(), Y.imag.copy(), Yp.imag.copy())
