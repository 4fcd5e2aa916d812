"""Case data, the devices/terminals/nets network model and N-1 scenarios.

All quantities in a :class:`CaseSpec` are kept in MW exactly as they appear
in the case document. Conversion to per-unit happens in :func:`build_network`.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class CaseError(ValueError):
    """Base class for malformed or inconsistent case data."""


class CaseParseError(CaseError):
    pass


class CaseValidationError(CaseError):
    pass


class NetworkBuildError(CaseError):
    pass


class IslandingError(CaseError):
    def __init__(self, line_id):
        super().__init__(f"outage of line {line_id} islands the network")
        self.line_id = line_id


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    A: float  # $/MW^2h
    B: float  # $/MWh
    C: float  # $/h
    p_max: float
    p_min: float
    r_up: float  # MW per interval
    r_down: float  # MW per interval, usually -r_up
    sched_mw: float  # dispatch of the running interval

    def cost(self, p_mw):
        return self.A * p_mw**2 + self.B * p_mw + self.C


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float
    flow_limit: float  # MW


@dataclass(frozen=True)
class CaseSpec:
    base_mva: float
    buses: tuple[int, ...]
    generators: tuple[Generator, ...]
    lines: tuple[Line, ...]
    loads: dict[int, float]
    forecast: tuple[dict[int, float], ...]
    horizon: int
    contingency_lines: tuple[int, ...] = ()
    name: str = "case"
    emergency_factor: float = 1.0  # post-contingency rating = factor * flow_limit

    @property
    def load_buses(self) -> tuple[int, ...]:
        return tuple(sorted(self.loads))

    def line(self, line_id: int) -> Line:
        for ln in self.lines:
            if ln.id == line_id:
                return ln
        raise KeyError(line_id)

    def total_cost(self, dispatch_mw) -> float:
        """Generation cost summed over generators (rows) and intervals (columns)."""
        d = np.asarray(dispatch_mw, dtype=float).reshape(len(self.generators), -1)
        return float(sum(g.cost(d[i]).sum() for i, g in enumerate(self.generators)))


# ---------------------------------------------------------------------------
# parsing / serialization

_GEN_FIELDS = ("bus", "A", "B", "C", "p_max", "p_min", "r_up", "r_down", "sched_mw")
_LINE_FIELDS = ("from_bus", "to_bus", "resistance", "reactance", "flow_limit")


def _number(rec, key, where):
    if key not in rec:
        raise CaseParseError(f"{where}: missing field '{key}'")
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise CaseParseError(f"{where}: field '{key}' is not a number ({val!r})")
    return float(val)


def _bus_table(obj, where):
    if isinstance(obj, dict):
        try:
            return {int(k): float(v) for k, v in obj.items()}
        except (TypeError, ValueError) as exc:
            raise CaseParseError(f"{where}: bad bus table ({exc})") from None
    if isinstance(obj, list):
        out = {}
        for i, rec in enumerate(obj):
            if not isinstance(rec, dict) or "bus" not in rec or "mw" not in rec:
                raise CaseParseError(f"{where}[{i}]: expected {{'bus', 'mw'}} record")
            out[int(rec["bus"])] = float(rec["mw"])
        return out
    raise CaseParseError(f"{where}: expected an object or list of records")


def case_from_dict(doc: dict, name: str = "case") -> CaseSpec:
    if not isinstance(doc, dict):
        raise CaseParseError("case document must be a JSON object")
    base_mva = float(doc.get("base_mva", 100.0))
    if "buses" not in doc:
        raise CaseParseError("missing top-level key 'buses'")
    buses = tuple(int(b) for b in doc["buses"])

    gens = []
    for i, rec in enumerate(doc.get("generators", [])):
        where = f"generators[{i}]"
        if not isinstance(rec, dict):
            raise CaseParseError(f"{where}: expected an object")
        vals = {k: _number(rec, k, where) for k in _GEN_FIELDS if k != "r_down"}
        r_down = _number(rec, "r_down", where) if "r_down" in rec else -vals["r_up"]
        gens.append(
            Generator(
                id=int(rec.get("id", i + 1)),
                bus=int(vals["bus"]),
                A=vals["A"],
                B=vals["B"],
                C=vals["C"],
                p_max=vals["p_max"],
                p_min=vals["p_min"],
                r_up=vals["r_up"],
                r_down=r_down,
                sched_mw=vals["sched_mw"],
            )
        )

    lines = []
    for i, rec in enumerate(doc.get("lines", [])):
        where = f"lines[{i}]"
        if not isinstance(rec, dict):
            raise CaseParseError(f"{where}: expected an object")
        vals = {k: _number(rec, k, where) for k in _LINE_FIELDS if k != "resistance"}
        lines.append(
            Line(
                id=int(rec.get("id", i + 1)),
                from_bus=int(vals["from_bus"]),
                to_bus=int(vals["to_bus"]),
                resistance=float(rec.get("resistance", 0.0)),
                reactance=vals["reactance"],
                flow_limit=vals["flow_limit"],
            )
        )

    loads = _bus_table(doc.get("loads", {}), "loads")
    if "forecast" in doc:
        fc = doc["forecast"]
        if not isinstance(fc, list):
            raise CaseParseError("forecast: expected a list of per-interval bus tables")
        forecast = tuple(_bus_table(row, f"forecast[{k}]") for k, row in enumerate(fc))
    else:
        forecast = (dict(loads),)
    horizon = int(doc.get("horizon", len(forecast)))

    cont = doc.get("contingencies", [])
    if cont == "all":
        contingency = tuple(ln.id for ln in lines)
    elif isinstance(cont, list):
        contingency = tuple(int(c) for c in cont)
    else:
        raise CaseParseError("contingencies: expected a list of line ids or 'all'")

    case = CaseSpec(
        base_mva=base_mva,
        buses=buses,
        generators=tuple(gens),
        lines=tuple(lines),
        loads=loads,
        forecast=forecast,
        horizon=horizon,
        contingency_lines=contingency,
        name=str(doc.get("name", name)),
        emergency_factor=float(doc.get("emergency_factor", 1.0)),
    )
    validate_case(case)
    return case


def parse_case_file(text: str, name: str = "case") -> CaseSpec:
    """Parse the native JSON case document (or a MATPOWER-style ``.m`` subset)."""
    if re.search(r"mpc\.\w+\s*=", text):
        return parse_matpower(text, name=name)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return case_from_dict(doc, name=name)


def load_case(path) -> CaseSpec:
    from pathlib import Path

    p = Path(path)
    return parse_case_file(p.read_text(), name=p.stem)


def case_to_dict(case: CaseSpec) -> dict:
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": list(case.buses),
        "generators": [
            {"id": g.id, **{k: getattr(g, k) for k in _GEN_FIELDS}} for g in case.generators
        ],
        "lines": [
            {"id": ln.id, **{k: getattr(ln, k) for k in _LINE_FIELDS}} for ln in case.lines
        ],
        "loads": {str(b): v for b, v in sorted(case.loads.items())},
        "forecast": [{str(b): v for b, v in sorted(row.items())} for row in case.forecast],
        "horizon": case.horizon,
        "contingencies": list(case.contingency_lines),
        "emergency_factor": case.emergency_factor,
    }


def serialize_case(case: CaseSpec) -> str:
    return json.dumps(case_to_dict(case), indent=2)


def validate_case(case: CaseSpec) -> None:
    if not case.generators:
        raise CaseValidationError("no generators")
    if case.base_mva <= 0:
        raise CaseValidationError("base_mva must be positive")
    if len(set(case.buses)) != len(case.buses):
        raise CaseValidationError("duplicate bus ids")
    known = set(case.buses)
    for g in case.generators:
        if g.bus not in known:
            raise CaseValidationError(f"generator {g.id}: unknown bus {g.bus}")
        if g.p_min > g.p_max:
            raise CaseValidationError(f"generator {g.id}: p_min > p_max")
        if not g.p_min <= g.sched_mw <= g.p_max:
            raise CaseValidationError(f"generator {g.id}: sched_mw outside [p_min, p_max]")
        if g.r_down > 0 or g.r_up < 0:
            raise CaseValidationError(f"generator {g.id}: ramp limits must satisfy r_down <= 0 <= r_up")
        if g.A < 0:
            raise CaseValidationError(f"generator {g.id}: negative quadratic cost")
    ids = [ln.id for ln in case.lines]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate line ids")
    for ln in case.lines:
        if not ln.reactance > 0:
            raise CaseValidationError(f"line {ln.id}: reactance must be positive")
        if not ln.flow_limit > 0:
            raise CaseValidationError(f"line {ln.id}: flow_limit must be positive")
    for b in case.loads:
        if b not in known:
            raise CaseValidationError(f"load at unknown bus {b}")
    if not case.emergency_factor >= 1.0:
        raise CaseValidationError("emergency_factor must be >= 1")
    if case.horizon < 1:
        raise CaseValidationError("horizon must be at least 1")
    if len(case.forecast) < case.horizon:
        raise CaseValidationError(
            f"forecast has {len(case.forecast)} intervals, horizon is {case.horizon}"
        )
    for k, row in enumerate(case.forecast[: case.horizon]):
        missing = set(case.loads) - set(row)
        if missing:
            raise CaseValidationError(f"forecast interval {k + 1}: no entry for load bus {min(missing)}")
        extra = set(row) - set(case.loads)
        if extra:
            raise CaseValidationError(f"forecast interval {k + 1}: bus {min(extra)} has no load")
    for c in case.contingency_lines:
        if c not in ids:
            raise CaseValidationError(f"contingency references unknown line {c}")


def forecast_at(case: CaseSpec, interval: int) -> dict[int, float]:
    """Load row (MW per load bus) of look-ahead interval ``interval`` (1-based)."""
    if not 1 <= interval <= case.horizon:
        raise ValueError(f"interval {interval} outside 1..{case.horizon}")
    return dict(case.forecast[interval - 1])


# ---------------------------------------------------------------------------
# MATPOWER subset

def _matpower_matrix(text, key):
    m = re.search(r"mpc\.%s\s*=\s*\[(.*?)\]\s*;" % key, text, re.S)
    if m is None:
        return None
    rows = []
    for raw in m.group(1).splitlines():
        raw = raw.split("%")[0].strip().rstrip(";").strip()
        if not raw:
            continue
        for chunk in raw.split(";"):
            chunk = chunk.strip()
            if chunk:
                rows.append([float(x) for x in chunk.replace(",", " ").split()])
    return rows


def parse_matpower(
    text: str,
    name: str = "case",
    forecast: Sequence[dict[int, float]] | None = None,
    ramp_fraction: float = 1.0,
    default_limit: float = 9999.0,
) -> CaseSpec:
    """Read bus/gen/branch/gencost tables of a MATPOWER case.

    Ramp limits are not part of the format; they default to
    ``ramp_fraction * p_max``. Branches with ``rateA == 0`` get ``default_limit``.
    """
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)", text)
    base = float(m.group(1)) if m else 100.0
    bus = _matpower_matrix(text, "bus")
    gen = _matpower_matrix(text, "gen")
    branch = _matpower_matrix(text, "branch")
    gencost = _matpower_matrix(text, "gencost")
    if bus is None or gen is None or branch is None:
        raise CaseParseError("MATPOWER text lacks one of mpc.bus / mpc.gen / mpc.branch")
    buses = tuple(int(r[0]) for r in bus)
    loads = {int(r[0]): r[2] for r in bus if r[2] != 0.0}
    gens = []
    for i, r in enumerate(gen):
        if len(r) > 7 and r[7] <= 0:
            continue  # out of service
        if gencost is not None and i < len(gencost) and int(gencost[i][0]) == 2:
            coeffs = gencost[i][4:]
            coeffs = [0.0] * (3 - len(coeffs)) + list(coeffs[-3:])
            a, b, c = coeffs
        else:
            a, b, c = 0.0, 0.0, 0.0
        pmax, pmin = r[8], r[9]
        sched = min(max(r[1], pmin), pmax)
        ramp = ramp_fraction * max(pmax, 1e-9)
        gens.append(Generator(i + 1, int(r[0]), a, b, c, pmax, pmin, ramp, -ramp, sched))
    lines = []
    for i, r in enumerate(branch):
        if len(r) > 10 and r[10] <= 0:
            continue
        limit = r[5] if r[5] > 0 else default_limit
        lines.append(Line(i + 1, int(r[0]), int(r[1]), r[2], r[3], limit))
    fc = tuple(forecast) if forecast is not None else (dict(loads),)
    case = CaseSpec(base, buses, tuple(gens), tuple(lines), loads, fc, len(fc), (), name)
    validate_case(case)
    return case


# ---------------------------------------------------------------------------
# devices / terminals / nets

GEN, LINE, LOAD = "generator", "line", "load"
_KIND_ORDER = {GEN: 0, LINE: 1, LOAD: 2}


@dataclass(frozen=True)
class Terminal:
    device: int  # index into DtnNetwork.devices
    slot: int
    net: int


@dataclass(frozen=True)
class Device:
    kind: str
    id: int
    terminals: tuple[int, ...]


@dataclass(frozen=True)
class DtnNetwork:
    """Devices, terminals and nets of one case, in per-unit.

    ``term_net[t]`` is the incidence map (one net per terminal). Generator,
    line and load terminal indices are kept as arrays so device prox
    evaluations can be vectorized over a device class.
    """

    case: CaseSpec
    base_mva: float
    net_bus: tuple[int, ...]
    devices: tuple[Device, ...]
    terminals: tuple[Terminal, ...]
    term_net: np.ndarray
    gen_term: np.ndarray
    line_from_term: np.ndarray
    line_to_term: np.ndarray
    load_term: np.ndarray
    line_reactance: np.ndarray  # pu
    line_limit: np.ndarray  # pu
    line_from_net: np.ndarray
    line_to_net: np.ndarray
    gen_net: np.ndarray
    load_net: np.ndarray
    load_bus: tuple[int, ...]
    net_size: np.ndarray = field(repr=False)

    @property
    def n_terminals(self) -> int:
        return len(self.terminals)

    @property
    def n_nets(self) -> int:
        return len(self.net_bus)

    @property
    def n_gens(self) -> int:
        return len(self.gen_term)

    @property
    def n_lines(self) -> int:
        return len(self.line_from_term)

    def incidence(self) -> np.ndarray:
        """Dense terminal-to-net incidence matrix."""
        a = np.zeros((self.n_terminals, self.n_nets))
        a[np.arange(self.n_terminals), self.term_net] = 1.0
        return a

    def neighbors(self) -> dict[int, tuple[int, ...]]:
        nb: dict[int, set[int]] = {i: set() for i in range(self.n_nets)}
        for f, t in zip(self.line_from_net, self.line_to_net):
            nb[int(f)].add(int(t))
            nb[int(t)].add(int(f))
        return {i: tuple(sorted(s)) for i, s in nb.items()}

    def to_pu(self, mw):
        return np.asarray(mw, dtype=float) / self.base_mva

    def load_vector(self, interval: int) -> np.ndarray:
        """Per-load-device MW of one interval, in load-device order."""
        row = forecast_at(self.case, interval)
        return np.array([row[b] for b in self.load_bus], dtype=float)


def build_network(case: CaseSpec) -> DtnNetwork:
    bus_index = {b: i for i, b in enumerate(case.buses)}

    def net_of(bus, what):
        try:
            return bus_index[bus]
        except KeyError:
            raise NetworkBuildError(f"{what} references unknown bus {bus}") from None

    specs = []  # (kind, id, [bus per slot])
    for g in case.generators:
        specs.append((GEN, g.id, [net_of(g.bus, f"generator {g.id}")]))
    for ln in case.lines:
        specs.append(
            (LINE, ln.id, [net_of(ln.from_bus, f"line {ln.id}"), net_of(ln.to_bus, f"line {ln.id}")])
        )
    for b in case.load_buses:
        specs.append((LOAD, b, [net_of(b, f"load at bus {b}")]))
    specs.sort(key=lambda s: (_KIND_ORDER[s[0]], s[1]))

    devices, terminals = [], []
    for d, (kind, did, nets) in enumerate(specs):
        idx = []
        for slot, n in enumerate(nets):
            idx.append(len(terminals))
            terminals.append(Terminal(d, slot, n))
        devices.append(Device(kind, did, tuple(idx)))

    term_net = np.array([t.net for t in terminals], dtype=int)
    gen_devs = [d for d in devices if d.kind == GEN]
    line_devs = [d for d in devices if d.kind == LINE]
    load_devs = [d for d in devices if d.kind == LOAD]
    gens_by_id = {g.id: g for g in case.generators}
    lines_by_id = {ln.id: ln for ln in case.lines}
    # the device ordering (by id) fixes the parameter ordering too
    line_objs = [lines_by_id[d.id] for d in line_devs]
    if sorted(gens_by_id) != [d.id for d in gen_devs]:
        raise NetworkBuildError("generator ids must be unique")

    net_size = np.bincount(term_net, minlength=len(case.buses))
    if np.any(net_size == 0):
        empty = case.buses[int(np.argmin(net_size))]
        raise NetworkBuildError(f"bus {empty} has no attached device")

    return DtnNetwork(
        case=case,
        base_mva=case.base_mva,
        net_bus=tuple(case.buses),
        devices=tuple(devices),
        terminals=tuple(terminals),
        term_net=term_net,
        gen_term=np.array([d.terminals[0] for d in gen_devs], dtype=int),
        line_from_term=np.array([d.terminals[0] for d in line_devs], dtype=int),
        line_to_term=np.array([d.terminals[1] for d in line_devs], dtype=int),
        load_term=np.array([d.terminals[0] for d in load_devs], dtype=int),
        line_reactance=np.array([ln.reactance for ln in line_objs], dtype=float),
        line_limit=np.array([ln.flow_limit for ln in line_objs], dtype=float) / case.base_mva,
        line_from_net=np.array([bus_index[ln.from_bus] for ln in line_objs], dtype=int),
        line_to_net=np.array([bus_index[ln.to_bus] for ln in line_objs], dtype=int),
        gen_net=term_net[[d.terminals[0] for d in gen_devs]] if gen_devs else np.zeros(0, int),
        load_net=term_net[[d.terminals[0] for d in load_devs]] if load_devs else np.zeros(0, int),
        load_bus=tuple(d.id for d in load_devs),
        net_size=net_size,
    )


def generator_order(net: DtnNetwork) -> list:
    """Case generators in network (terminal) order."""
    by_id = {g.id: g for g in net.case.generators}
    return [by_id[d.id] for d in net.devices if d.kind == GEN]


def line_order(net: DtnNetwork) -> list:
    by_id = {ln.id: ln for ln in net.case.lines}
    return [by_id[d.id] for d in net.devices if d.kind == LINE]


# ---------------------------------------------------------------------------
# scenarios

@dataclass(frozen=True)
class ScenarioSet:
    """Base case (label 0) plus one single-line outage per further label."""

    network: DtnNetwork
    outaged_line: tuple[int | None, ...]  # line id per label
    susceptance: np.ndarray  # (n_scenarios, n_lines) pu, 0 for the outaged line
    limit: np.ndarray  # (n_scenarios, n_lines) pu, inf where inactive

    @property
    def labels(self) -> range:
        return range(len(self.outaged_line))

    def __len__(self) -> int:
        return len(self.outaged_line)

    def in_service(self, label: int) -> np.ndarray:
        return self.susceptance[label] > 0


def _line_position(net: DtnNetwork) -> dict[int, int]:
    return {d.id: k for k, d in enumerate(d for d in net.devices if d.kind == LINE)}


def _scenario_arrays(net: DtnNetwork, outages):
    pos = _line_position(net)
    b0 = 1.0 / net.line_reactance
    sus = np.tile(b0, (len(outages), 1))
    lim = np.tile(net.line_limit, (len(outages), 1))
    for c, lid in enumerate(outages):
        if lid is not None:
            lim[c] *= net.case.emergency_factor
            sus[c, pos[lid]] = 0.0
            lim[c, pos[lid]] = np.inf
    return sus, lim


def _connected(n_nets, from_net, to_net, active) -> bool:
    adj: dict[int, list[int]] = {i: [] for i in range(n_nets)}
    for f, t, a in zip(from_net, to_net, active):
        if a:
            adj[int(f)].append(int(t))
            adj[int(t)].append(int(f))
    seen = {0}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in adj[i]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return len(seen) == n_nets


def connectivity_check(net: DtnNetwork, scenarios: ScenarioSet, label: int) -> bool:
    return _connected(net.n_nets, net.line_from_net, net.line_to_net, scenarios.in_service(label))


def generate_scenarios(net: DtnNetwork, contingency_lines: Iterable[int]) -> ScenarioSet:
    lines = list(contingency_lines)
    pos = _line_position(net)
    for lid in lines:
        if lid not in pos:
            raise ValueError(f"unknown contingency line {lid}")
    outages = [None] + lines
    sus, lim = _scenario_arrays(net, outages)
    scen = ScenarioSet(net, tuple(outages), sus, lim)
    for c in scen.labels:
        if not connectivity_check(net, scen, c):
            if c == 0:
                raise NetworkBuildError("base-case network is not connected")
            raise IslandingError(outages[c])
    return scen


def secure_contingencies(net: DtnNetwork, candidates: Iterable[int] | None = None) -> list[int]:
    """Subset of ``candidates`` (default: all lines) whose outage keeps the grid connected."""
    pos = _line_position(net)
    ids = list(pos) if candidates is None else list(candidates)
    keep = []
    for lid in ids:
        active = np.ones(net.n_lines, dtype=bool)
        active[pos[lid]] = False
        if _connected(net.n_nets, net.line_from_net, net.line_to_net, active):
            keep.append(lid)
    return keep

