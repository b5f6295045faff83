"""Network data model, MATPOWER case parsing and admittance matrices.

All quantities are stored per-unit on the case MVA base; angles are radians.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class BusType(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


_MATPOWER_BUS_TYPES = {1: BusType.PQ, 2: BusType.PV, 3: BusType.SLACK}

# minimum column counts per MATPOWER 7 case format
_MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 11}


class CaseError(ValueError):
    """Raised when a case file cannot be parsed or fails validation."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class Bus:
    id: int
    bus_type: BusType
    p_demand: float
    q_demand: float
    g_shunt: float
    b_shunt: float
    v_min: float
    v_max: float
    base_kv: float
    v_mag: float = 1.0
    v_ang: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus_id: int
    p_gen: float
    q_gen: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_set: float = 1.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float
    tap_ratio: float = 1.0
    phase_shift: float = 0.0
    rate_a: float = 0.0
    status: bool = True

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)

    @property
    def is_plain(self) -> bool:
        """True for a nominal-tap, unshifted branch."""
        return self.tap_ratio == 1.0 and self.phase_shift == 0.0


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()
    name: str = ""

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def branch_index(self) -> dict[int, int]:
        return {br.id: k for k, br in enumerate(self.branches)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def slack(self) -> int:
        """Position of the slack bus."""
        slacks = [i for i, b in enumerate(self.buses) if b.bus_type is BusType.SLACK]
        if len(slacks) != 1:
            raise CaseError(f"expected exactly one slack bus, found {len(slacks)}")
        return slacks[0]

    @cached_property
    def params(self) -> "BranchArrays":
        return BranchArrays.from_network(self)

    def find_branch(self, from_bus: int, to_bus: int) -> Branch:
        """Return the first branch joining two buses, in either orientation."""
        for br in self.branches:
            if (br.from_bus, br.to_bus) in ((from_bus, to_bus), (to_bus, from_bus)):
                return br
        raise KeyError(f"no branch between buses {from_bus} and {to_bus}")

    def generation(self) -> tuple[np.ndarray, np.ndarray]:
        """Aggregate generator set-points per bus."""
        pg = np.zeros(self.n_bus)
        qg = np.zeros(self.n_bus)
        for g in self.generators:
            i = self.bus_index[g.bus_id]
            pg[i] += g.p_gen
            qg[i] += g.q_gen
        return pg, qg

    def has_generator(self) -> np.ndarray:
        mask = np.zeros(self.n_bus, dtype=bool)
        for g in self.generators:
            mask[self.bus_index[g.bus_id]] = True
        return mask

    def voltage_setpoints(self) -> np.ndarray:
        """Magnitude set-point per bus: generator v_set where present, else bus Vm."""
        vset = np.array([b.v_mag for b in self.buses])
        seen = set()
        for g in self.generators:
            i = self.bus_index[g.bus_id]
            if i not in seen:
                vset[i] = g.v_set
                seen.add(i)
        return vset

    def demand(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([b.p_demand for b in self.buses]),
                np.array([b.q_demand for b in self.buses]))

    def shunts(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([b.g_shunt for b in self.buses]),
                np.array([b.b_shunt for b in self.buses]))


@dataclass(frozen=True)
class BranchArrays:
    """Vectorised branch parameters in branch order (positions, not ids)."""

    f: np.ndarray
    t: np.ndarray
    g: np.ndarray
    b: np.ndarray
    bc: np.ndarray
    tap: np.ndarray
    shift: np.ndarray

    @classmethod
    def from_network(cls, net: Network) -> "BranchArrays":
        idx = net.bus_index
        ys = np.array([br.series_admittance for br in net.branches], dtype=complex)
        return cls(
            f=np.array([idx[br.from_bus] for br in net.branches], dtype=int),
            t=np.array([idx[br.to_bus] for br in net.branches], dtype=int),
            g=ys.real.copy(),
            b=ys.imag.copy(),
            bc=np.array([br.b_charging for br in net.branches], dtype=float),
            tap=np.array([br.tap_ratio for br in net.branches], dtype=float),
            shift=np.array([br.phase_shift for br in net.branches], dtype=float),
        )


@dataclass(frozen=True)
class AdmittanceSet:
    y_bus: sp.csr_matrix
    y_from: sp.csr_matrix
    y_to: sp.csr_matrix


# ---------------------------------------------------------------------------
# parsing

_TABLE_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^;\[\{']+);")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _read_tables(text: str) -> tuple[dict[str, float], dict[str, list[tuple[int, list[float]]]]]:
    """Pull numeric scalars and bracketed tables out of MATPOWER text.

    Table rows are returned with the source line number of each row.
    Non-numeric tables (cell arrays such as bus_name) are skipped.
    """
    scalars: dict[str, float] = {}
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = _strip_comment(lines[i])
        m = _TABLE_START.match(raw)
        if m is None:
            s = _SCALAR.match(raw)
            if s is not None:
                try:
                    scalars[s.group(1)] = float(s.group(2))
                except ValueError:
                    pass
            i += 1
            continue
        name = m.group(1)
        rows: list[tuple[int, list[float]]] = []
        rest = m.group(2)
        lineno = i + 1
        closed = False
        while True:
            body, sep, _ = rest.partition("]")
            for chunk in body.split(";"):
                tokens = chunk.replace(",", " ").split()
                if not tokens:
                    continue
                try:
                    rows.append((lineno, [float(tok) for tok in tokens]))
                except ValueError as exc:
                    raise CaseError(f"non-numeric entry in table {name}: {exc}",
                                    line=lineno, field=name) from None
            if sep:
                closed = True
                break
            i += 1
            if i >= len(lines):
                break
            lineno = i + 1
            rest = _strip_comment(lines[i])
        if not closed:
            raise CaseError(f"unterminated table {name}", line=lineno, field=name)
        tables[name] = rows
        i += 1
    return scalars, tables


def parse_case(case_text: str, name: str = "") -> Network:
    """Parse MATPOWER case text into a validated per-unit :class:`Network`.

    Out-of-service branches and generators are dropped. Branch ids are the
    1-based row positions in the source branch table, so ids stay stable
    even when rows are dropped.
    """
    scalars, tables = _read_tables(case_text)
    if "baseMVA" not in scalars:
        raise CaseError("missing mpc.baseMVA", field="baseMVA")
    base = scalars["baseMVA"]
    if base <= 0:
        raise CaseError("baseMVA must be positive", field="baseMVA")
    for tbl in ("bus", "gen", "branch"):
        if tbl not in tables:
            raise CaseError(f"missing table mpc.{tbl}", field=tbl)
        for lineno, row in tables[tbl]:
            if len(row) < _MIN_COLUMNS[tbl]:
                raise CaseError(
                    f"row in mpc.{tbl} has {len(row)} columns, expected at least {_MIN_COLUMNS[tbl]}",
                    line=lineno, field=tbl)

    buses = []
    seen: dict[int, int] = {}
    for lineno, row in tables["bus"]:
        bus_id = int(row[0])
        if bus_id in seen:
            raise CaseError(f"duplicate bus id {bus_id} (first seen on line {seen[bus_id]})",
                            line=lineno, field="bus_i")
        seen[bus_id] = lineno
        code = int(row[1])
        if code == 4:
            continue  # isolated bus
        if code not in _MATPOWER_BUS_TYPES:
            raise CaseError(f"unknown bus type {code}", line=lineno, field="type")
        buses.append(Bus(
            id=bus_id,
            bus_type=_MATPOWER_BUS_TYPES[code],
            p_demand=row[2] / base,
            q_demand=row[3] / base,
            g_shunt=row[4] / base,
            b_shunt=row[5] / base,
            v_mag=row[7],
            v_ang=math.radians(row[8]),
            base_kv=row[9],
            v_max=row[11],
            v_min=row[12],
        ))
    known = {b.id for b in buses}

    generators = []
    for lineno, row in tables["gen"]:
        if row[7] <= 0:
            continue
        if int(row[0]) not in known:
            raise CaseError(f"generator at unknown bus {int(row[0])}", line=lineno, field="GEN_BUS")
        generators.append(Generator(
            bus_id=int(row[0]),
            p_gen=row[1] / base,
            q_gen=row[2] / base,
            q_max=row[3] / base,
            q_min=row[4] / base,
            v_set=row[5],
            p_max=row[8] / base,
            p_min=row[9] / base,
        ))

    branches = []
    for k, (lineno, row) in enumerate(tables["branch"], start=1):
        if row[10] <= 0:
            continue
        f, t = int(row[0]), int(row[1])
        for col, bus_id in (("F_BUS", f), ("T_BUS", t)):
            if bus_id not in known:
                raise CaseError(f"branch {k} references unknown bus {bus_id}", line=lineno, field=col)
        branches.append(Branch(
            id=k,
            from_bus=f,
            to_bus=t,
            r=row[2],
            x=row[3],
            b_charging=row[4],
            rate_a=row[5] / base,
            tap_ratio=row[8] if row[8] != 0 else 1.0,
            phase_shift=math.radians(row[9]),
            status=True,
        ))

    net = Network(base_mva=base, buses=tuple(buses), branches=tuple(branches),
                  generators=tuple(generators), name=name)
    problems = validate_network(net)
    if problems:
        raise CaseError("; ".join(d.message for d in problems), field=problems[0].code)
    return net


def load_case(path: str | Path) -> Network:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def validate_network(net: Network) -> list[Diagnostic]:
    """Check every Network invariant; one diagnostic per violation."""
    out: list[Diagnostic] = []
    ids = [b.id for b in net.buses]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    for d in dupes:
        out.append(Diagnostic("duplicate_bus", f"duplicate bus id {d}"))
    for b in net.buses:
        if b.id <= 0:
            out.append(Diagnostic("bus_id", f"bus id {b.id} is not positive"))
        if b.v_min > b.v_max:
            out.append(Diagnostic("voltage_limits", f"bus {b.id}: v_min {b.v_min} > v_max {b.v_max}"))
    n_slack = sum(b.bus_type is BusType.SLACK for b in net.buses)
    if n_slack == 0:
        out.append(Diagnostic("no_slack", "no slack bus"))
    elif n_slack > 1:
        out.append(Diagnostic("multiple_slack", f"{n_slack} slack buses, expected exactly one"))
    known = set(ids)
    for g in net.generators:
        if g.bus_id not in known:
            out.append(Diagnostic("generator_bus", f"generator at unknown bus {g.bus_id}"))
    edges = []
    for br in net.branches:
        if br.from_bus == br.to_bus:
            out.append(Diagnostic("self_loop", f"branch {br.id} connects bus {br.from_bus} to itself"))
        if br.r == 0 and br.x == 0:
            out.append(Diagnostic("zero_impedance", f"branch {br.id} has zero impedance"))
        if br.from_bus not in known or br.to_bus not in known:
            out.append(Diagnostic("branch_bus", f"branch {br.id} references an unknown bus"))
            continue
        if br.status:
            edges.append((br.from_bus, br.to_bus))
    if dupes or not net.buses:
        return out
    pos = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    rows = [pos[a] for a, _ in edges]
    cols = [pos[b] for _, b in edges]
    graph = sp.coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(n, n))
    n_comp, labels = connected_components(graph, directed=False)
    if n_comp > 1:
        sizes = np.bincount(labels)
        main = int(np.argmax(sizes))
        stray = sorted(ids[i] for i in range(n) if labels[i] != main)
        out.append(Diagnostic("disconnected",
                              f"network is disconnected; buses outside the main component: {stray}"))
    return out


# ---------------------------------------------------------------------------
# admittance

def build_admittance(net: Network) -> AdmittanceSet:
    """Assemble bus and branch admittance matrices using the Pi model with taps."""
    for br in net.branches:
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {br.id} has zero impedance", field="BR_X")
    p = net.params
    nb, nl = net.n_bus, net.n_branch
    ys = p.g + 1j * p.b
    ratio = p.tap * np.exp(1j * p.shift)
    ytt = ys + 0.5j * p.bc
    yff = ytt / (ratio * np.conj(ratio))
    yft = -ys / np.conj(ratio)
    ytf = -ys / ratio

    gs, bs = net.shunts()
    ysh = gs + 1j * bs
    rows = np.arange(nl)
    y_from = sp.csr_matrix((np.r_[yff, yft], (np.r_[rows, rows], np.r_[p.f, p.t])), shape=(nl, nb))
    y_to = sp.csr_matrix((np.r_[ytf, ytt], (np.r_[rows, rows], np.r_[p.f, p.t])), shape=(nl, nb))
    cf = sp.csr_matrix((np.ones(nl), (rows, p.f)), shape=(nl, nb))
    ct = sp.csr_matrix((np.ones(nl), (rows, p.t)), shape=(nl, nb))
    y_bus = (cf.T @ y_from + ct.T @ y_to + sp.diags(ysh)).tocsr()
    return AdmittanceSet(y_bus=y_bus, y_from=y_from, y_to=y_to)


# ---------------------------------------------------------------------------
# canonical JSON form

def _num(x: float) -> float:
    # 17 significant digits survive a float round trip exactly
    return float(f"{x:.17g}")


def network_to_dict(net: Network) -> dict:
    return {
        "name": net.name,
        "base_mva": _num(net.base_mva),
        "buses": [
            {"id": b.id, "bus_type": b.bus_type.value, "p_demand": _num(b.p_demand),
             "q_demand": _num(b.q_demand), "g_shunt": _num(b.g_shunt), "b_shunt": _num(b.b_shunt),
             "v_min": _num(b.v_min), "v_max": _num(b.v_max), "base_kv": _num(b.base_kv),
             "v_mag": _num(b.v_mag), "v_ang": _num(b.v_ang)}
            for b in net.buses
        ],
        "branches": [
            {"id": br.id, "from_bus": br.from_bus, "to_bus": br.to_bus, "r": _num(br.r),
             "x": _num(br.x), "b_charging": _num(br.b_charging), "tap_ratio": _num(br.tap_ratio),
             "phase_shift": _num(br.phase_shift), "rate_a": _num(br.rate_a), "status": br.status}
            for br in net.branches
        ],
        "generators": [
            {"bus_id": g.bus_id, "p_gen": _num(g.p_gen), "q_gen": _num(g.q_gen),
             "p_min": _num(g.p_min), "p_max": _num(g.p_max), "q_min": _num(g.q_min),
             "q_max": _num(g.q_max), "v_set": _num(g.v_set)}
            for g in net.generators
        ],
    }


def network_from_dict(data: dict) -> Network:
    buses = tuple(Bus(**{**b, "bus_type": BusType(b["bus_type"])}) for b in data["buses"])
    branches = tuple(Branch(**br) for br in data["branches"])
    gens = tuple(Generator(**g) for g in data["generators"])
    net = Network(base_mva=data["base_mva"], buses=buses, branches=branches,
                  generators=gens, name=data.get("name", ""))
    problems = validate_network(net)
    if problems:
        raise CaseError("; ".join(d.message for d in problems), field=problems[0].code)
    return net


def network_to_json(net: Network) -> str:
    return json.dumps(network_to_dict(net), indent=1)


def network_from_json(text: str) -> Network:
    return network_from_dict(json.loads(text))


def data_path(name: str) -> Path:
    """Path of a file bundled in the package data directory."""
    return Path(__file__).parent / "data" / name
