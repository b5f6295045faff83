"""Bus injection classification and attack-zone growth."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .grid import Network

ZERO_INJECTION_TOL = 1e-9


class ZoneError(ValueError):
    pass


class InjectionKind(str, Enum):
    ZERO = "zero_injection"
    NONZERO = "nonzero_injection"


def classify_buses(net: Network, tol: float = ZERO_INJECTION_TOL) -> dict[int, InjectionKind]:
    """Map bus id to its injection class.

    A bus is zero-injection only when it has no load, no generator and no
    shunt. Any attached generator counts as an injection even at zero
    dispatch, since its reactive output is free.
    """
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    has_gen = net.has_generator()
    pg, qg = net.generation()
    out = {}
    for i, bus in enumerate(net.buses):
        zero = (
            not has_gen[i]
            and abs(pg[i] - bus.p_demand) <= tol
            and abs(qg[i] - bus.q_demand) <= tol
            and abs(bus.g_shunt) <= tol
            and abs(bus.b_shunt) <= tol
        )
        out[bus.id] = InjectionKind.ZERO if zero else InjectionKind.NONZERO
    return out


def passive_buses(net: Network, tol: float = ZERO_INJECTION_TOL) -> set[int]:
    """Buses with neither load nor generation (a shunt is allowed).

    Their net injection is fixed by their own voltage, so the power balance
    must be preserved at them whenever they touch the zone.
    """
    has_gen = net.has_generator()
    return {
        bus.id for i, bus in enumerate(net.buses)
        if not has_gen[i] and abs(bus.p_demand) <= tol and abs(bus.q_demand) <= tol
    }


def _adjacency(net: Network) -> dict[int, set[int]]:
    adj: dict[int, set[int]] = {b.id: set() for b in net.buses}
    for br in net.branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    return adj


@dataclass(frozen=True)
class AttackZone:
    interior: frozenset[int]
    boundary: frozenset[int]
    branches: tuple[int, ...]          # branch ids, in network order
    target_line: int | None = None     # branch id
    balance_buses: frozenset[int] = field(default=frozenset())

    @property
    def buses(self) -> frozenset[int]:
        return self.interior | self.boundary

    def injection_buses(self) -> list[int]:
        """Zone buses whose injection measurement absorbs flow changes."""
        return sorted(self.buses - self.balance_buses)

    def with_target(self, branch_id: int) -> "AttackZone":
        if branch_id not in self.branches:
            raise ZoneError(f"target branch {branch_id} is not a zone branch")
        return AttackZone(self.interior, self.boundary, self.branches, branch_id, self.balance_buses)


def zone_from_sets(net: Network, interior, boundary, target_line: int | None = None) -> AttackZone:
    """Build and check a zone from explicit interior/boundary bus sets."""
    interior = frozenset(int(b) for b in interior)
    boundary = frozenset(int(b) for b in boundary)
    known = set(net.bus_index)
    missing = (interior | boundary) - known
    if missing:
        raise ZoneError(f"zone references unknown buses {sorted(missing)}")
    if interior & boundary:
        raise ZoneError(f"buses {sorted(interior & boundary)} are both interior and boundary")
    if not interior:
        raise ZoneError("zone has no interior buses")
    slack_id = net.buses[net.slack].id
    if slack_id in interior:
        raise ZoneError(f"slack bus {slack_id} cannot be an interior bus")
    zone_buses = interior | boundary
    branches = []
    for br in net.branches:
        ends = {br.from_bus, br.to_bus}
        if ends & interior:
            if not ends <= zone_buses:
                outside = sorted(ends - zone_buses)
                raise ZoneError(f"branch {br.id} links interior to external buses {outside}")
            branches.append(br.id)
    cls = classify_buses(net)
    bad = sorted(b for b in boundary if cls[b] is InjectionKind.ZERO)
    if bad:
        raise ZoneError(f"boundary buses {bad} are zero-injection")
    balance = frozenset(passive_buses(net) & zone_buses)
    zone = AttackZone(interior, boundary, tuple(branches), None, balance)
    if target_line is not None:
        zone = zone.with_target(target_line)
    return zone


def build_zone(net: Network, cls: dict[int, InjectionKind], targets) -> AttackZone:
    """Grow a zone breadth-first from target buses.

    Zero-injection neighbours join the interior and are explored further;
    non-zero-injection neighbours become boundary buses and stop the growth.
    """
    targets = sorted({int(t) for t in targets})
    if not targets:
        raise ZoneError("no target buses given")
    unknown = [t for t in targets if t not in net.bus_index]
    if unknown:
        raise ZoneError(f"unknown target buses {unknown}")
    slack_id = net.buses[net.slack].id
    if slack_id in targets:
        raise ZoneError(f"target bus {slack_id} is the slack bus")
    adj = _adjacency(net)
    interior = set(targets)
    boundary: set[int] = set()
    frontier = deque(targets)
    while frontier:
        bus = frontier.popleft()
        for nb in sorted(adj[bus]):
            if nb in interior or nb in boundary:
                continue
            if cls[nb] is InjectionKind.ZERO:
                if nb == slack_id:
                    raise ZoneError("zone growth reached the slack bus")
                interior.add(nb)
                frontier.append(nb)
            else:
                boundary.add(nb)
    # a target can also sit next to another target already interior; never both
    boundary -= interior
    if not boundary or len(interior) >= net.n_bus:
        raise ZoneError("attack zone swallows the entire network")
    return zone_from_sets(net, interior, boundary)


@dataclass(frozen=True)
class ZoneReport:
    n_interior: int
    n_boundary: int
    n_branches: int
    n_zero_injection_interior: int
    n_balance_buses: int
    forecast: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "n_interior": self.n_interior,
            "n_boundary": self.n_boundary,
            "n_branches": self.n_branches,
            "n_zero_injection_interior": self.n_zero_injection_interior,
            "n_balance_buses": self.n_balance_buses,
            "forecast": dict(self.forecast),
        }


def zone_report(zone: AttackZone, net: Network) -> ZoneReport:
    cls = classify_buses(net)
    n_inj = len(zone.injection_buses())
    nbr = len(zone.branches)
    forecast = {
        "p_flow_from": nbr,
        "q_flow_from": nbr,
        "p_inj": n_inj,
        "q_inj": n_inj,
        "v_mag": len(zone.interior),
        "v_ang": len(zone.interior),
        "i_mag": nbr,
    }
    return ZoneReport(
        n_interior=len(zone.interior),
        n_boundary=len(zone.boundary),
        n_branches=nbr,
        n_zero_injection_interior=sum(cls[b] is InjectionKind.ZERO for b in zone.interior),
        n_balance_buses=len(zone.balance_buses),
        forecast=forecast,
    )


# ---------------------------------------------------------------------------
# fixture I/O

def zone_to_dict(zone: AttackZone, net: Network, provenance: str = "") -> dict:
    d = {"interior": sorted(zone.interior), "boundary": sorted(zone.boundary)}
    if zone.target_line is not None:
        br = net.branches[net.branch_index[zone.target_line]]
        d["target_line"] = {"from": br.from_bus, "to": br.to_bus}
    if provenance:
        d["provenance"] = provenance
    return d


def zone_from_dict(net: Network, data: dict) -> AttackZone:
    target = None
    if data.get("target_line"):
        tl = data["target_line"]
        target = net.find_branch(int(tl["from"]), int(tl["to"])).id
    return zone_from_sets(net, data["interior"], data["boundary"], target)


def load_zone(net: Network, path: str | Path) -> AttackZone:
    return zone_from_dict(net, json.loads(Path(path).read_text()))


def zone_mask(net: Network, buses) -> np.ndarray:
    mask = np.zeros(net.n_bus, dtype=bool)
    for b in buses:
        mask[net.bus_index[b]] = True
    return mask
