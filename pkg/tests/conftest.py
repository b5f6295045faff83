import logging

import pytest

from gridveil.designer import (TargetOverload, assemble_attack_vector, boundary_injections,
                               design_optimal)
from gridveil.grid import build_admittance, data_path, load_case
from gridveil.powerflow import solve_power_flow
from gridveil.zone import build_zone, classify_buses, load_zone, zone_from_sets


class Scenario:
    """A solved case plus its attack zone, shared across tests."""

    def __init__(self, case, zone_builder):
        self.net = load_case(data_path(case))
        self.adm = build_admittance(self.net)
        self.op = solve_power_flow(self.net, self.adm)
        self.zone = zone_builder(self.net)

    def overload(self, w):
        return TargetOverload(self.zone.target_line, w)

    def attack(self, spoofed):
        inj = boundary_injections(self.net, self.op, self.zone, spoofed)
        return assemble_attack_vector(self.net, self.adm, self.op, self.zone, spoofed, inj)


def _toy_zone(net):
    return build_zone(net, classify_buses(net), [2]).with_target(net.find_branch(1, 2).id)


@pytest.fixture(scope="session")
def ieee118():
    return Scenario("case118.m", lambda net: load_zone(net, data_path("zone118.json")))


@pytest.fixture(scope="session")
def toy():
    return Scenario("toy7.m", _toy_zone)


@pytest.fixture(scope="session")
def case5():
    return Scenario("case5.m", lambda net: zone_from_sets(net, [3, 4], [1, 2, 5], net.find_branch(3, 4).id))


@pytest.fixture(scope="session")
def optimal118(ieee118):
    s = ieee118
    return design_optimal(s.net, s.adm, s.op, s.zone, s.overload(1.5))


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("gridveil").setLevel(logging.ERROR)
    yield


# acceptance lines are collected here and printed after the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"AC{n:<2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
