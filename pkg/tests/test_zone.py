import json

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from gridveil.grid import data_path, load_case, parse_case
from gridveil.zone import (InjectionKind, ZoneError, build_zone, classify_buses, load_zone, passive_buses,
                           zone_from_dict, zone_from_sets, zone_mask, zone_report, zone_to_dict)

NET118 = load_case(data_path("case118.m"))
CLS118 = classify_buses(NET118)


def test_toy_zone_shape():
    net = load_case(data_path("toy7.m"))
    zone = build_zone(net, classify_buses(net), [2])
    assert zone.interior == {1, 2, 5}
    assert zone.boundary == {3, 4, 6}
    assert len(zone.branches) == 5
    assert zone.balance_buses == {1, 5}
    assert zone.injection_buses() == [2, 3, 4, 6]


def test_shunt_only_bus_is_not_zero_injection():
    net = load_case(data_path("case118.m"))
    cls = classify_buses(net)
    bus34 = net.buses[net.bus_index[34]]
    assert bus34.b_shunt != 0 and bus34.p_demand != 0
    assert cls[34] is InjectionKind.NONZERO
    zero = {b for b, k in cls.items() if k is InjectionKind.ZERO}
    assert zero <= passive_buses(net)


def test_line15_19_zone_fixture():
    zone = load_zone(NET118, data_path("zone118.json"))
    assert len(zone.interior) == 15
    assert sorted(zone.boundary) == [13, 14, 17, 23, 37, 44, 70]
    assert len(zone.branches) == 25
    assert NET118.branches[NET118.branch_index[zone.target_line]].from_bus == 15
    rep = zone_report(zone, NET118)
    assert rep.forecast == {"p_flow_from": 25, "q_flow_from": 25, "p_inj": 20, "q_inj": 20,
                            "v_mag": 15, "v_ang": 15, "i_mag": 25}


def test_fixture_reproduced_by_growth():
    fixture = load_zone(NET118, data_path("zone118.json"))
    seeds = sorted(fixture.interior - {71})
    grown = build_zone(NET118, CLS118, seeds)
    assert grown.interior == fixture.interior
    assert grown.boundary == fixture.boundary
    assert grown.branches == fixture.branches


def test_zone_round_trip():
    zone = load_zone(NET118, data_path("zone118.json"))
    back = zone_from_dict(NET118, json.loads(json.dumps(zone_to_dict(zone, NET118))))
    assert back == zone


def test_slack_target_rejected():
    with pytest.raises(ZoneError, match="slack"):
        build_zone(NET118, CLS118, [69])


def test_growth_reaching_slack_rejected():
    net = load_case(data_path("toy7.m"))
    cls = classify_buses(net)
    cls[7] = InjectionKind.ZERO
    cls[3] = InjectionKind.ZERO
    with pytest.raises(ZoneError, match="slack"):
        build_zone(net, cls, [2])


def test_growth_may_stop_at_the_slack():
    # the slack's voltage is fixed anyway, so it can serve as a boundary bus
    net = load_case(data_path("toy7.m"))
    cls = {b: InjectionKind.ZERO for b in classify_buses(net)}
    cls[7] = InjectionKind.NONZERO
    zone = build_zone(net, cls, [2])
    assert zone.boundary == {7}
    assert zone.interior == {1, 2, 3, 4, 5, 6}


def test_explicit_sets_checked():
    net = load_case(data_path("toy7.m"))
    with pytest.raises(ZoneError, match="external"):
        zone_from_sets(net, [1, 2, 5], [3, 4])          # 5-6 leaves the zone
    with pytest.raises(ZoneError, match="zero-injection"):
        zone_from_sets(net, [2], [1, 3])
    with pytest.raises(ZoneError, match="unknown"):
        zone_from_sets(net, [2], [99])
    with pytest.raises(ZoneError, match="slack"):
        zone_from_sets(net, [7], [3, 4, 6])


def test_target_must_be_zone_branch():
    zone = load_zone(NET118, data_path("zone118.json"))
    outside = NET118.find_branch(1, 2).id
    with pytest.raises(ZoneError, match="not a zone branch"):
        zone.with_target(outside)


def test_zone_mask():
    net = load_case(data_path("toy7.m"))
    assert zone_mask(net, [1, 5]).tolist() == [True, False, False, False, True, False, False]


def test_generator_at_zero_dispatch_counts_as_injection():
    text = data_path("toy7.m").read_text().replace(
        "mpc.gen = [\n", "mpc.gen = [\n\t5\t0\t0\t10\t-10\t1.0\t100\t1\t10\t0;\n")
    net = parse_case(text, "gen5")
    assert classify_buses(net)[5] is InjectionKind.NONZERO


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.sampled_from([b.id for b in NET118.buses if b.id != 69]))
def test_grown_zones_are_closed(target):
    try:
        zone = build_zone(NET118, CLS118, [target])
    except ZoneError:
        return
    adj = {}
    for br in NET118.branches:
        adj.setdefault(br.from_bus, set()).add(br.to_bus)
        adj.setdefault(br.to_bus, set()).add(br.from_bus)
    for b in zone.interior:
        assert adj[b] <= zone.buses
        if b != target:
            assert CLS118[b] is InjectionKind.ZERO
    assert all(CLS118[b] is InjectionKind.NONZERO for b in zone.boundary)
    assert all(adj[b] & zone.interior for b in zone.boundary)
