import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridveil.grid import build_admittance, data_path, load_case, parse_case
from gridveil.powerflow import (OperatingPoint, PfOptions, PowerFlowError, VoltageState, branch_currents,
                                branch_flows, bus_injections, current_magnitude_jacobian, flow_derivatives,
                                injection_jacobian, solve_power_flow, wrap_angle)

pytest.importorskip("pypower")
from pypower.api import case118, ppoption, runpf  # noqa: E402


@pytest.fixture(scope="module")
def net118():
    net = load_case(data_path("case118.m"))
    return net, build_admittance(net)


@pytest.fixture(scope="module")
def reference118():
    res, ok = runpf(case118(), ppoption(VERBOSE=0, OUT_ALL=0, PF_TOL=1e-12))
    assert ok
    return res


def _random_state(net, rng, spread=0.2):
    return VoltageState(1 + rng.uniform(-0.05, 0.05, net.n_bus), rng.uniform(-spread, spread, net.n_bus))


def test_matches_reference_solver(net118, reference118):
    net, adm = net118
    op = solve_power_flow(net, adm)
    vm_ref = reference118["bus"][:, 7]
    va_ref = np.radians(reference118["bus"][:, 8])
    assert np.max(np.abs(op.state.v_mag - vm_ref)) < 1e-8
    assert np.max(np.abs(wrap_angle(op.state.v_ang - va_ref))) < 1e-8
    pf_ref = reference118["branch"][:, 13] / net.base_mva
    qt_ref = reference118["branch"][:, 16] / net.base_mva
    assert np.max(np.abs(op.p_flow_from - pf_ref)) < 1e-7
    assert np.max(np.abs(op.q_flow_to - qt_ref)) < 1e-7


def test_quadratic_convergence(net118):
    net, adm = net118
    op = solve_power_flow(net, adm)
    h = op.mismatch_history
    assert op.iterations <= 6 and h[-1] < 1e-8
    # each late step at least squares the error (up to a modest constant)
    assert h[-1] < 10 * h[-2] ** 2


def test_complex_power_oracle(net118):
    # S_f = V_f conj(I_f) and S_bus = V conj(Ybus V): independent of the flow formulas
    net, adm = net118
    rng = np.random.default_rng(3)
    state = _random_state(net, rng)
    v = state.phasor
    i_f, i_t = branch_currents(adm, state)
    p = net.params
    s_f = v[p.f] * np.conj(i_f)
    s_t = v[p.t] * np.conj(i_t)
    pf, qf, pt, qt = branch_flows(net, state)
    assert np.allclose(pf, s_f.real, atol=1e-12) and np.allclose(qf, s_f.imag, atol=1e-12)
    assert np.allclose(pt, s_t.real, atol=1e-12) and np.allclose(qt, s_t.imag, atol=1e-12)
    s_bus = v * np.conj(adm.y_bus @ v)
    p_inj, q_inj = bus_injections(net, state)
    assert np.allclose(p_inj, s_bus.real, atol=1e-10)
    assert np.allclose(q_inj, s_bus.imag, atol=1e-10)


def test_injection_balance_at_solution(net118):
    net, adm = net118
    op = solve_power_flow(net, adm)
    pg, qg = net.generation()
    pd, qd = net.demand()
    pq = [i for i, b in enumerate(net.buses) if b.bus_type.value == "pq"]
    assert np.max(np.abs(op.p_inj[pq] - (pg - pd)[pq])) < 1e-8
    assert np.max(np.abs(op.q_inj[pq] - (qg - qd)[pq])) < 1e-8


def test_flow_derivatives_finite_difference():
    net = load_case(data_path("case118.m"))
    state = _random_state(net, np.random.default_rng(5))
    d = flow_derivatives(net, state)
    p = net.params
    h = 1e-7
    names = ("pf", "qf", "pt", "qt")
    for k in (0, 7, 36, 120):
        _check_branch_derivatives(net, state, d, p, k, h, names)


def _check_branch_derivatives(net, state, d, p, k, h, names):
    for var, end in (("v", "f"), ("v", "t"), ("a", "f"), ("a", "t")):
        idx = p.f if end == "f" else p.t
        vm, va = state.v_mag.copy(), state.v_ang.copy()
        if var == "v":
            vm[idx[k]] += h
        else:
            va[idx[k]] += h
        hi = branch_flows(net, VoltageState(vm, va))
        if var == "v":
            vm[idx[k]] -= 2 * h
        else:
            va[idx[k]] -= 2 * h
        lo = branch_flows(net, VoltageState(vm, va))
        for q, a, b in zip(names, hi, lo):
            fd = (a[k] - b[k]) / (2 * h)
            assert d[f"{q}_{var}{end}"][k] == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_injection_and_current_jacobians_finite_difference():
    net = load_case(data_path("toy7.m"))
    adm = build_admittance(net)
    state = _random_state(net, np.random.default_rng(11))
    ds_dvm, ds_dva = injection_jacobian(net, adm, state)
    di_dvm, di_dva = current_magnitude_jacobian(adm, state)
    h = 1e-7

    def evaluate(vm, va):
        s = VoltageState(vm, va)
        p, q = bus_injections(net, s)
        return p + 1j * q, np.abs(branch_currents(adm, s)[0])

    for j in range(net.n_bus):
        for kind, jac_s, jac_i in (("vm", ds_dvm, di_dvm), ("va", ds_dva, di_dva)):
            e = np.zeros(net.n_bus)
            e[j] = h
            if kind == "vm":
                hi, lo = evaluate(state.v_mag + e, state.v_ang), evaluate(state.v_mag - e, state.v_ang)
            else:
                hi, lo = evaluate(state.v_mag, state.v_ang + e), evaluate(state.v_mag, state.v_ang - e)
            assert np.allclose(jac_s.toarray()[:, j], (hi[0] - lo[0]) / (2 * h), atol=1e-6)
            assert np.allclose(jac_i.toarray()[:, j], (hi[1] - lo[1]) / (2 * h), atol=1e-6)


def test_non_convergence_raises(net118):
    net, adm = net118
    with pytest.raises(PowerFlowError, match="did not converge"):
        solve_power_flow(net, adm, PfOptions(max_iterations=1))


def test_infeasible_load_raises():
    text = data_path("toy7.m").read_text().replace("2\t1\t60\t20", "2\t1\t6000\t2000")
    net = parse_case(text, "heavy")
    with pytest.raises(PowerFlowError):
        solve_power_flow(net, build_admittance(net))


def test_operating_point_json_round_trip(net118):
    net, adm = net118
    op = solve_power_flow(net, adm)
    back = OperatingPoint.from_dict(json.loads(json.dumps(op.to_dict())))
    assert np.array_equal(back.state.v_mag, op.state.v_mag)
    assert np.array_equal(back.i_from, op.i_from)
    assert back.iterations == op.iterations


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3.0, 3.0), st.integers(0, 10_000))
def test_flows_invariant_to_angle_reference(shift, seed):
    net = load_case(data_path("toy7.m"))
    state = _random_state(net, np.random.default_rng(seed))
    moved = VoltageState(state.v_mag, state.v_ang + shift)
    for a, b in zip(branch_flows(net, state), branch_flows(net, moved)):
        assert np.allclose(a, b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_branch_losses_nonnegative(seed):
    # real losses p_from + p_to equal r |I_series|^2 >= 0 on plain branches
    net = load_case(data_path("toy7.m"))
    state = _random_state(net, np.random.default_rng(seed))
    pf, _, pt, _ = branch_flows(net, state)
    assert np.all(pf + pt >= -1e-12)
