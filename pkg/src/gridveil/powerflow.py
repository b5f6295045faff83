"""Newton-Raphson AC power flow and branch/bus quantity evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import AdmittanceSet, BranchArrays, BusType, Network

log = logging.getLogger(__name__)


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, mismatch: np.ndarray | None = None):
        super().__init__(message)
        self.mismatch = mismatch


def wrap_angle(a):
    """Map angles onto (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class VoltageState:
    v_mag: np.ndarray
    v_ang: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v_mag", np.asarray(self.v_mag, dtype=float))
        object.__setattr__(self, "v_ang", np.asarray(self.v_ang, dtype=float))
        if self.v_mag.shape != self.v_ang.shape:
            raise ValueError("v_mag and v_ang must have the same length")

    @property
    def phasor(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def copy(self) -> "VoltageState":
        return VoltageState(self.v_mag.copy(), self.v_ang.copy())

    def to_dict(self) -> dict:
        return {"v_mag": self.v_mag.tolist(), "v_ang": self.v_ang.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "VoltageState":
        return cls(np.array(d["v_mag"]), np.array(d["v_ang"]))


@dataclass(frozen=True)
class PfOptions:
    tolerance: float = 1e-8
    max_iterations: int = 20
    flat_start: bool = True

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class OperatingPoint:
    state: VoltageState
    p_flow_from: np.ndarray
    q_flow_from: np.ndarray
    p_flow_to: np.ndarray
    q_flow_to: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    i_from: np.ndarray
    i_to: np.ndarray
    converged: bool = True
    iterations: int = 0
    max_mismatch: float = 0.0
    mismatch_history: tuple[float, ...] = field(default=())

    @classmethod
    def evaluate(cls, net: Network, adm: AdmittanceSet, state: VoltageState, **diag) -> "OperatingPoint":
        pf, qf, pt, qt = branch_flows(net, state)
        p_inj, q_inj = bus_injections(net, state)
        i_from, i_to = branch_currents(adm, state)
        return cls(state, pf, qf, pt, qt, p_inj, q_inj, i_from, i_to, **diag)

    def to_dict(self) -> dict:
        return {
            "v_mag": self.state.v_mag.tolist(),
            "v_ang": self.state.v_ang.tolist(),
            "p_flow_from": self.p_flow_from.tolist(),
            "q_flow_from": self.q_flow_from.tolist(),
            "p_flow_to": self.p_flow_to.tolist(),
            "q_flow_to": self.q_flow_to.tolist(),
            "p_inj": self.p_inj.tolist(),
            "q_inj": self.q_inj.tolist(),
            "i_from_re": self.i_from.real.tolist(),
            "i_from_im": self.i_from.imag.tolist(),
            "i_to_re": self.i_to.real.tolist(),
            "i_to_im": self.i_to.imag.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "max_mismatch": self.max_mismatch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OperatingPoint":
        arr = np.asarray
        return cls(
            state=VoltageState(arr(d["v_mag"]), arr(d["v_ang"])),
            p_flow_from=arr(d["p_flow_from"]), q_flow_from=arr(d["q_flow_from"]),
            p_flow_to=arr(d["p_flow_to"]), q_flow_to=arr(d["q_flow_to"]),
            p_inj=arr(d["p_inj"]), q_inj=arr(d["q_inj"]),
            i_from=arr(d["i_from_re"]) + 1j * arr(d["i_from_im"]),
            i_to=arr(d["i_to_re"]) + 1j * arr(d["i_to_im"]),
            converged=d["converged"], iterations=d["iterations"], max_mismatch=d["max_mismatch"],
        )


# ---------------------------------------------------------------------------
# branch quantities

def _flow_terms(p: BranchArrays, vm: np.ndarray, va: np.ndarray):
    vf, vt = vm[p.f], vm[p.t]
    delta = va[p.f] - va[p.t] - p.shift
    c, s = np.cos(delta), np.sin(delta)
    a = vf * vt / p.tap
    return vf, vt, c, s, a


def branch_flows(net: Network, state: VoltageState):
    """Active/reactive flow at both terminals of every branch.

    For nominal-tap branches this is the plain Pi-model expression
    P_lm = g V_l^2 - V_l V_m (g cos + b sin); taps and phase shifters
    enter through the from-side ratio.
    Returns (p_from, q_from, p_to, q_to).
    """
    p = net.params
    vf, vt, c, s, a = _flow_terms(p, state.v_mag, state.v_ang)
    tap2 = p.tap * p.tap
    bsh = p.b + 0.5 * p.bc
    p_from = p.g * vf * vf / tap2 - a * (p.g * c + p.b * s)
    q_from = -bsh * vf * vf / tap2 - a * (p.g * s - p.b * c)
    p_to = p.g * vt * vt - a * (p.g * c - p.b * s)
    q_to = -bsh * vt * vt + a * (p.g * s + p.b * c)
    return p_from, q_from, p_to, q_to


def flow_derivatives(net: Network, state: VoltageState) -> dict[str, np.ndarray]:
    """Partial derivatives of the four terminal flows per branch.

    Keys are ``<quantity>_<variable>`` with quantity in pf, qf, pt, qt and
    variable in vf, vt (magnitudes) or af, at (angles at from/to bus).
    """
    p = net.params
    vf, vt, c, s, a = _flow_terms(p, state.v_mag, state.v_ang)
    g, b, tap = p.g, p.b, p.tap
    bsh = b + 0.5 * p.bc
    gc_bs = g * c + b * s
    gs_bc = g * s - b * c
    gc_mbs = g * c - b * s
    gs_pbc = g * s + b * c
    d = {
        "pf_vf": 2 * g * vf / tap**2 - vt / tap * gc_bs,
        "pf_vt": -vf / tap * gc_bs,
        "pf_af": a * gs_bc,
        "qf_vf": -2 * bsh * vf / tap**2 - vt / tap * gs_bc,
        "qf_vt": -vf / tap * gs_bc,
        "qf_af": -a * gc_bs,
        "pt_vf": -vt / tap * gc_mbs,
        "pt_vt": 2 * g * vt - vf / tap * gc_mbs,
        "pt_af": a * gs_pbc,
        "qt_vf": vt / tap * gs_pbc,
        "qt_vt": -2 * bsh * vt + vf / tap * gs_pbc,
        "qt_af": a * gc_mbs,
    }
    for q in ("pf", "qf", "pt", "qt"):
        d[f"{q}_at"] = -d[f"{q}_af"]
    return d


def branch_currents(adm: AdmittanceSet, state: VoltageState):
    v = state.phasor
    return adm.y_from @ v, adm.y_to @ v


def bus_injections(net: Network, state: VoltageState):
    """Net injection per bus: shunt consumption plus the sum of incident terminal flows."""
    p = net.params
    gs, bs = net.shunts()
    pf, qf, pt, qt = branch_flows(net, state)
    v2 = state.v_mag ** 2
    p_inj = gs * v2
    q_inj = -bs * v2
    p_inj = p_inj + np.bincount(p.f, pf, net.n_bus) + np.bincount(p.t, pt, net.n_bus)
    q_inj = q_inj + np.bincount(p.f, qf, net.n_bus) + np.bincount(p.t, qt, net.n_bus)
    return p_inj, q_inj


def injection_jacobian(net: Network, adm: AdmittanceSet, state: VoltageState):
    """Sparse d(P,Q injection)/d(V, theta) from the complex power derivative formulas."""
    y = adm.y_bus
    v = state.phasor
    vm = state.v_mag
    ibus = y @ v
    diag_v = sp.diags(v)
    diag_i = sp.diags(ibus)
    diag_vn = sp.diags(v / vm)
    ds_dvm = diag_v @ np.conj(y @ diag_vn) + np.conj(diag_i) @ diag_vn
    ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
    return sp.csr_matrix(ds_dvm), sp.csr_matrix(ds_dva)


# ---------------------------------------------------------------------------
# Newton-Raphson

def specified_injections(net: Network) -> tuple[np.ndarray, np.ndarray]:
    pg, qg = net.generation()
    pd, qd = net.demand()
    return pg - pd, qg - qd


def initial_state(net: Network, opts: PfOptions) -> VoltageState:
    vset = net.voltage_setpoints()
    if opts.flat_start:
        vm = np.ones(net.n_bus)
        va = np.zeros(net.n_bus)
    else:
        vm = np.array([b.v_mag for b in net.buses])
        va = np.array([b.v_ang for b in net.buses])
    for i, bus in enumerate(net.buses):
        if bus.bus_type is not BusType.PQ:
            vm[i] = vset[i]
    va[net.slack] = net.buses[net.slack].v_ang
    return VoltageState(vm, va)


def solve_power_flow(net: Network, adm: AdmittanceSet, opts: PfOptions | None = None) -> OperatingPoint:
    """Polar Newton-Raphson with fixed PV set-points (no Q-limit switching)."""
    opts = opts or PfOptions()
    types = [b.bus_type for b in net.buses]
    pv = np.array([i for i, t in enumerate(types) if t is BusType.PV], dtype=int)
    pq = np.array([i for i, t in enumerate(types) if t is BusType.PQ], dtype=int)
    pvpq = np.r_[pv, pq]
    p_spec, q_spec = specified_injections(net)
    s_spec = p_spec + 1j * q_spec

    state = initial_state(net, opts)
    vm, va = state.v_mag.copy(), state.v_ang.copy()

    def mismatch(vm, va):
        v = vm * np.exp(1j * va)
        s = v * np.conj(adm.y_bus @ v) - s_spec
        return np.r_[s.real[pvpq], s.imag[pq]]

    f = mismatch(vm, va)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    history = [norm]
    it = 0
    while norm >= opts.tolerance:
        if it >= opts.max_iterations:
            raise PowerFlowError(
                f"power flow did not converge in {opts.max_iterations} iterations "
                f"(max mismatch {norm:.3e})", mismatch=f)
        it += 1
        ds_dvm, ds_dva = injection_jacobian(net, adm, VoltageState(vm, va))
        jac = sp.vstack([
            sp.hstack([ds_dva.real[pvpq][:, pvpq], ds_dvm.real[pvpq][:, pq]]),
            sp.hstack([ds_dva.imag[pq][:, pvpq], ds_dvm.imag[pq][:, pq]]),
        ]).tocsc()
        try:
            dx = splu(jac).solve(-f)
        except RuntimeError as exc:
            raise PowerFlowError(f"singular power-flow Jacobian: {exc}", mismatch=f) from None
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        va = wrap_angle(va)
        f = mismatch(vm, va)
        norm = float(np.max(np.abs(f)))
        history.append(norm)
        log.debug("pf iteration %d: max mismatch %.3e", it, norm)

    return OperatingPoint.evaluate(
        net, adm, VoltageState(vm, va),
        converged=True, iterations=it, max_mismatch=norm, mismatch_history=tuple(history))


def flow_jacobian(net: Network, state: VoltageState, quantity: str):
    """Sparse (n_branch x n_bus) derivatives of one terminal flow w.r.t. V and theta.

    ``quantity`` is one of pf, qf, pt, qt.
    """
    p = net.params
    d = flow_derivatives(net, state)
    nl, nb = net.n_branch, net.n_bus
    rows = np.r_[np.arange(nl), np.arange(nl)]
    cols = np.r_[p.f, p.t]
    d_dvm = sp.csr_matrix((np.r_[d[f"{quantity}_vf"], d[f"{quantity}_vt"]], (rows, cols)), shape=(nl, nb))
    d_dva = sp.csr_matrix((np.r_[d[f"{quantity}_af"], d[f"{quantity}_at"]], (rows, cols)), shape=(nl, nb))
    return d_dvm, d_dva


def current_magnitude_jacobian(adm: AdmittanceSet, state: VoltageState, y: sp.csr_matrix | None = None):
    """Derivatives of |I| for I = Y V (Y defaults to the from-side matrix)."""
    y = adm.y_from if y is None else y
    v = state.phasor
    i = y @ v
    mag = np.abs(i)
    safe = np.where(mag > 0, mag, 1.0)
    scale = sp.diags(np.conj(i) / safe)
    di_dvm = y @ sp.diags(v / state.v_mag)
    di_dva = y @ sp.diags(1j * v)
    return sp.csr_matrix((scale @ di_dvm).real), sp.csr_matrix((scale @ di_dva).real)
