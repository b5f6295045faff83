"""Attack design: spoofed in-zone state, boundary injections and attack vector.

The optimal design minimises the squared deviation of the interior voltages
from their pre-attack values subject to the AC balance equations at every
injection-free zone bus and a scaled flow on the target line. The
non-optimal design finds a point on the same constraint set starting from a
random perturbation, with no deviation objective.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import AdmittanceSet, Network
from .powerflow import (OperatingPoint, VoltageState, branch_currents, branch_flows,
                        bus_injections, flow_derivatives, injection_jacobian, wrap_angle)
from .zone import AttackZone, ZoneError

log = logging.getLogger(__name__)

BLOCKS = ("p_flow_from", "q_flow_from", "p_inj", "q_inj", "v_mag", "v_ang", "i_mag")
SUPPLEMENTARY_BLOCKS = ("i_ang",)
V_WARN_RANGE = (0.8, 1.2)


class DesignError(RuntimeError):
    """The attack problem is malformed or the solver failed."""

    def __init__(self, message: str, violation: float | None = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.violation = violation
        self.diagnostics = diagnostics or {}


class InfeasibleAttackError(DesignError):
    pass


@dataclass(frozen=True)
class TargetOverload:
    line: int      # branch id
    w: float

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("overload multiplier must be positive")


@dataclass(frozen=True)
class DesignerOptions:
    feasibility_tol: float = 1e-8
    stationarity_tol: float = 1e-6
    max_outer_iterations: int = 100
    nonoptimal_seed: int = 0
    nonoptimal_perturbation: float = 0.05

    def __post_init__(self):
        if self.feasibility_tol <= 0 or self.stationarity_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class SpoofedState:
    state: VoltageState
    pre_state: VoltageState
    interior: tuple[int, ...]          # bus positions, sorted by bus id
    objective: float
    constraint_norm: float
    stationarity: float
    iterations: int
    variant: str
    feasible: bool
    warnings: tuple[str, ...] = ()

    def deviation(self) -> tuple[np.ndarray, np.ndarray]:
        """Per interior bus (dV, dtheta)."""
        idx = list(self.interior)
        dv = self.state.v_mag[idx] - self.pre_state.v_mag[idx]
        da = wrap_angle(self.state.v_ang[idx] - self.pre_state.v_ang[idx])
        return dv, da

    def to_dict(self, net: Network) -> dict:
        return {
            "variant": self.variant,
            "feasible": self.feasible,
            "objective": self.objective,
            "constraint_norm": self.constraint_norm,
            "stationarity": None if np.isnan(self.stationarity) else self.stationarity,
            "iterations": self.iterations,
            "warnings": list(self.warnings),
            "interior": [net.buses[i].id for i in self.interior],
            "state": self.state.to_dict(),
            "pre_state": self.pre_state.to_dict(),
        }

    @classmethod
    def from_dict(cls, net: Network, d: dict) -> "SpoofedState":
        return cls(
            state=VoltageState.from_dict(d["state"]),
            pre_state=VoltageState.from_dict(d["pre_state"]),
            interior=tuple(net.bus_index[b] for b in d["interior"]),
            objective=d["objective"], constraint_norm=d["constraint_norm"],
            stationarity=float("nan") if d["stationarity"] is None else d["stationarity"],
            iterations=d["iterations"],
            variant=d["variant"], feasible=d["feasible"], warnings=tuple(d.get("warnings", ())),
        )


@dataclass(frozen=True)
class AttackEntry:
    block: str
    element: int        # bus id or branch id
    pre: float
    post: float

    @property
    def delta(self) -> float:
        if self.block in ("v_ang", "i_ang"):
            return float(wrap_angle(self.post - self.pre))
        return self.post - self.pre

    @property
    def descriptor(self) -> str:
        kind = "branch" if self.block in ("p_flow_from", "q_flow_from", "i_mag", "i_ang") else "bus"
        return f"{kind}:{self.element}"


@dataclass(frozen=True)
class AttackVector:
    entries: tuple[AttackEntry, ...]

    def block(self, name: str) -> list[AttackEntry]:
        return [e for e in self.entries if e.block == name]

    def block_sizes(self) -> dict[str, int]:
        return {b: len(self.block(b)) for b in BLOCKS + SUPPLEMENTARY_BLOCKS}

    def deltas(self, name: str | None = None) -> np.ndarray:
        src = self.entries if name is None else self.block(name)
        return np.array([e.delta for e in src])

    def block_norms(self) -> dict[str, float]:
        return {b: float(np.linalg.norm(self.deltas(b))) for b in BLOCKS}

    def measurement_entries(self) -> list[AttackEntry]:
        """Entries of the seven measurement blocks (current angles excluded)."""
        return [e for e in self.entries if e.block in BLOCKS]

    def to_csv(self, include_supplementary: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "element", "pre", "post", "delta"])
        rows = self.entries if include_supplementary else self.measurement_entries()
        for e in rows:
            w.writerow([e.block, e.descriptor, repr(e.pre), repr(e.post), repr(e.delta)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AttackVector":
        rows = csv.DictReader(io.StringIO(text))
        return cls(tuple(
            AttackEntry(r["block"], int(r["element"].split(":")[1]), float(r["pre"]), float(r["post"]))
            for r in rows))

    def to_json(self) -> str:
        return json.dumps([
            {"block": e.block, "element": e.descriptor, "pre": e.pre, "post": e.post, "delta": e.delta}
            for e in self.entries], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AttackVector":
        return cls(tuple(
            AttackEntry(d["block"], int(d["element"].split(":")[1]), d["pre"], d["post"])
            for d in json.loads(text)))


# ---------------------------------------------------------------------------
# constraint model

@dataclass
class _Problem:
    """Equality constraints c(x) = 0 over the interior voltages x = [V, theta]."""

    net: Network
    adm: AdmittanceSet
    pre: VoltageState
    interior: np.ndarray
    balance: np.ndarray          # bus positions with balance constraints
    target: int                  # branch position
    p_target: float
    q_target: float
    p_bal: np.ndarray = field(init=False)
    q_bal: np.ndarray = field(init=False)

    def __post_init__(self):
        p_inj, q_inj = bus_injections(self.net, self.pre)
        self.p_bal = p_inj[self.balance]
        self.q_bal = q_inj[self.balance]

    @property
    def n(self) -> int:
        return 2 * len(self.interior)

    @property
    def m(self) -> int:
        return 2 * len(self.balance) + 2

    def x0(self) -> np.ndarray:
        return np.r_[self.pre.v_mag[self.interior], self.pre.v_ang[self.interior]]

    def state(self, x: np.ndarray) -> VoltageState:
        k = len(self.interior)
        vm = self.pre.v_mag.copy()
        va = self.pre.v_ang.copy()
        vm[self.interior] = x[:k]
        va[self.interior] = x[k:]
        return VoltageState(vm, va)

    def residual(self, x: np.ndarray) -> np.ndarray:
        st = self.state(x)
        p_inj, q_inj = bus_injections(self.net, st)
        pf, qf, _, _ = branch_flows(self.net, st)
        return np.r_[p_inj[self.balance] - self.p_bal,
                     q_inj[self.balance] - self.q_bal,
                     pf[self.target] - self.p_target,
                     qf[self.target] - self.q_target]

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        st = self.state(x)
        ds_dvm, ds_dva = injection_jacobian(self.net, self.adm, st)
        cols = self.interior
        rows_b = self.balance
        dvm = ds_dvm[rows_b][:, cols].toarray()
        dva = ds_dva[rows_b][:, cols].toarray()
        d = flow_derivatives(self.net, st)
        k = self.target
        p = self.net.params
        tgt_p = np.zeros(self.n)
        tgt_q = np.zeros(self.n)
        pos = {b: j for j, b in enumerate(cols)}
        nk = len(cols)
        for bus, side in ((p.f[k], "f"), (p.t[k], "t")):
            if bus in pos:
                j = pos[bus]
                tgt_p[j] += d[f"pf_v{side}"][k]
                tgt_p[nk + j] += d[f"pf_a{side}"][k]
                tgt_q[j] += d[f"qf_v{side}"][k]
                tgt_q[nk + j] += d[f"qf_a{side}"][k]
        return np.vstack([
            np.hstack([dvm.real, dva.real]),
            np.hstack([dvm.imag, dva.imag]),
            tgt_p[None, :],
            tgt_q[None, :],
        ])


def _setup(net, adm, op, zone: AttackZone, overload: TargetOverload) -> _Problem:
    if not op.converged:
        raise DesignError("pre-attack operating point is not converged")
    if overload.line not in zone.branches:
        raise ZoneError(f"target branch {overload.line} is not a zone branch")
    for bid in zone.branches:
        br = net.branches[net.branch_index[bid]]
        if not br.is_plain:
            raise DesignError(f"zone branch {bid} ({br.from_bus}-{br.to_bus}) has an off-nominal "
                              "tap or phase shift; the attack model covers plain Pi branches only")
    interior = np.array(sorted(net.bus_index[b] for b in zone.interior), dtype=int)
    balance = np.array(sorted(net.bus_index[b] for b in zone.balance_buses), dtype=int)
    k = net.branch_index[overload.line]
    prob = _Problem(net, adm, op.state, interior, balance, k,
                    overload.w * op.p_flow_from[k], overload.w * op.q_flow_from[k])
    if prob.m > prob.n:
        raise DesignError(
            f"attack problem over-determined: {prob.m} equality constraints for {prob.n} variables")
    return prob


def _multipliers(jac: np.ndarray, grad: np.ndarray) -> np.ndarray:
    lam, *_ = np.linalg.lstsq(jac.T, -grad, rcond=None)
    return lam


def _lagrangian_curvature(prob: _Problem, x: np.ndarray, lam: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Hessian of lam^T c(x) by central differences of the analytic Jacobian."""
    n = x.size
    out = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        out[:, j] = (prob.jacobian(x + e).T @ lam - prob.jacobian(x - e).T @ lam) / (2 * h)
    return 0.5 * (out + out.T)


def _solve_sqp(prob: _Problem, opts: DesignerOptions):
    """Equality-constrained SQP with an l1 merit line search.

    The quadratic model uses the objective Hessian 2I plus the constraint
    curvature weighted by the current multipliers; when that model is not
    positive definite on the constraint null space the plain 2I model is
    used. A singular KKT matrix triggers a quadratic-penalty step instead.
    """
    x0 = prob.x0()
    x = x0.copy()
    n, m = prob.n, prob.m
    mu = 1.0
    lam = np.zeros(m)
    best = (np.inf, x.copy())
    for it in range(1, opts.max_outer_iterations + 1):
        c = prob.residual(x)
        jac = prob.jacobian(x)
        grad = 2.0 * (x - x0)
        lam_ls = _multipliers(jac, grad)
        stat = float(np.max(np.abs(grad + jac.T @ lam_ls)))
        viol = float(np.max(np.abs(c)))
        if viol < best[0]:
            best = (viol, x.copy())
        log.debug("sqp %d: |c|=%.3e stationarity=%.3e", it, viol, stat)
        if viol < opts.feasibility_tol and stat < opts.stationarity_tol:
            return x, it - 1, viol, stat

        hess = 2.0 * np.eye(n)
        if it > 1 and np.any(lam):
            curved = hess + _lagrangian_curvature(prob, x, lam)
            q, _ = np.linalg.qr(jac.T, mode="complete")
            z = q[:, m:]
            if np.all(np.isfinite(curved)) and (
                    z.size == 0 or np.min(np.linalg.eigvalsh(z.T @ curved @ z)) > 1e-8):
                hess = curved
        kkt = np.block([[hess, jac.T], [jac, np.zeros((m, m))]])
        rhs = -np.r_[grad, c]
        try:
            sol = np.linalg.solve(kkt, rhs)
            if not np.all(np.isfinite(sol)) or np.linalg.cond(kkt) > 1e14:
                raise np.linalg.LinAlgError("ill-conditioned KKT matrix")
            dx, lam_new = sol[:n], sol[n:]
        except np.linalg.LinAlgError:
            rho = 1e4 * max(1.0, mu)
            dx = np.linalg.solve(2.0 * np.eye(n) + 2.0 * rho * jac.T @ jac, -(grad + 2.0 * rho * jac.T @ c))
            lam_new = 2.0 * rho * c

        mu = max(mu, 1.1 * float(np.max(np.abs(lam_new))) + 1e-3)

        def merit(xx):
            # magnitudes must stay positive; anything else is outside the model
            if not np.all(np.isfinite(xx)) or np.min(xx[:n // 2]) <= 0.0:
                return np.inf
            val = float(np.sum((xx - x0) ** 2) + mu * np.sum(np.abs(prob.residual(xx))))
            return val if np.isfinite(val) else np.inf

        phi0 = merit(x)
        slope = float(grad @ dx) - mu * float(np.sum(np.abs(c)))
        alpha = 1.0
        while alpha > 1e-10:
            xn = x + alpha * dx
            if merit(xn) <= phi0 + 1e-4 * alpha * min(slope, 0.0):
                break
            alpha *= 0.5
        else:
            log.debug("sqp %d: line search failed", it)
            break
        x = xn
        lam = lam + alpha * (lam_new - lam) if it > 1 else lam_new
    c = prob.residual(x)
    viol = float(np.max(np.abs(c))) if np.all(np.isfinite(c)) else np.inf
    raise DesignError(
        f"attack design stopped after {it} iterations without converging "
        f"(constraint violation {min(viol, best[0]):.3e})",
        violation=min(viol, best[0]))


def _solve_feasibility(prob: _Problem, x_start: np.ndarray, opts: DesignerOptions):
    """Minimum-norm Gauss-Newton on 0.5*|c(x)|^2 from a given start."""
    x = x_start.copy()
    best = np.inf
    for it in range(1, opts.max_outer_iterations + 1):
        c = prob.residual(x)
        r0 = float(c @ c)
        viol = float(np.max(np.abs(c)))
        best = min(best, viol)
        if viol < opts.feasibility_tol:
            return x, it - 1, viol
        jac = prob.jacobian(x)
        dx, *_ = np.linalg.lstsq(jac, -c, rcond=None)
        alpha = 1.0
        while alpha > 1e-10:
            cn = prob.residual(x + alpha * dx)
            if float(cn @ cn) <= (1 - 1e-4 * alpha) * r0:
                break
            alpha *= 0.5
        else:
            break
        x = x + alpha * dx
    raise InfeasibleAttackError(
        f"no feasible attack found from the perturbed start (best violation {best:.3e})",
        violation=best)


def _finish(prob: _Problem, x: np.ndarray, iterations: int, viol: float, stat: float,
            variant: str, opts: DesignerOptions) -> SpoofedState:
    st = prob.state(x)
    st = VoltageState(st.v_mag, wrap_angle(st.v_ang))
    idx = prob.interior
    dv = st.v_mag[idx] - prob.pre.v_mag[idx]
    da = wrap_angle(st.v_ang[idx] - prob.pre.v_ang[idx])
    warnings = []
    lo, hi = V_WARN_RANGE
    out = [prob.net.buses[i].id for i in idx if not lo <= st.v_mag[i] <= hi]
    if out:
        warnings.append(f"voltage magnitude outside [{lo}, {hi}] pu at buses {out}")
    return SpoofedState(
        state=st, pre_state=prob.pre, interior=tuple(int(i) for i in idx),
        objective=float(np.sum(dv ** 2) + np.sum(da ** 2)),
        constraint_norm=viol, stationarity=stat, iterations=iterations,
        variant=variant, feasible=viol < opts.feasibility_tol, warnings=tuple(warnings))


def design_optimal(net: Network, adm: AdmittanceSet, op: OperatingPoint, zone: AttackZone,
                   overload: TargetOverload, opts: DesignerOptions | None = None) -> SpoofedState:
    """Minimum-deviation spoofed state that overloads the target line."""
    opts = opts or DesignerOptions()
    prob = _setup(net, adm, op, zone, overload)
    try:
        x, it, viol, stat = _solve_sqp(prob, opts)
    except DesignError as exc:
        # distinguish "no feasible point" from slow convergence near a feasible one
        if exc.violation is not None and exc.violation > 1e3 * opts.feasibility_tol:
            raise InfeasibleAttackError(
                f"overload W={overload.w} on branch {overload.line} appears infeasible "
                f"(best constraint violation {exc.violation:.3e})", violation=exc.violation) from None
        raise
    return _finish(prob, x, it, viol, stat, "optimal", opts)


def design_nonoptimal(net: Network, adm: AdmittanceSet, op: OperatingPoint, zone: AttackZone,
                      overload: TargetOverload, opts: DesignerOptions | None = None) -> SpoofedState:
    """Feasible spoofed state with no deviation objective.

    Starts from a seeded uniform perturbation of the pre-attack interior
    voltages and drives the constraint residual to zero.
    """
    opts = opts or DesignerOptions()
    prob = _setup(net, adm, op, zone, overload)
    rng = np.random.default_rng(opts.nonoptimal_seed)
    amp = opts.nonoptimal_perturbation
    x_start = prob.x0() + rng.uniform(-amp, amp, prob.n)
    x, it, viol = _solve_feasibility(prob, x_start, opts)
    return _finish(prob, x, it, viol, float("nan"), "nonoptimal", opts)


# ---------------------------------------------------------------------------
# measurement-space quantities

@dataclass(frozen=True)
class InjectionUpdate:
    bus: int
    p_pre: float
    q_pre: float
    p_post: float
    q_post: float


def boundary_injections(net: Network, op: OperatingPoint, zone: AttackZone,
                        spoofed: SpoofedState) -> list[InjectionUpdate]:
    """Crafted injections for every injection-measured zone bus.

    New injection = old injection + change of each incident zone-branch
    terminal flow + change of the bus's own shunt term (the latter is zero
    at boundary buses, whose voltage is held).
    """
    if not spoofed.feasible:
        raise DesignError("spoofed state is not feasible")
    p = net.params
    pf0, qf0, pt0, qt0 = op.p_flow_from, op.q_flow_from, op.p_flow_to, op.q_flow_to
    pf1, qf1, pt1, qt1 = branch_flows(net, spoofed.state)
    gs, bs = net.shunts()
    v0sq = op.state.v_mag ** 2
    v1sq = spoofed.state.v_mag ** 2
    out = []
    for bus_id in zone.injection_buses():
        i = net.bus_index[bus_id]
        dp = gs[i] * (v1sq[i] - v0sq[i])
        dq = -bs[i] * (v1sq[i] - v0sq[i])
        for bid in zone.branches:
            k = net.branch_index[bid]
            if p.f[k] == i:
                dp += pf1[k] - pf0[k]
                dq += qf1[k] - qf0[k]
            if p.t[k] == i:
                dp += pt1[k] - pt0[k]
                dq += qt1[k] - qt0[k]
        out.append(InjectionUpdate(bus_id, op.p_inj[i], op.q_inj[i], op.p_inj[i] + dp, op.q_inj[i] + dq))
    return out


def assemble_attack_vector(net: Network, adm: AdmittanceSet, op: OperatingPoint, zone: AttackZone,
                           spoofed: SpoofedState, injections: list[InjectionUpdate]) -> AttackVector:
    pf1, qf1, _, _ = branch_flows(net, spoofed.state)
    if_1, _ = branch_currents(adm, spoofed.state)
    if_0 = op.i_from
    entries: list[AttackEntry] = []
    zb = [(bid, net.branch_index[bid]) for bid in zone.branches]
    entries += [AttackEntry("p_flow_from", bid, op.p_flow_from[k], pf1[k]) for bid, k in zb]
    entries += [AttackEntry("q_flow_from", bid, op.q_flow_from[k], qf1[k]) for bid, k in zb]
    entries += [AttackEntry("p_inj", u.bus, u.p_pre, u.p_post) for u in injections]
    entries += [AttackEntry("q_inj", u.bus, u.q_pre, u.q_post) for u in injections]
    interior = sorted(zone.interior)
    for blk, arr0, arr1 in (("v_mag", op.state.v_mag, spoofed.state.v_mag),
                            ("v_ang", op.state.v_ang, spoofed.state.v_ang)):
        entries += [AttackEntry(blk, b, arr0[net.bus_index[b]], arr1[net.bus_index[b]]) for b in interior]
    entries += [AttackEntry("i_mag", bid, abs(if_0[k]), abs(if_1[k])) for bid, k in zb]
    entries += [AttackEntry("i_ang", bid, float(np.angle(if_0[k])), float(np.angle(if_1[k]))) for bid, k in zb]
    return AttackVector(tuple(AttackEntry(e.block, e.element, float(e.pre), float(e.post)) for e in entries))


def objective_value(spoofed: SpoofedState) -> float:
    dv, da = spoofed.deviation()
    return float(np.sum(dv ** 2) + np.sum(da ** 2))
