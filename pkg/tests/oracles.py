"""Independent re-implementations used as test oracles.

Nothing here calls the package's admittance, flow or injection code; the
formulas are rebuilt element by element from branch and bus parameters.
"""
import cmath

import numpy as np


def phasors(vm, va):
    return [cmath.rect(m, a) for m, a in zip(vm, va)]


def branch_currents(net, v):
    """Terminal currents from the series current and half line charging."""
    pos = net.bus_index
    out = []
    for br in net.branches:
        a = br.tap_ratio * cmath.exp(1j * br.phase_shift)
        vf, vt = v[pos[br.from_bus]], v[pos[br.to_bus]]
        ys = 1 / complex(br.r, br.x)
        i_series = ys * (vf / a - vt)            # through the series element, ideal side to to-bus
        i_from = (i_series + 0.5j * br.b_charging * vf / a) / a.conjugate()
        i_to = -i_series + 0.5j * br.b_charging * vt
        out.append((i_from, i_to))
    return out


def branch_power(net, v):
    pos = net.bus_index
    res = []
    for br, (i_f, i_t) in zip(net.branches, branch_currents(net, v)):
        s_f = v[pos[br.from_bus]] * i_f.conjugate()
        s_t = v[pos[br.to_bus]] * i_t.conjugate()
        res.append((s_f, s_t))
    return res


def dense_ybus(net):
    n = net.n_bus
    pos = net.bus_index
    y = np.zeros((n, n), dtype=complex)
    for b in net.buses:
        y[pos[b.id], pos[b.id]] += complex(b.g_shunt, b.b_shunt)
    for br in net.branches:
        f, t = pos[br.from_bus], pos[br.to_bus]
        a = br.tap_ratio * cmath.exp(1j * br.phase_shift)
        ys = 1 / complex(br.r, br.x)
        ych = 0.5j * br.b_charging
        y[f, f] += (ys + ych) / abs(a) ** 2
        y[f, t] += -ys / a.conjugate()
        y[t, f] += -ys / a
        y[t, t] += ys + ych
    return y


def bus_power(net, v):
    v = np.asarray(v)
    return v * np.conj(dense_ybus(net) @ v)


def measurements(net, vm, va):
    """Every measurable quantity keyed by measurement id ("kind:element")."""
    v = phasors(vm, va)
    out = {}
    for br, (s_f, _), (i_f, _) in zip(net.branches, branch_power(net, v), branch_currents(net, v)):
        out[f"p_flow_from:{br.id}"] = s_f.real
        out[f"q_flow_from:{br.id}"] = s_f.imag
        out[f"i_mag:{br.id}"] = abs(i_f)
    s = bus_power(net, v)
    for i, b in enumerate(net.buses):
        out[f"p_inj:{b.id}"] = s[i].real
        out[f"q_inj:{b.id}"] = s[i].imag
        out[f"v_mag:{b.id}"] = vm[i]
        out[f"v_ang:{b.id}"] = va[i]
    return out


def branch_losses(net, vm, va):
    """Complex loss per branch id: S_from + S_to."""
    v = phasors(vm, va)
    return {br.id: s_f + s_t for br, (s_f, s_t) in zip(net.branches, branch_power(net, v))}
