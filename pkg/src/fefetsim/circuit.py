"""FeCap-FET stack circuit models: program/erase, rest points, Vt band.

The FeFET gate stack is a ferroelectric capacitor in series with the FET
gate.  Programming applies a voltage across the series stack; the voltage
divides so that the capacitor charge equals the FET gate charge.  After the
pulse the stack voltage is zero and the rest point is the intersection of
the capacitor P-V branch with the gate-capacitance load line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import fecap
from .fecap import FeCapParams, FeCapState, _FC_PER_UCCM2_NM2

V_THERMAL = 0.02585  # kT/q at 300 K, volts

CHARGE_TOL_FC = 1e-6
MAX_NEWTON_ITER = 50

# Width of the C1-smoothing window of the gate-capacitance transition.
GATE_CAP_TRANSITION_V = 0.050


class SolverError(RuntimeError):
    """Charge-balance iteration failed; carries the best bracket found."""

    def __init__(self, msg, bracket=None):
        super().__init__(msg)
        self.bracket = bracket


@dataclass(frozen=True)
class FetParams:
    """Compact square-law + subthreshold FET model."""

    vt: float = 0.35         # threshold voltage, V
    k: float = 3.5e-2        # transconductance factor, A/V^2
    ss: float = 0.080        # subthreshold swing, V/decade
    i0: float = 1e-6         # leakage prefactor at vgs = vt, A
    cgg_inv: float = 4.5     # gate capacitance in inversion, fF
    cgg_dep: float = 0.035   # gate capacitance in depletion, fF
    cgd_par: float = 0.004   # parasitic gate-drain coupling, fF

    def __post_init__(self):
        if not (0.0 <= self.vt <= 1.0):
            raise ValueError("vt outside plausible 0-1 V band")
        if min(self.k, self.i0, self.cgg_inv, self.cgg_dep, self.cgd_par) < 0:
            raise ValueError("k, i0 and capacitances must be non-negative")
        if self.ss < 0.060:
            raise ValueError("subthreshold swing below 60 mV/dec")


@dataclass(frozen=True)
class ResistorParams:
    r_nominal: float   # kOhm
    n_dopants: float = 100.0

    def __post_init__(self):
        if self.r_nominal <= 0 or self.n_dopants <= 0:
            raise ValueError("r_nominal and n_dopants must be positive")

    @property
    def conductance_us(self) -> float:
        """Conductance in microsiemens."""
        return 1e3 / self.r_nominal


@dataclass(frozen=True)
class ProgramPulse:
    target: str          # "program_line" or "inout_line"
    amplitude: float     # V
    rise: float          # s
    width: float         # s
    fall: float          # s
    select_on: bool = True

    def __post_init__(self):
        if self.target not in ("program_line", "inout_line"):
            raise ValueError(f"unknown pulse target {self.target!r}")
        if min(self.rise, self.width, self.fall) <= 0:
            raise ValueError("rise, width and fall must be positive")


@dataclass(frozen=True)
class ProgramProtocol:
    """Pulse amplitudes/timing plus select-line drive for program/erase."""

    amplitude: float = 2.5
    rise: float = 10e-9
    width: float = 100e-9
    fall: float = 10e-9
    gap: float = 200e-9       # settle time at zero stack voltage after a pulse
    v_select: float = 3.3
    vt_select: float = 0.35
    dt: float = 0.5e-9

    def program_pulse(self, select_on=True) -> ProgramPulse:
        return ProgramPulse("program_line", self.amplitude, self.rise,
                            self.width, self.fall, select_on)

    def erase_pulse(self, select_on=True) -> ProgramPulse:
        return ProgramPulse("inout_line", self.amplitude, self.rise,
                            self.width, self.fall, select_on)


@dataclass(frozen=True)
class StackSolution:
    v_cap: float     # voltage across the FeCap, V
    v_g: float       # FET gate-node voltage, V
    q: float         # common charge, fC
    residual: float  # charge-balance residual, fC


def fet_ids(params: FetParams, vgs: float, vds: float) -> float:
    """Drain current of the compact model, amps.

    Subthreshold leakage and square-law drift add, which keeps the model
    continuous across the threshold; below vt the exponential term
    dominates, above it the drift term does.
    """
    if vds < 0:
        # Source/drain swap for reverse bias.
        return -fet_ids(params, vgs - vds, -vds)
    if vds == 0:
        return 0.0
    exp_arg = (vgs - params.vt) / params.ss
    leak = params.i0 * 10.0 ** min(exp_arg, 0.0) * (1.0 - math.exp(-vds / V_THERMAL))
    vov = vgs - params.vt
    if vov <= 0:
        drift = 0.0
    elif vds < vov:
        drift = params.k * (vov * vds - 0.5 * vds * vds)
    else:
        drift = 0.5 * params.k * vov * vov
    return leak + drift


def fet_gate_charge(params: FetParams, vg: float) -> float:
    """Gate charge in fC, referenced to Q(0) = 0.

    Capacitance steps from cgg_dep to cgg_inv across a linear 50 mV
    transition window centred on vt, so Q is C1.
    """
    return _gate_charge_raw(params, vg) - _gate_charge_raw(params, 0.0)


def _gate_charge_raw(params: FetParams, vg: float) -> float:
    w = GATE_CAP_TRANSITION_V
    lo = params.vt - 0.5 * w
    hi = params.vt + 0.5 * w
    dc = params.cgg_inv - params.cgg_dep
    if vg <= lo:
        return params.cgg_dep * vg
    if vg >= hi:
        # depletion part + ramp part + inversion part
        return (params.cgg_dep * lo
                + params.cgg_dep * w + 0.5 * dc * w
                + params.cgg_inv * (vg - hi))
    x = vg - lo
    return params.cgg_dep * lo + params.cgg_dep * x + 0.5 * dc * x * x / w


def fet_gate_capacitance(params: FetParams, vg: float) -> float:
    """dQ/dvg in fF."""
    w = GATE_CAP_TRANSITION_V
    lo = params.vt - 0.5 * w
    if vg <= lo:
        return params.cgg_dep
    if vg >= params.vt + 0.5 * w:
        return params.cgg_inv
    return params.cgg_dep + (params.cgg_inv - params.cgg_dep) * (vg - lo) / w


def solve_stack(cap: FeCapParams, state: FeCapState, fet: FetParams,
                v_app: float, frozen: bool = False) -> StackSolution:
    """Self-consistent division of ``v_app`` between FeCap and FET gate.

    ``frozen`` keeps the ferroelectric polarization at the state's current
    internal voltage (transient co-simulation); otherwise the polarization
    follows the active branch curve at the capacitor voltage itself
    (quasi-static rest-point solve).
    """
    area_fc = cap.area * _FC_PER_UCCM2_NM2
    p_frozen = fecap.polarization(cap, state) if frozen else None

    def residual(v_g: float) -> float:
        v_cap = v_app - v_g
        p = p_frozen if frozen else fecap.polarization(cap, state, v_cap)
        q_cap = (p + cap.c_lin * v_cap) * area_fc
        return q_cap - fet_gate_charge(fet, v_g)

    span = abs(v_app) + 5.0
    lo, hi = -span, span
    f_lo, f_hi = residual(lo), residual(hi)
    if f_lo < 0 or f_hi > 0:
        raise SolverError("charge residual not bracketed", bracket=(lo, hi))

    v_g = 0.0 if lo < 0.0 < hi else 0.5 * (lo + hi)
    f = residual(v_g)
    for _ in range(MAX_NEWTON_ITER):
        if abs(f) <= CHARGE_TOL_FC:
            break
        # Maintain the bracket (residual is monotone decreasing in v_g).
        if f > 0:
            lo = v_g
        else:
            hi = v_g
        h = 1e-6 * max(1.0, abs(v_g))
        dfdv = (residual(v_g + h) - residual(v_g - h)) / (2 * h)
        if dfdv < 0:
            v_new = v_g - f / dfdv
        else:
            v_new = 0.5 * (lo + hi)
        if not (lo < v_new < hi):
            v_new = 0.5 * (lo + hi)
        v_g, f = v_new, residual(v_new)
    else:
        raise SolverError("charge balance did not converge", bracket=(lo, hi))
    return StackSolution(v_cap=v_app - v_g, v_g=v_g,
                         q=fet_gate_charge(fet, v_g), residual=f)


def loadline_rest_point(cap: FeCapParams, state: FeCapState,
                        fet: FetParams) -> StackSolution:
    """Post-pulse rest point: stack voltage zero, P-V branch meets load line."""
    return solve_stack(cap, state, fet, 0.0, frozen=False)


@dataclass
class CellStack:
    """One FeCap + FET gate stack with its mutable ferroelectric state."""

    cap: FeCapParams
    fet: FetParams
    state: FeCapState = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.state is None:
            self.state = fecap.initial_state(self.cap)

    def copy(self) -> "CellStack":
        return CellStack(self.cap, self.fet, self.state.copy())


@dataclass
class TransientResult:
    time_s: np.ndarray
    v_prog_V: np.ndarray
    v_inout_V: np.ndarray
    v_sel_V: np.ndarray
    v_cap_V: np.ndarray
    v_g_V: np.ndarray
    p_uC_cm2: np.ndarray

    COLUMNS = ("time_s", "v_prog_V", "v_inout_V", "v_sel_V",
               "v_cap_V", "v_g_V", "P_uC_cm2")

    def as_columns(self) -> list[np.ndarray]:
        return [self.time_s, self.v_prog_V, self.v_inout_V, self.v_sel_V,
                self.v_cap_V, self.v_g_V, self.p_uC_cm2]

    @property
    def rest_v_g(self) -> float:
        return float(self.v_g_V[-1])


def _pulse_waveform(pulse: ProgramPulse, protocol: ProgramProtocol, dt: float):
    """Per-step (v_prog, v_inout, v_sel) samples of one pulse plus its gap."""
    n_rise = max(1, round(pulse.rise / dt))
    n_width = max(1, round(pulse.width / dt))
    n_fall = max(1, round(pulse.fall / dt))
    n_gap = max(1, round(protocol.gap / dt))
    amp = pulse.amplitude
    shape = np.concatenate([
        np.linspace(0.0, amp, n_rise + 1)[1:],
        np.full(n_width, amp),
        np.linspace(amp, 0.0, n_fall + 1)[1:],
        np.zeros(n_gap),
    ])
    zeros = np.zeros_like(shape)
    if pulse.target == "program_line":
        v_prog, v_inout = shape, zeros
    else:
        v_prog, v_inout = zeros, shape
    v_sel = np.full_like(shape, protocol.v_select if pulse.select_on else 0.0)
    return v_prog, v_inout, v_sel


def transient(cell: CellStack, pulses: list[ProgramPulse],
              protocol: ProgramProtocol | None = None,
              dt: float | None = None) -> TransientResult:
    """Time-stepped co-simulation of the stack under a pulse sequence.

    The select transistor acts as a pass gate: the stack sees at most
    v_select - vt_select, and nothing at all when select is off during the
    pulse.
    """
    protocol = protocol or ProgramProtocol()
    dt = protocol.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt > cell.cap.max_dt:
        raise ValueError(f"dt exceeds integrator bound {cell.cap.max_dt:.3e} s")

    clamp = protocol.v_select - protocol.vt_select
    cols: list[list[float]] = [[] for _ in range(6)]
    sol = solve_stack(cell.cap, cell.state, cell.fet, 0.0, frozen=True)
    v_cap = sol.v_cap
    for pulse in pulses:
        v_prog, v_inout, v_sel = _pulse_waveform(pulse, protocol, dt)
        if not pulse.select_on:
            # Deselected cell is cut off from the drive: state untouched.
            n = v_prog.size
            cols[0] += list(v_prog)
            cols[1] += list(v_inout)
            cols[2] += list(v_sel)
            cols[3] += [v_cap] * n
            cols[4] += [sol.v_g] * n
            cols[5] += [fecap.polarization(cell.cap, cell.state)] * n
            continue
        for k in range(v_prog.size):
            fecap.step_dynamics(cell.state, cell.cap, v_cap, dt)
            raw = v_prog[k] - v_inout[k]
            v_stack = math.copysign(min(abs(raw), clamp), raw) if raw else 0.0
            sol = solve_stack(cell.cap, cell.state, cell.fet, v_stack,
                              frozen=True)
            v_cap = sol.v_cap
            cols[0].append(v_prog[k])
            cols[1].append(v_inout[k])
            cols[2].append(v_sel[k])
            cols[3].append(v_cap)
            cols[4].append(sol.v_g)
            cols[5].append(fecap.polarization(cell.cap, cell.state))
    n = len(cols[0])
    t = np.arange(1, n + 1) * dt
    return TransientResult(t, *(np.asarray(c) for c in cols))


def program_erase_rest_points(cap: FeCapParams, fet: FetParams,
                              protocol: ProgramProtocol | None = None,
                              cycles: int = 1) -> tuple[float, float]:
    """(programmed, erased) rest-point gate voltages after cycling.

    Runs ``cycles`` erase/program cycles to reach the steady-state loop,
    then one more erase and program, reading the settled gate voltage after
    each.
    """
    protocol = protocol or ProgramProtocol()
    cell = CellStack(cap, fet)
    warmup = []
    for _ in range(cycles):
        warmup += [protocol.erase_pulse(), protocol.program_pulse()]
    if warmup:
        transient(cell, warmup, protocol)
    v_erase = transient(cell, [protocol.erase_pulse()], protocol).rest_v_g
    v_prog = transient(cell, [protocol.program_pulse()], protocol).rest_v_g
    return v_prog, v_erase


def area_sweep(cap_template: FeCapParams, fet: FetParams, areas,
               protocol: ProgramProtocol | None = None, cycles: int = 3):
    """Programming window vs FeCap area.

    Returns a list of (area_nm2, v_prog, v_erase, delta_v) rows.
    """
    areas = list(areas)
    if any(a <= 0 for a in areas) or any(b <= a for a, b in zip(areas, areas[1:])):
        raise ValueError("areas must be positive and ascending")
    rows = []
    for area in areas:
        cap = replace(cap_template, area=area)
        v_prog, v_erase = program_erase_rest_points(cap, fet, protocol, cycles)
        rows.append((area, v_prog, v_erase, v_prog - v_erase))
    return rows


def vt_band(fet: FetParams, v_prog: float, v_erase: float,
            v_in_max: float) -> tuple[float, float] | None:
    """Allowed FET threshold interval given the two rest points.

    The programmed gate must overdrive Vt by 100 mV at every input; the
    erased gate must stay 200 mV under it.  The erased gate rises with the
    input through the drain-gate capacitive divider (the erased branch
    carries no current, so the full input lands on the drain).
    """
    if v_prog <= v_erase:
        raise ValueError("v_prog must exceed v_erase")
    divider = fet.cgd_par / (fet.cgd_par + fet.cgg_dep) if fet.cgd_par else 0.0
    # Programmed branch: IR drop across the resistor keeps the drain nearly
    # still, so the minimum over inputs is the zero-input value.
    vt_max = v_prog - 0.1
    vt_min = v_erase + max(0.0, v_in_max) * divider + 0.2
    if vt_min > vt_max:
        return None
    return (vt_min, vt_max)


def resistor_iv(params: ResistorParams, v: float) -> float:
    """Ohmic current in amps (r_nominal is in kOhm)."""
    return v / (params.r_nominal * 1e3)


def sample_resistor(params: ResistorParams,
                    rng: np.random.Generator) -> ResistorParams:
    """Random-dopant-fluctuation draw: conductance scales with N/<N>.

    A zero dopant draw leaves the branch open (infinite resistance).
    """
    n = rng.poisson(params.n_dopants)
    if n == 0:
        return replace(params, r_nominal=math.inf)
    scale = n / params.n_dopants
    return replace(params, r_nominal=params.r_nominal / scale)


DEFAULT_FET = FetParams()
DEFAULT_RESISTOR = ResistorParams(r_nominal=60.0, n_dopants=100.0)
