"""Preisach turning-point model of a ferroelectric capacitor.

The quasi-static polarization is a tanh "raw response" rescaled so that it
passes through the currently active pair of turning points.  Memory is a
stack of turning points with the classical wiping rule.  The internal
voltage that drives the quasi-static curve lags the applied voltage through
a second-order delay, which is what produces loop distortion at high drive
frequency.

Units used throughout: volts, seconds, uC/cm^2 for polarization density,
uF/cm^2 for linear capacitance density, nm^2 for area, fC for charge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

# Charge conversion: 1 uC/cm^2 * 1 nm^2 = 1e-5 fC
_FC_PER_UCCM2_NM2 = 1e-5

INCREASING = +1
DECREASING = -1

# Turning points closer than this (in volts) are treated as re-visits of an
# existing reversal rather than new nested points.
_TP_MERGE_EPS = 1e-9


class ModelDegeneracyError(ValueError):
    """Active turning-point pair cannot support interpolation."""


@dataclass(frozen=True)
class FeCapParams:
    """Calibration of one ferroelectric capacitor."""

    theta_plus: float      # polarization scale, uC/cm^2
    theta_minus: float
    vc_plus: float         # coercive voltages, V
    vc_minus: float
    vsc_plus: float        # voltage scales, V
    vsc_minus: float
    omega0: float          # natural angular frequency, rad/s
    gamma: float           # damping ratio
    c_lin: float           # non-ferroelectric capacitance, uF/cm^2
    area: float            # nm^2

    def __post_init__(self):
        if self.theta_plus <= 0 or self.theta_minus <= 0:
            raise ValueError("polarization scales must be positive")
        if self.vsc_plus <= 0 or self.vsc_minus <= 0:
            raise ValueError("voltage scales must be positive")
        if self.vc_plus < 0 or self.vc_minus < 0:
            raise ValueError("coercive voltages must be non-negative")
        if self.omega0 <= 0 or self.gamma <= 0:
            raise ValueError("omega0 and gamma must be positive")
        if self.c_lin < 0:
            raise ValueError("c_lin must be non-negative")
        if self.area <= 0:
            raise ValueError("area must be positive")

    @property
    def v_saturation(self) -> float:
        """Voltage treated as full saturation for the outer loop anchors."""
        return max(self.vc_plus, self.vc_minus) + 8.0 * max(self.vsc_plus, self.vsc_minus)

    @property
    def f0(self) -> float:
        return self.omega0 / (2.0 * math.pi)

    @property
    def max_dt(self) -> float:
        """Step-size bound for the internal-voltage integrator."""
        return 0.1 / (self.gamma * self.omega0)


@dataclass(frozen=True)
class TurningPoint:
    v: float   # internal voltage at the reversal, V
    p: float   # polarization density at the reversal, uC/cm^2
    is_upper: bool = True  # True if created at a maximum of v_int


def raw_response(params: FeCapParams, branch: int, v_int: float) -> float:
    """Unscaled tanh branch response.

    The decreasing branch is the upper curve (it switches near -Vc), the
    increasing branch is the lower curve (switching near +Vc).
    """
    if branch == DECREASING:
        return params.theta_plus * math.tanh((v_int + params.vc_plus) / params.vsc_plus)
    return params.theta_minus * math.tanh((v_int - params.vc_minus) / params.vsc_minus)


@dataclass
class FeCapState:
    """Mutable state of one capacitor: internal voltage plus memory stack.

    ``history`` holds the outermost saturation pair at the bottom followed by
    strictly nested reversal points in the order they were created.  Before
    the first real reversal the curve is anchored through ``virgin`` so that
    the simulation starts at zero polarization.
    """

    v_int: float
    v_int_rate: float
    branch: int
    history: list[TurningPoint]
    virgin: TurningPoint | None = None

    def copy(self) -> "FeCapState":
        return FeCapState(self.v_int, self.v_int_rate, self.branch,
                          list(self.history), self.virgin)


def initial_state(params: FeCapParams) -> FeCapState:
    """Zero-charge rest state with the outer saturation pair as history."""
    vs = params.v_saturation
    lo = TurningPoint(-vs, raw_response(params, DECREASING, -vs), is_upper=False)
    hi = TurningPoint(vs, raw_response(params, INCREASING, vs), is_upper=True)
    return FeCapState(v_int=0.0, v_int_rate=0.0, branch=DECREASING,
                      history=[lo, hi], virgin=TurningPoint(0.0, 0.0))


def active_pair(state: FeCapState, v_int: float | None = None) -> tuple[TurningPoint, TurningPoint]:
    """Innermost turning-point pair enclosing ``v_int`` (default: state's)."""
    v = state.v_int if v_int is None else v_int
    if state.virgin is not None:
        if state.branch == DECREASING:
            return state.history[0], state.virgin
        return state.virgin, state.history[1]
    lo = state.history[0]
    hi = state.history[1]
    for tp in reversed(state.history):
        if tp.v <= v + _TP_MERGE_EPS and tp.v > lo.v:
            lo = tp
        if tp.v >= v - _TP_MERGE_EPS and tp.v < hi.v:
            hi = tp
    return lo, hi


def polarization(params: FeCapParams, state: FeCapState, v_int: float | None = None) -> float:
    """Polarization density on the current branch, through the active pair."""
    v = state.v_int if v_int is None else v_int
    tp_i, tp_j = active_pair(state, v)
    if tp_j.v <= tp_i.v:
        # Coincident pair: nothing to interpolate between.
        return tp_j.p
    f = raw_response(params, state.branch, v)
    f_j = raw_response(params, state.branch, tp_j.v)
    f_i = raw_response(params, state.branch, tp_i.v)
    denom = f_j - f_i
    if abs(denom) < 1e-12 * params.theta_plus:
        # Near-degenerate raw span: fall back to linear interpolation in v.
        t = (v - tp_i.v) / (tp_j.v - tp_i.v)
        return tp_i.p + t * (tp_j.p - tp_i.p)
    return (f - f_j) * (tp_j.p - tp_i.p) / denom + tp_j.p


def total_charge(params: FeCapParams, state: FeCapState, v_app: float) -> float:
    """Total capacitor charge in fC (ferroelectric + linear parts).

    The ferroelectric part responds through the delayed internal voltage;
    the linear part follows the instantaneous applied voltage.
    """
    p = polarization(params, state)
    return (p + params.c_lin * v_app) * params.area * _FC_PER_UCCM2_NM2


def _wipe(state: FeCapState, v: float) -> None:
    """Remove turning points swept past by motion to voltage ``v``.

    Passing below a lower anchor (or above an upper one) erases it together
    with every point created after it, which are all nested inside the
    excursion being overwritten.
    """
    if state.virgin is not None:
        return
    h = state.history
    if state.branch == DECREASING:
        for idx in range(2, len(h)):
            if not h[idx].is_upper and v < h[idx].v:
                del h[idx:]
                break
    else:
        for idx in range(2, len(h)):
            if h[idx].is_upper and v > h[idx].v:
                del h[idx:]
                break


def record_turning_point(state: FeCapState, tp: TurningPoint) -> FeCapState:
    """Push a reversal point, wiping any points it sweeps past.

    Re-visits of an existing extremum (periodic drive) replace the stored
    point instead of nesting inside it, so the stack stays bounded.
    """
    h = state.history
    state.virgin = None
    if tp.is_upper:
        while len(h) > 2:
            if h[-1].is_upper and h[-1].v <= tp.v + _TP_MERGE_EPS:
                h.pop()
            elif (not h[-1].is_upper and len(h) > 3
                  and h[-2].is_upper and h[-2].v <= tp.v + _TP_MERGE_EPS):
                # Closed excursion: the overtaken maximum and the minimum
                # recorded inside it are erased together.
                h.pop()
                h.pop()
            else:
                break
    else:
        while len(h) > 2:
            if not h[-1].is_upper and h[-1].v >= tp.v - _TP_MERGE_EPS:
                h.pop()
            elif (h[-1].is_upper and len(h) > 3
                  and not h[-2].is_upper and h[-2].v >= tp.v - _TP_MERGE_EPS):
                h.pop()
                h.pop()
            else:
                break
    h.append(tp)
    return state


def step_dynamics(state: FeCapState, params: FeCapParams, v_app: float, dt: float) -> FeCapState:
    """Advance the internal voltage one step of the second-order delay.

    Uses the exact linear-system update for a constant applied voltage over
    the step.  A sign change of the rate marks a reversal: the extremum is
    located by linear interpolation of the rate zero crossing, recorded as a
    turning point, and the branch flips.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0 = state.v_int - v_app
    u0 = state.v_int_rate
    m11, m12, m21, m22 = _propagator(params, dt)
    x1 = m11 * x0 + m12 * u0
    u1 = m21 * x0 + m22 * u0
    v_new = x1 + v_app
    rate_new = u1

    reversal = False
    if state.v_int_rate > 0.0 and rate_new < 0.0:
        reversal = True
    elif state.v_int_rate < 0.0 and rate_new > 0.0:
        reversal = True
    elif state.v_int_rate == 0.0 and rate_new != 0.0:
        # Starting to move from rest counts as a reversal only if it goes
        # against the current branch.
        reversal = (rate_new > 0) != (state.branch == INCREASING)

    if reversal:
        u_a = state.v_int_rate
        frac = 0.0 if (u_a - rate_new) == 0 else u_a / (u_a - rate_new)
        frac = min(max(frac, 0.0), 1.0)
        # Trapezoid of the rate from u_a down to zero over the sub-step.
        v_rev = state.v_int + 0.5 * frac * dt * u_a
        p_rev = polarization(params, state, v_rev)
        is_upper = rate_new < 0  # rate turning negative means a maximum
        record_turning_point(state, TurningPoint(v_rev, p_rev, is_upper))
        state.branch = INCREASING if rate_new > 0 else DECREASING

    state.v_int = v_new
    state.v_int_rate = rate_new
    _wipe(state, v_new)
    return state


def _propagator(params: FeCapParams, dt: float) -> tuple[float, float, float, float]:
    """exp(A*dt) for xdot=u, udot=-w^2 x - 2 g w u, in homogeneous coords."""
    w = params.omega0
    g = params.gamma
    if abs(g - 1.0) < 1e-12:
        e = math.exp(-w * dt)
        m11 = e * (1.0 + w * dt)
        m12 = e * dt
        m21 = -e * w * w * dt
        m22 = e * (1.0 - w * dt)
    elif g < 1.0:
        wd = w * math.sqrt(1.0 - g * g)
        e = math.exp(-g * w * dt)
        c = math.cos(wd * dt)
        s = math.sin(wd * dt)
        m11 = e * (c + g * w * s / wd)
        m12 = e * s / wd
        m21 = -e * w * w * s / wd
        m22 = e * (c - g * w * s / wd)
    else:
        wd = w * math.sqrt(g * g - 1.0)
        e = math.exp(-g * w * dt)
        c = math.cosh(wd * dt)
        s = math.sinh(wd * dt)
        m11 = e * (c + g * w * s / wd)
        m12 = e * s / wd
        m21 = -e * w * w * s / wd
        m22 = e * (c - g * w * s / wd)
    return m11, m12, m21, m22


@dataclass
class Trace:
    """Sampled trajectory of a sweep."""

    time_s: np.ndarray
    v_app_V: np.ndarray
    v_int_V: np.ndarray
    p_uC_cm2: np.ndarray
    q_fC: np.ndarray

    COLUMNS = ("time_s", "v_app_V", "v_int_V", "P_uC_cm2", "Q_fC")

    def as_columns(self) -> list[np.ndarray]:
        return [self.time_s, self.v_app_V, self.v_int_V, self.p_uC_cm2, self.q_fC]


def quasistatic_sweep(params: FeCapParams, times: np.ndarray, v_app: np.ndarray,
                      state: FeCapState | None = None) -> Trace:
    """Drive the capacitor along a sampled waveform and record P and Q.

    The waveform sampling must respect the integrator step bound.
    """
    times = np.asarray(times, dtype=float)
    v_app = np.asarray(v_app, dtype=float)
    if times.shape != v_app.shape or times.ndim != 1 or times.size < 2:
        raise ValueError("times and v_app must be matching 1-D arrays")
    dts = np.diff(times)
    if np.any(dts <= 0):
        raise ValueError("times must be strictly increasing")
    if np.any(dts > params.max_dt * (1 + 1e-9)):
        raise ValueError(
            f"waveform step exceeds integrator bound {params.max_dt:.3e} s")
    if state is None:
        state = initial_state(params)
    n = times.size
    v_int = np.empty(n)
    p = np.empty(n)
    q = np.empty(n)
    v_int[0] = state.v_int
    p[0] = polarization(params, state)
    q[0] = total_charge(params, state, v_app[0])
    for k in range(1, n):
        step_dynamics(state, params, v_app[k], times[k] - times[k - 1])
        v_int[k] = state.v_int
        p[k] = polarization(params, state)
        q[k] = total_charge(params, state, v_app[k])
    return Trace(times, v_app, v_int, p, q)


DEFAULT_CALIBRATION = FeCapParams(
    theta_plus=20.0, theta_minus=20.0,
    vc_plus=1.0, vc_minus=1.0,
    vsc_plus=0.35, vsc_minus=0.35,
    omega0=2.0 * math.pi * 25e6, gamma=1.0,
    c_lin=2.0, area=2200.0,
)
