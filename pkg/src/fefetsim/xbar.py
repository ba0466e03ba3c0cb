"""Multi-bit resistive weight cells and differential crossbar arrays.

A weight cell is a binary ladder of resistor branches (R0, R0/2, R0/4, ...),
each gated by a FeFET whose programmed/erased gate rest voltage switches the
branch on or off.  Two cells per weight encode signed values differentially;
columns of cell pairs form a crossbar computing an analog multiply-accumulate
into virtual-ground outputs.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from . import circuit, fecap
from .circuit import CellStack, FetParams, ProgramProtocol, ResistorParams

R0_DEFAULT_KOHM = 60.0
READ_V_DEFAULT = 0.3       # nominal read voltage (design assumption)
ON_CLASSIFY_V = 0.050      # bias for branch ON/OFF classification
ON_CLASSIFY_FRACTION = 0.1  # branch is ON above this fraction of g0


@dataclass
class WeightBranch:
    """One resistor + FeFET ladder branch."""

    resistor: ResistorParams
    fet: FetParams
    stack: CellStack
    _v_gate: float | None = field(default=None, repr=False)

    @property
    def v_gate(self) -> float:
        """FET gate rest voltage, resolved lazily from the FeCap state."""
        if self._v_gate is None:
            sol = circuit.loadline_rest_point(self.stack.cap, self.stack.state,
                                              self.stack.fet)
            self._v_gate = sol.v_g
        return self._v_gate

    def invalidate(self):
        self._v_gate = None


@dataclass
class WeightCell:
    branches: list[WeightBranch]

    def __post_init__(self):
        if len(self.branches) < 1:
            raise ValueError("a weight cell needs at least one branch")

    @property
    def n_bits(self) -> int:
        return len(self.branches)

    @property
    def g0(self) -> float:
        """Base (LSB) conductance in µS, ignoring FET series resistance."""
        return self.branches[0].resistor.conductance_us


def make_cell(n_bits: int = 2, r0_kohm: float = R0_DEFAULT_KOHM,
              fet: FetParams | None = None,
              cap: fecap.FeCapParams | None = None,
              resistors: list[ResistorParams] | None = None) -> WeightCell:
    """Binary-ladder cell: branch i carries R0/2^i.

    ``resistors`` overrides the nominal ladder (e.g. with sampled
    variability) but must still be one entry per bit.
    """
    if n_bits < 1:
        raise ValueError("n_bits must be at least 1")
    fet = fet or circuit.DEFAULT_FET
    cap = cap or fecap.DEFAULT_CALIBRATION
    if resistors is None:
        resistors = [ResistorParams(r_nominal=r0_kohm / 2**i)
                     for i in range(n_bits)]
    elif len(resistors) != n_bits:
        raise ValueError("need one resistor per bit")
    return WeightCell([WeightBranch(r, fet, CellStack(cap, fet))
                       for r in resistors])


def ideal_conductance(bits, g0: float) -> float:
    """Ideal binary-ladder conductance in µS: g0 · Σ b_i·2^i."""
    return g0 * sum(int(bool(b)) << i for i, b in enumerate(bits))


def branch_current(branch: WeightBranch, v_in: float) -> float:
    """Series resistor–FeFET branch current in amps at input bias v_in.

    The internal node between resistor and FET drain is solved by bracketed
    root finding; the residual is strictly monotone in the node voltage.
    """
    if v_in == 0.0:
        return 0.0
    if math.isinf(branch.resistor.r_nominal):
        return 0.0
    r_ohm = branch.resistor.r_nominal * 1e3
    vg = branch.v_gate

    def residual(x):
        return (v_in - x) / r_ohm - circuit.fet_ids(branch.fet, vg, x)

    lo, hi = (0.0, v_in) if v_in > 0 else (v_in, 0.0)
    f_lo, f_hi = residual(lo), residual(hi)
    if f_lo == 0.0:
        x = lo
    elif f_hi == 0.0:
        x = hi
    elif f_lo * f_hi > 0:
        # Residual did not change sign: essentially no conduction, the node
        # floats to the input rail.
        x = v_in
    else:
        x = brentq(residual, lo, hi, xtol=1e-12, rtol=1e-14)
    return (v_in - x) / r_ohm


def cell_current(cell: WeightCell, v_in: float) -> float:
    """Total cell current in amps (program lines grounded, output at 0 V)."""
    return sum(branch_current(b, v_in) for b in cell.branches)


def effective_weight(cell: WeightCell, v_in: float) -> float:
    """Apparent conductance I/V in µS."""
    if v_in == 0.0:
        raise ValueError("effective weight is undefined at zero input")
    return cell_current(cell, v_in) / v_in * 1e6


def branch_is_on(branch: WeightBranch, g0: float) -> bool:
    g_us = branch_current(branch, ON_CLASSIFY_V) / ON_CLASSIFY_V * 1e6
    return g_us > g0 * ON_CLASSIFY_FRACTION


def read_back_bits(cell: WeightCell) -> list[int]:
    g0 = cell.g0
    return [int(branch_is_on(b, g0)) for b in cell.branches]


def encode_differential(code: int, n_bits: int) -> tuple[list[int], list[int]]:
    """Sign-magnitude split of a signed code onto the pos/neg cell pair."""
    limit = 2**n_bits - 1
    if abs(code) > limit:
        raise ValueError(f"code {code} out of range for {n_bits} bits")
    mag = [(abs(code) >> i) & 1 for i in range(n_bits)]
    zero = [0] * n_bits
    return (mag, zero) if code >= 0 else (zero, mag)


def decode_differential(pos_bits, neg_bits) -> int:
    pos = sum(int(bool(b)) << i for i, b in enumerate(pos_bits))
    neg = sum(int(bool(b)) << i for i, b in enumerate(neg_bits))
    return pos - neg


@dataclass
class CrossbarArray:
    """Grid of differential weight-cell pairs, addressed (row, column)."""

    n_inputs: int
    n_outputs: int
    cells: list[list[tuple[WeightCell, WeightCell]]]

    @property
    def n_bits(self) -> int:
        return self.cells[0][0][0].n_bits


def make_array(n_inputs: int, n_outputs: int, n_bits: int = 2,
               r0_kohm: float = R0_DEFAULT_KOHM,
               fet: FetParams | None = None,
               cap: fecap.FeCapParams | None = None) -> CrossbarArray:
    if n_inputs < 1 or n_outputs < 1:
        raise ValueError("array dimensions must be positive")
    cells = [[(make_cell(n_bits, r0_kohm, fet, cap),
               make_cell(n_bits, r0_kohm, fet, cap))
              for _ in range(n_outputs)] for _ in range(n_inputs)]
    return CrossbarArray(n_inputs, n_outputs, cells)


def _prototype_states(cap: fecap.FeCapParams, fet: FetParams,
                      protocol: ProgramProtocol):
    """Erased-only and erased-then-programmed FeCap states.

    Every branch in an array sees one of exactly two pulse histories (the
    select gate makes foreign program pulses exact no-ops), so the two
    transients are run once and copied.
    """
    proto_cell = CellStack(cap, fet)
    circuit.transient(proto_cell, [protocol.erase_pulse()], protocol)
    erased = proto_cell.state
    prog_cell = CellStack(cap, fet, erased.copy())
    circuit.transient(prog_cell, [protocol.program_pulse()], protocol)
    return erased, prog_cell.state


def program_array(array: CrossbarArray, codes,
                  protocol: ProgramProtocol | None = None) -> CrossbarArray:
    """Flash-erase then program the array to the given signed code matrix.

    ``codes`` is (n_inputs, n_outputs).  Programming proceeds column by
    column: the column's select line is asserted and the row program lines
    pulse the bits that must be set; deselected columns are untouched.
    """
    protocol = protocol or ProgramProtocol()
    codes = np.asarray(codes)
    if codes.shape != (array.n_inputs, array.n_outputs):
        raise ValueError("code matrix shape does not match the array")
    limit = 2**array.n_bits - 1
    if np.any(np.abs(codes) > limit):
        raise ValueError("weight code out of range")

    ref = array.cells[0][0][0].branches[0].stack
    erased, programmed = _prototype_states(ref.cap, ref.fet, protocol)

    for j in range(array.n_outputs):          # one column at a time
        for i in range(array.n_inputs):
            pos_bits, neg_bits = encode_differential(int(codes[i][j]),
                                                     array.n_bits)
            pos_cell, neg_cell = array.cells[i][j]
            for cell, bits in ((pos_cell, pos_bits), (neg_cell, neg_bits)):
                for branch, bit in zip(cell.branches, bits):
                    state = programmed if bit else erased
                    branch.stack.state = state.copy()
                    branch.invalidate()
    return array


def infer(array: CrossbarArray, v_in) -> np.ndarray:
    """Output currents (amps) with outputs held at virtual ground."""
    v_in = np.asarray(v_in, dtype=float)
    if v_in.shape != (array.n_inputs,):
        raise ValueError("input vector length does not match the array")
    out = np.zeros(array.n_outputs)
    for j in range(array.n_outputs):
        acc = 0.0
        for i in range(array.n_inputs):
            pos, neg = array.cells[i][j]
            acc += cell_current(pos, v_in[i]) - cell_current(neg, v_in[i])
        out[j] = acc
    return out


def infer_ideal(array: CrossbarArray, v_in) -> np.ndarray:
    """Ideal-branch-limit inference: read-back codes drive G·v exactly."""
    v_in = np.asarray(v_in, dtype=float)
    if v_in.shape != (array.n_inputs,):
        raise ValueError("input vector length does not match the array")
    g = np.zeros((array.n_outputs, array.n_inputs))
    for i in range(array.n_inputs):
        for j in range(array.n_outputs):
            pos, neg = array.cells[i][j]
            g_pos = ideal_conductance(read_back_bits(pos), pos.g0)
            g_neg = ideal_conductance(read_back_bits(neg), neg.g0)
            g[j, i] = g_pos - g_neg
    return g @ v_in * 1e-6


def iv_sweep(n_bits: int, voltages, r0_kohm: float = R0_DEFAULT_KOHM,
             fet: FetParams | None = None,
             cap: fecap.FeCapParams | None = None,
             protocol: ProgramProtocol | None = None):
    """Per-code I-V table: rows of (v_in, code, i_A, g_uS, g_ideal_uS)."""
    protocol = protocol or ProgramProtocol()
    fet = fet or circuit.DEFAULT_FET
    cap = cap or fecap.DEFAULT_CALIBRATION
    erased, programmed = _prototype_states(cap, fet, protocol)
    rows = []
    for code in range(2**n_bits):
        cell = make_cell(n_bits, r0_kohm, fet, cap)
        bits = [(code >> i) & 1 for i in range(n_bits)]
        for branch, bit in zip(cell.branches, bits):
            branch.stack.state = (programmed if bit else erased).copy()
            branch.invalidate()
        g_ideal = ideal_conductance(bits, cell.g0)
        for v in voltages:
            i = cell_current(cell, float(v))
            g = i / v * 1e6 if v else 0.0
            rows.append((float(v), code, i, g, g_ideal))
    return rows
