"""Quantized-MLP evaluation against the crossbar weight-cell model.

Covers MNIST ingestion (IDX), software training of a single-hidden-layer
MLP, signed uniform weight quantization with an optimized clipping window,
hardware inference (differential weight cells, binarized hidden
activations), random-dopant-fluctuation noise Monte Carlo, and
hardware-aware L2 regularization (model selection over the lambda x window
grid using the full hardware forward pass).
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import circuit, fecap, xbar

MNIST_DIR_ENV = "FEFETSIM_MNIST_DIR"
DEFAULT_MNIST_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist"

READ_V = xbar.READ_V_DEFAULT

WEIGHTS_MAGIC = b"FWTS"
WEIGHTS_VERSION = 1


# ---------------------------------------------------------------------------
# MNIST / IDX
# ---------------------------------------------------------------------------

class IdxError(ValueError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


def load_idx(path) -> np.ndarray:
    """Parse one (optionally gzipped) IDX file into a uint8 array."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: shorter than the IDX magic")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (0x00000801, 0x00000803):
        raise IdxMagicError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise IdxTruncatedError(
            f"{path}: payload holds {len(payload)} bytes, header promises {count}")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 784) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise IdxDimensionError("image/label counts differ")
        if self.images.size and (self.images.min() < 0.0
                                 or self.images.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")
        if self.labels.size and self.labels.max() > 9:
            raise ValueError("labels must be class indices 0-9")

    @property
    def n(self) -> int:
        return self.labels.size

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def _pair(images_path, labels_path) -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise IdxDimensionError(f"{images_path}: expected 3-D image tensor")
    if labels.ndim != 1:
        raise IdxDimensionError(f"{labels_path}: expected 1-D label vector")
    if images.shape[0] != labels.shape[0]:
        raise IdxDimensionError("image/label counts differ")
    flat = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    return Dataset(flat, labels.astype(np.int64))


def load_mnist(data_dir=None) -> tuple[Dataset, Dataset]:
    """(train, test) datasets from the standard four IDX files."""
    data_dir = Path(data_dir or os.environ.get(MNIST_DIR_ENV, DEFAULT_MNIST_DIR))

    def find(stem):
        for suffix in ("", ".gz"):
            p = data_dir / (stem + suffix)
            if p.exists():
                return p
        raise FileNotFoundError(f"missing MNIST file {stem} in {data_dir}")

    train = _pair(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = _pair(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return train, test


def desk_splits(train: Dataset, test: Dataset, n_train=10000, n_val=2000,
                n_test=2000, seed=0) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic desk-scale train/validate/test splits."""
    if n_train + n_val > train.n or n_test > test.n:
        raise ValueError("requested splits exceed the available data")
    rng = np.random.default_rng(seed)
    order = rng.permutation(train.n)
    tr = train.subset(order[:n_train])
    val = train.subset(order[n_train:n_train + n_val])
    te = test.subset(np.arange(n_test))
    return tr, val, te


# ---------------------------------------------------------------------------
# MLP training
# ---------------------------------------------------------------------------

class TrainingError(RuntimeError):
    pass


@dataclass
class MlpModel:
    w1: np.ndarray  # (784, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, 10)
    b2: np.ndarray  # (10,)

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_float(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Class scores of the smooth software network."""
    h = _sigmoid(x @ model.w1 + model.b1)
    return h @ model.w2 + model.b2


def train(data: Dataset, hidden: int, l2: float = 1e-4, epochs: int = 60,
          batch: int = 16, lr: float = 1.0, lr_decay: float = 0.98,
          seed: int = 0) -> MlpModel:
    """Mini-batch SGD on softmax cross-entropy + l2·||w||²; seeded."""
    if hidden < 1:
        raise ValueError("hidden size must be positive")
    rng = np.random.default_rng(seed)
    n_in, n_out = data.images.shape[1], 10
    model = MlpModel(
        w1=rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, n_out)),
        b2=np.zeros(n_out),
    )
    x_all, y_all = data.images.astype(np.float64), data.labels
    onehot = np.eye(n_out)[y_all]
    for epoch in range(epochs):
        step = lr * lr_decay**epoch
        order = rng.permutation(data.n)
        for start in range(0, data.n, batch):
            idx = order[start:start + batch]
            x, t = x_all[idx], onehot[idx]
            m = len(idx)
            h = _sigmoid(x @ model.w1 + model.b1)
            p = _softmax(h @ model.w2 + model.b2)
            if not np.all(np.isfinite(p)):
                raise TrainingError("loss diverged (non-finite probabilities)")
            dz2 = (p - t) / m
            dw2 = h.T @ dz2 + 2 * l2 * model.w2
            db2 = dz2.sum(axis=0)
            dh = dz2 @ model.w2.T
            dz1 = dh * h * (1.0 - h)
            dw1 = x.T @ dz1 + 2 * l2 * model.w1
            db1 = dz1.sum(axis=0)
            model.w1 -= step * dw1
            model.b1 -= step * db1
            model.w2 -= step * dw2
            model.b2 -= step * db2
    return model


def evaluate_float(model: MlpModel, data: Dataset) -> float:
    scores = forward_float(model, data.images.astype(np.float64))
    return float(np.mean(scores.argmax(axis=1) == data.labels))


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantConfig:
    bits: int
    window: float  # clip value w_max; codes span [-w_max, +w_max]

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("bits must be at least 1")
        if self.window <= 0:
            raise ValueError("window must be positive")

    @property
    def q_max(self) -> int:
        return 2**self.bits - 1

    @property
    def step(self) -> float:
        return self.window / self.q_max


def quantize(weights: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Signed uniform codes; ties round half away from zero."""
    mag = np.floor(np.abs(weights) / cfg.step + 0.5)
    return (np.sign(weights) * np.minimum(mag, cfg.q_max)).astype(np.int64)


def dequantize(codes: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    return codes.astype(np.float64) * cfg.step


@dataclass
class HwNetwork:
    """Quantized two-layer network; biases stay full-precision.

    Each weight matrix carries its own clipping window: the layers'
    dynamic ranges differ by several-fold after training, and a single
    shared window would starve whichever layer is smaller of resolution.
    """

    codes1: np.ndarray
    b1: np.ndarray
    codes2: np.ndarray
    b2: np.ndarray
    cfg1: QuantConfig
    cfg2: QuantConfig


def _as_layer_configs(cfgs) -> tuple[QuantConfig, QuantConfig]:
    if isinstance(cfgs, QuantConfig):
        return cfgs, cfgs
    cfg1, cfg2 = cfgs
    if cfg1.bits != cfg2.bits:
        raise ValueError("layer configs must share the same bit width")
    return cfg1, cfg2


def layer_configs(model: MlpModel, bits: int,
                  fraction: float) -> tuple[QuantConfig, QuantConfig]:
    """Per-layer windows at a common relative clip fraction of max|w|."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("clip fraction must lie in (0, 1]")
    return (QuantConfig(bits, float(fraction * np.abs(model.w1).max())),
            QuantConfig(bits, float(fraction * np.abs(model.w2).max())))


def make_hw_network(model: MlpModel, cfgs) -> HwNetwork:
    """Quantize a trained model; ``cfgs`` is one QuantConfig or a
    (layer-1, layer-2) pair."""
    cfg1, cfg2 = _as_layer_configs(cfgs)
    return HwNetwork(quantize(model.w1, cfg1), model.b1.copy(),
                     quantize(model.w2, cfg2), model.b2.copy(), cfg1, cfg2)


def evaluate_quantized(model: MlpModel, cfgs, data: Dataset) -> float:
    """Software accuracy with clipped/rounded weights (no hw effects)."""
    cfg1, cfg2 = _as_layer_configs(cfgs)
    q = MlpModel(dequantize(quantize(model.w1, cfg1), cfg1), model.b1,
                 dequantize(quantize(model.w2, cfg2), cfg2), model.b2)
    return evaluate_float(q, data)


def optimize_window(model: MlpModel, bits: int, validate: Dataset,
                    hw: "HwWeightModel | None" = None,
                    n_points: int = 20) -> tuple[QuantConfig, QuantConfig]:
    """Grid search the clipping windows on validation accuracy.

    A single relative clip fraction is swept over ``n_points`` log-spaced
    values in [0.1, 1]; each candidate sets every layer's window to that
    fraction of the layer's max|w| (so each window spans
    [0.1·max|w|, max|w|]).  Ties resolve to the smaller window.  With
    ``hw`` given, candidates are scored with the full hardware forward
    pass; otherwise with the software quantized network.
    """
    if validate.n == 0:
        raise ValueError("validation split is empty")
    best_cfgs, best_acc = None, -1.0
    for r in np.geomspace(0.1, 1.0, n_points):
        cfgs = layer_configs(model, bits, float(r))
        if hw is None:
            acc = evaluate_quantized(model, cfgs, validate)
        else:
            acc = evaluate_hw(make_hw_network(model, cfgs), hw, validate)
        if acc > best_acc:
            best_cfgs, best_acc = cfgs, acc
    return best_cfgs


# ---------------------------------------------------------------------------
# Hardware weight model
# ---------------------------------------------------------------------------

@dataclass
class HwWeightModel:
    """Per-branch effective conductance tables sampled from the cell model.

    ``g_on[b, k]`` is the ON conductance (µS) of ladder branch ``b`` at the
    k-th voltage of ``v_grid``; ``g_off`` likewise for erased branches.
    Noise is described by either a Poisson dopant count or a Gaussian
    relative sigma and is applied per branch.
    """

    n_bits: int
    g0: float               # µS
    v_grid: np.ndarray
    g_on: np.ndarray        # (n_bits, len(v_grid))
    g_off: np.ndarray
    n_dopants: float | None = None
    sigma_rel: float | None = None
    ideal: bool = False

    def branch_g(self, level_v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated (g_on, g_off) at each voltage, shape (n_bits, ...)."""
        if self.ideal:
            on = np.broadcast_to(
                (2.0 ** np.arange(self.n_bits) * self.g0)[:, None],
                (self.n_bits, level_v.size)).copy()
            return on, np.zeros_like(on)
        on = np.stack([np.interp(level_v, self.v_grid, self.g_on[b])
                       for b in range(self.n_bits)])
        off = np.stack([np.interp(level_v, self.v_grid, self.g_off[b])
                        for b in range(self.n_bits)])
        return on, off


def build_hw_model(n_bits: int = 2, r0_kohm: float = xbar.R0_DEFAULT_KOHM,
                   fet: circuit.FetParams | None = None,
                   cap: fecap.FeCapParams | None = None,
                   v_read: float = READ_V, n_v: int = 9,
                   n_dopants: float | None = None,
                   sigma_rel: float | None = None) -> HwWeightModel:
    """Sample per-branch ON/OFF conductances from the device-level cell."""
    fet = fet or circuit.DEFAULT_FET
    cap = cap or fecap.DEFAULT_CALIBRATION
    protocol = circuit.ProgramProtocol()
    erased, programmed = xbar._prototype_states(cap, fet, protocol)
    v_grid = np.linspace(0.0, v_read, n_v)
    cell = xbar.make_cell(n_bits, r0_kohm, fet, cap)
    g_on = np.zeros((n_bits, n_v))
    g_off = np.zeros((n_bits, n_v))
    for b, branch in enumerate(cell.branches):
        for state, table in ((programmed, g_on), (erased, g_off)):
            branch.stack.state = state.copy()
            branch.invalidate()
            for k, v in enumerate(v_grid):
                vv = v if v > 0 else 1e-4  # small-signal limit at zero bias
                table[b, k] = xbar.branch_current(branch, vv) / vv * 1e6
    return HwWeightModel(n_bits, cell.g0, v_grid, g_on, g_off,
                         n_dopants=n_dopants, sigma_rel=sigma_rel)


def ideal_hw_model(n_bits: int = 2, g0: float | None = None,
                   n_dopants: float | None = None,
                   sigma_rel: float | None = None) -> HwWeightModel:
    g0 = g0 if g0 is not None else 1e3 / xbar.R0_DEFAULT_KOHM
    ladder = 2.0 ** np.arange(n_bits)
    v_grid = np.array([0.0, READ_V])
    g_on = np.tile((ladder * g0)[:, None], (1, 2))
    return HwWeightModel(n_bits, g0, v_grid, g_on, np.zeros_like(g_on),
                         n_dopants=n_dopants, sigma_rel=sigma_rel,
                         ideal=True)


def branch_multipliers(hw: HwWeightModel, rng: np.random.Generator,
                       shape) -> np.ndarray:
    """Per-branch conductance scale factors for one noise draw."""
    if hw.n_dopants is not None:
        return rng.poisson(hw.n_dopants, shape) / hw.n_dopants
    if hw.sigma_rel is not None and hw.sigma_rel > 0:
        return np.maximum(0.0, 1.0 + hw.sigma_rel * rng.standard_normal(shape))
    return np.ones(shape)


def _split_codes(codes: np.ndarray, n_bits: int):
    """Sign-magnitude per-bit masks: (pos_bits, neg_bits), each
    (n_bits, in, out) float arrays in {0, 1}."""
    limit = 2**n_bits - 1
    if np.any(np.abs(codes) > limit):
        raise ValueError("weight code out of range for the hardware model")
    mag = np.abs(codes)
    bits = np.stack([(mag >> b) & 1 for b in range(n_bits)]).astype(np.float64)
    pos = bits * (codes > 0)
    neg = bits * (codes < 0)
    return pos, neg


def _layer_current(codes, hw: HwWeightModel, v_in, mult_pos=None,
                   mult_neg=None) -> np.ndarray:
    """Column currents (µA) of one differential layer.

    ``v_in`` is (n_samples, n_in) input voltages; noise multipliers, if
    given, are (n_bits, n_in, n_out) per-branch conductance scales.
    """
    pos, neg = _split_codes(codes, hw.n_bits)
    levels, inverse = np.unique(v_in, return_inverse=True)
    g_on, g_off = hw.branch_g(levels)
    out = 0.0
    for b in range(hw.n_bits):
        m_pos = pos[b] if mult_pos is None else pos[b] * mult_pos[b]
        m_neg = neg[b] if mult_neg is None else neg[b] * mult_neg[b]
        # ON branches where the bit is set; the remaining branches of both
        # cells contribute only (differential) OFF leakage.
        w_net = m_pos - m_neg
        off_net = neg[b] - pos[b]
        i_on = (g_on[b] * levels)[inverse].reshape(v_in.shape)
        i_off = (g_off[b] * levels)[inverse].reshape(v_in.shape)
        out = out + i_on @ w_net + i_off @ off_net
    return out


def hw_forward(net: HwNetwork, hw: HwWeightModel, images: np.ndarray,
               binarize: bool = True, multipliers=None,
               v_read: float = READ_V) -> np.ndarray:
    """Class scores through the crossbar weight model.

    Pixel intensities map linearly onto [0, v_read] input voltages; hidden
    activations are binarized to {0, v_read} by the sign of their
    pre-activation (``binarize=False`` substitutes the smooth software
    activation, used by reduction tests).  ``multipliers`` is an optional
    pair of (pos, neg) per-branch noise scale tuples for the two layers.
    """
    scale1 = net.cfg1.step / (hw.g0 * v_read)  # µA -> weight units
    scale2 = net.cfg2.step / (hw.g0 * v_read)
    m1 = m2 = (None, None)
    if multipliers is not None:
        m1, m2 = multipliers
    v1 = images.astype(np.float64) * v_read
    i1 = _layer_current(net.codes1, hw, v1, *m1)
    z1 = i1 * scale1 + net.b1
    if binarize:
        h = (z1 > 0).astype(np.float64)
    else:
        h = _sigmoid(z1)
    i2 = _layer_current(net.codes2, hw, h * v_read, *m2)
    return i2 * scale2 + net.b2


def evaluate_hw(net: HwNetwork, hw: HwWeightModel, data: Dataset,
                binarize: bool = True, multipliers=None) -> float:
    scores = hw_forward(net, hw, data.images, binarize, multipliers)
    return float(np.mean(scores.argmax(axis=1) == data.labels))


def _draw_multipliers(net: HwNetwork, hw: HwWeightModel,
                      rng: np.random.Generator, per_weight: bool = False):
    """One noise draw for both layers.

    Per-branch mode (default, physical) perturbs every resistor branch
    independently; per-weight mode scales all branches of a weight's cell
    pair by one common factor (perturbing the net signed weight).
    """
    if per_weight:
        def draw(shape_codes):
            m = branch_multipliers(hw, rng, shape_codes)
            m = np.broadcast_to(m, (hw.n_bits,) + shape_codes).copy()
            return m, m
    else:
        def draw(shape_codes):
            shape = (hw.n_bits,) + shape_codes
            return (branch_multipliers(hw, rng, shape),
                    branch_multipliers(hw, rng, shape))
    return draw(net.codes1.shape), draw(net.codes2.shape)


def noise_mc(net: HwNetwork, hw: HwWeightModel, test: Dataset,
             trials: int, seed: int = 0,
             per_weight: bool = False) -> np.ndarray:
    """Accuracy samples under random conductance noise.

    Each trial draws its own RNG stream from (seed, trial), so results do
    not depend on evaluation order or parallel scheduling.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    accs = np.zeros(trials)
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence((seed, t)))
        mult = _draw_multipliers(net, hw, rng, per_weight)
        accs[t] = evaluate_hw(net, hw, test, multipliers=mult)
    return accs


# ---------------------------------------------------------------------------
# Hardware-aware regularization (model selection)
# ---------------------------------------------------------------------------

@dataclass
class HwRegResult:
    net: HwNetwork
    model: MlpModel
    l2: float
    fraction: float
    cost: float
    cost_grid: np.ndarray  # (len(lambdas), len(fractions)) validation costs


def hw_aware_regularization(train_ds: Dataset, validate: Dataset,
                            lambdas, fractions, bits: int, hw: HwWeightModel,
                            hidden: int, train_kwargs=None) -> HwRegResult:
    """Select (lambda, clip fraction) minimizing hardware validation error.

    For each lambda the network is trained once in software; every window
    candidate (a relative clip fraction applied per layer, as in
    optimize_window) is then scored with the full hardware forward pass
    (codes, conductance non-idealities, binarized activations).  Cost is
    the validation error rate; ties resolve to the first grid point
    scanned.
    """
    lambdas, fractions = list(lambdas), list(fractions)
    if not lambdas or not fractions:
        raise ValueError("lambda and window ranges must be non-empty")
    train_kwargs = dict(train_kwargs or {})
    grid = np.zeros((len(lambdas), len(fractions)))
    best = None
    for i, l2 in enumerate(lambdas):
        model = train(train_ds, hidden, l2=l2, **train_kwargs)
        for j, r in enumerate(fractions):
            net = make_hw_network(model, layer_configs(model, bits, float(r)))
            cost = 1.0 - evaluate_hw(net, hw, validate)
            grid[i, j] = cost
            if best is None or cost < best.cost:
                best = HwRegResult(net, model, l2, float(r), cost, grid)
    best.cost_grid = grid
    return best


# ---------------------------------------------------------------------------
# Weight container
# ---------------------------------------------------------------------------

def save_weights(path, model: MlpModel) -> None:
    """Versioned binary container: magic, version, dims, row-major f64."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack(">III", WEIGHTS_VERSION,
                            model.w1.shape[0], model.w1.shape[1]))
        f.write(struct.pack(">I", model.w2.shape[1]))
        for arr in (model.w1, model.b1, model.w2, model.b2):
            f.write(np.ascontiguousarray(arr, dtype=">f8").tobytes())


def load_weights(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ValueError("not a weight container (bad magic)")
    version, n_in, hidden = struct.unpack(">III", raw[4:16])
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weight container version {version}")
    (n_out,) = struct.unpack(">I", raw[16:20])
    sizes = [n_in * hidden, hidden, hidden * n_out, n_out]
    if len(raw) != 20 + 8 * sum(sizes):
        raise ValueError("weight container payload size mismatch")
    offset, arrays = 20, []
    for size in sizes:
        arrays.append(np.frombuffer(raw, dtype=">f8", count=size,
                                    offset=offset).astype(np.float64))
        offset += 8 * size
    return MlpModel(arrays[0].reshape(n_in, hidden), arrays[1],
                    arrays[2].reshape(hidden, n_out), arrays[3])
