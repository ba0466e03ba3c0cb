"""Experiment runner: validated YAML configs in, deterministic CSVs out.

Each subcommand mirrors one experiment kind.  Configs support an
``include`` mechanism for shared device blocks; all keys are schema
checked (unknown keys rejected, every violation reported, not just the
first).  CSV files are written atomically (temp file + rename) with
17-significant-digit floats so reruns with the same config and seed are
byte-identical, independent of ``--threads``.

Exit codes: 0 success, 2 config error, 3 solver/training failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import circuit, fecap, nnq, xbar

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

EXPERIMENT_KINDS = (
    "hysteresis", "program-erase", "area-sweep", "cell-iv", "weights",
    "train", "quantize-eval", "noise-mc", "hw-reg",
)

RESULTS_HEADER = ("experiment", "h", "bits", "window", "lambda", "sigma",
                  "trial", "accuracy")


class ConfigError(Exception):
    """Carries the full list of validation problems."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# Config loading / schema validation
# ---------------------------------------------------------------------------

def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Parse a YAML config, resolving ``include`` chains relative to it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc})"]) from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: invalid YAML ({exc})"]) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: config root must be a mapping"])
    includes = raw.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    if not isinstance(includes, list):
        raise ConfigError([f"{path}: include must be a path or list of paths"])
    merged: dict = {}
    for inc in includes:
        merged = _deep_merge(merged, load_config(path.parent / inc))
    return _deep_merge(merged, raw)


def _check_block(block_name, block, fields, errors):
    """Validate one nested parameter mapping against allowed field names."""
    if block is None:
        return {}
    if not isinstance(block, dict):
        errors.append(f"{block_name}: must be a mapping")
        return {}
    out = {}
    for key, value in block.items():
        if key not in fields:
            errors.append(f"{block_name}.{key}: unknown key")
        elif not isinstance(value, (int, float)) or isinstance(value, bool):
            errors.append(f"{block_name}.{key}: must be a number")
        else:
            out[key] = float(value)
    return out


_CAP_FIELDS = tuple(f.name for f in dataclasses.fields(fecap.FeCapParams))
_FET_FIELDS = tuple(f.name for f in dataclasses.fields(circuit.FetParams))
_PROTOCOL_FIELDS = tuple(f.name for f in dataclasses.fields(circuit.ProgramProtocol))

# Per-experiment scalar keys: name -> (default, validator, description).
# Validators return an error string or None.


def _positive(x):
    return None if x > 0 else "must be positive"


def _non_negative(x):
    return None if x >= 0 else "must be non-negative"


def _positive_int(x):
    return None if (isinstance(x, int) and x > 0) else "must be a positive integer"


def _fraction(x):
    return None if 0 < x <= 1 else "must lie in (0, 1]"


def _bits(x):
    return None if x in (1, 2, 4) else "must be 1, 2 or 4"


def _bool(x):
    return None if isinstance(x, bool) else "must be true or false"


def _bits_list(x):
    if not isinstance(x, list) or not x or any(b not in (1, 2, 4) for b in x):
        return "must be a non-empty list drawn from {1, 2, 4}"
    return None


def _number_list(x):
    if not isinstance(x, list) or not x or \
            any(not isinstance(v, (int, float)) or isinstance(v, bool) for v in x):
        return "must be a non-empty list of numbers"
    return None


def _grid(x):
    err = _number_list(x)
    if err:
        return err
    return None if all(v > 0 for v in x) else "entries must be positive"


def _string(x):
    return None if isinstance(x, str) else "must be a string"


_SCHEMAS = {
    "hysteresis": {
        "amplitude": (5.0, _positive),
        "frequency": (None, _positive),   # default f0/100, set at build time
        "cycles": (2, _positive_int),
    },
    "program-erase": {
        "cycles": (3, _positive_int),
    },
    "area-sweep": {
        "area_min": (2000.0, _positive),
        "area_max": (20000.0, _positive),
        "area_points": (13, _positive_int),
        "cycles": (3, _positive_int),
    },
    "cell-iv": {
        "n_bits": (2, _bits),
        "v_min": (0.05, _positive),
        "v_max": (0.5, _positive),
        "v_points": (10, _positive_int),
    },
    "weights": {
        "n_bits": (2, _bits),
        "v_read": (nnq.READ_V, _positive),
        "v_points": (9, _positive_int),
    },
    "train": {
        "hidden": (200, _positive_int),
        "l2": (1e-4, _non_negative),
        "epochs": (60, _positive_int),
        "batch": (16, _positive_int),
        "lr": (1.0, _positive),
        "lr_decay": (0.98, _positive),
        "n_train": (10000, _positive_int),
        "n_val": (2000, _positive_int),
        "n_test": (2000, _positive_int),
        "mnist_dir": (None, _string),
        "weights_out": ("weights.bin", _string),
    },
    "quantize-eval": {
        "hidden": (200, _positive_int),
        "l2": (1e-4, _non_negative),
        "epochs": (60, _positive_int),
        "batch": (16, _positive_int),
        "lr": (1.0, _positive),
        "lr_decay": (0.98, _positive),
        "n_train": (10000, _positive_int),
        "n_val": (2000, _positive_int),
        "n_test": (2000, _positive_int),
        "mnist_dir": (None, _string),
        "weights_in": (None, _string),
        "bits": ([1, 2, 4], _bits_list),
        "window_points": (20, _positive_int),
    },
    "noise-mc": {
        "hidden": (200, _positive_int),
        "l2": (1e-4, _non_negative),
        "epochs": (60, _positive_int),
        "batch": (16, _positive_int),
        "lr": (1.0, _positive),
        "lr_decay": (0.98, _positive),
        "n_train": (10000, _positive_int),
        "n_val": (2000, _positive_int),
        "n_test": (2000, _positive_int),
        "mnist_dir": (None, _string),
        "weights_in": (None, _string),
        "n_bits": (2, _bits),
        "sigmas": ([0.1, 0.3], _number_list),
        "trials": (20, _positive_int),
        "per_weight": (True, _bool),
        "window_points": (20, _positive_int),
    },
    "hw-reg": {
        "hidden": (200, _positive_int),
        "epochs": (60, _positive_int),
        "batch": (16, _positive_int),
        "lr": (1.0, _positive),
        "lr_decay": (0.98, _positive),
        "n_train": (10000, _positive_int),
        "n_val": (2000, _positive_int),
        "n_test": (2000, _positive_int),
        "mnist_dir": (None, _string),
        "n_bits": (2, _bits),
        "lambdas": ([float(x) for x in np.geomspace(1e-6, 1e-2, 25)], _grid),
        "fractions": ([float(x) for x in np.geomspace(0.1, 1.0, 20)], _grid),
    },
}

_DEVICE_EXPERIMENTS = {"hysteresis", "program-erase", "area-sweep", "cell-iv",
                       "weights", "noise-mc", "hw-reg"}


def validate_config(raw: dict, kind: str) -> dict:
    """Schema-check one experiment config; every violation is reported."""
    if kind not in _SCHEMAS:
        raise ConfigError([f"experiment: unknown kind {kind!r}"])
    errors: list[str] = []
    raw = dict(raw)

    declared = raw.pop("experiment", kind)
    if declared != kind:
        errors.append(f"experiment: config declares {declared!r}, "
                      f"subcommand is {kind!r}")
    seed = raw.pop("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append("seed: must be a non-negative integer")
        seed = 0
    out_name = raw.pop("out", f"{kind}.csv")
    if not isinstance(out_name, str) or not out_name:
        errors.append("out: must be a non-empty filename")
        out_name = f"{kind}.csv"

    cap_kw = _check_block("cap", raw.pop("cap", None), _CAP_FIELDS, errors)
    fet_kw = _check_block("fet", raw.pop("fet", None), _FET_FIELDS, errors)
    proto_kw = _check_block("protocol", raw.pop("protocol", None),
                            _PROTOCOL_FIELDS, errors)

    schema = _SCHEMAS[kind]
    resolved = {}
    for key, (default, check) in schema.items():
        if key in raw:
            value = raw.pop(key)
            if check is not None and value is not None:
                problem = check(value)
                if problem:
                    errors.append(f"{key}: {problem}")
                    value = default
            resolved[key] = value
        else:
            resolved[key] = default
    for key in sorted(raw):
        errors.append(f"{key}: unknown key")

    # Device blocks and physical sanity checks.
    try:
        cap = dataclasses.replace(fecap.DEFAULT_CALIBRATION, **cap_kw)
    except (ValueError, TypeError) as exc:
        errors.append(f"cap: {exc}")
        cap = fecap.DEFAULT_CALIBRATION
    try:
        fet = dataclasses.replace(circuit.DEFAULT_FET, **fet_kw)
    except (ValueError, TypeError) as exc:
        errors.append(f"fet: {exc}")
        fet = circuit.DEFAULT_FET
    proto_kw.setdefault("dt", circuit.ProgramProtocol().dt)
    try:
        protocol = dataclasses.replace(circuit.ProgramProtocol(), **proto_kw)
    except (ValueError, TypeError) as exc:
        errors.append(f"protocol: {exc}")
        protocol = circuit.ProgramProtocol()
    if protocol.dt > cap.max_dt:
        errors.append(f"protocol.dt: exceeds integrator bound "
                      f"{cap.max_dt:.3e} s")

    if kind == "area-sweep" and not errors:
        if resolved["area_min"] >= resolved["area_max"]:
            errors.append("area_min: must be smaller than area_max")
    if kind == "cell-iv" and not errors:
        if resolved["v_min"] >= resolved["v_max"]:
            errors.append("v_min: must be smaller than v_max")
    if kind == "hw-reg" and not errors:
        if any(not 0 < r <= 1 for r in resolved["fractions"]):
            errors.append("fractions: entries must lie in (0, 1]")

    if errors:
        raise ConfigError(errors)
    resolved.update(experiment=kind, seed=seed, out=out_name,
                    cap=cap, fet=fet, protocol=protocol)
    return resolved


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


def write_csv(path, header, rows) -> None:
    """Atomic CSV write: full content to a temp file, then rename."""
    path = Path(path)
    text = ",".join(header) + "\n" + "".join(
        ",".join(format_cell(v) for v in row) + "\n" for row in rows)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parallel_map(fn, items, threads: int):
    """Order-preserving map; results land in indexed slots."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    results = [None] * len(items)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {pool.submit(fn, item): i for i, item in enumerate(items)}
        for future, i in futures.items():
            results[i] = future.result()
    return results


# ---------------------------------------------------------------------------
# Experiment runners: each returns (header, rows, summary line)
# ---------------------------------------------------------------------------

def _run_hysteresis(cfg, threads):
    cap = cfg["cap"]
    freq = cfg["frequency"] or cap.f0 / 100.0
    period = 1.0 / freq
    n_per_cycle = int(math.ceil(period / (0.9 * cap.max_dt)))
    n = n_per_cycle * cfg["cycles"] + 1
    t = np.linspace(0.0, period * cfg["cycles"], n)
    phase = (t * freq) % 1.0
    tri = np.where(phase < 0.25, 4 * phase,
                   np.where(phase < 0.75, 2 - 4 * phase, 4 * phase - 4))
    trace = fecap.quasistatic_sweep(cap, t, cfg["amplitude"] * tri)
    rows = list(zip(*trace.as_columns()))
    p_max = float(np.max(np.abs(trace.p_uC_cm2)))
    return (fecap.Trace.COLUMNS, rows,
            f"hysteresis: max |P| = {p_max:.4f} uC/cm^2 over "
            f"{cfg['cycles']} cycles at {freq:.4g} Hz")


def _run_program_erase(cfg, threads):
    cap, fet, protocol = cfg["cap"], cfg["fet"], cfg["protocol"]
    cell = circuit.CellStack(cap, fet)
    for _ in range(cfg["cycles"] - 1):
        circuit.transient(cell, [protocol.erase_pulse(),
                                 protocol.program_pulse()], protocol)
    res = circuit.transient(cell, [protocol.erase_pulse(),
                                   protocol.program_pulse()], protocol)
    vp, ve = circuit.program_erase_rest_points(cap, fet, protocol,
                                               cycles=cfg["cycles"])
    rows = list(zip(*res.as_columns()))
    return (circuit.TransientResult.COLUMNS, rows,
            f"program-erase: v_prog = {vp:+.4f} V, v_erase = {ve:+.4f} V, "
            f"window = {vp - ve:.4f} V")


def _run_area_sweep(cfg, threads):
    cap, fet, protocol = cfg["cap"], cfg["fet"], cfg["protocol"]
    areas = np.geomspace(cfg["area_min"], cfg["area_max"], cfg["area_points"])

    def one(area):
        vp, ve = circuit.program_erase_rest_points(
            dataclasses.replace(cap, area=float(area)), fet, protocol,
            cycles=cfg["cycles"])
        return (float(area), vp, ve, vp - ve)

    rows = _parallel_map(one, areas, threads)
    best = max(rows, key=lambda r: r[3])
    return (("area_nm2", "v_prog_V", "v_erase_V", "delta_v_V"), rows,
            f"area-sweep: peak delta_v = {best[3]:.4f} V at "
            f"{best[0]:.0f} nm^2")


def _run_cell_iv(cfg, threads):
    voltages = np.linspace(cfg["v_min"], cfg["v_max"], cfg["v_points"])
    rows = xbar.iv_sweep(cfg["n_bits"], voltages, fet=cfg["fet"],
                         cap=cfg["cap"], protocol=cfg["protocol"])
    worst = max(abs(g - gi) / gi for _, code, _, g, gi in rows if code)
    return (("v_in_V", "code", "i_A", "g_uS", "g_ideal_uS"), rows,
            f"cell-iv: worst relative conductance error = {worst:.4%}")


def _run_weights(cfg, threads):
    hw = nnq.build_hw_model(cfg["n_bits"], fet=cfg["fet"], cap=cfg["cap"],
                            v_read=cfg["v_read"], n_v=cfg["v_points"])
    rows = []
    for b in range(hw.n_bits):
        for state, table in (("on", hw.g_on), ("off", hw.g_off)):
            for k, v in enumerate(hw.v_grid):
                rows.append((b, state, float(v), float(table[b, k])))
    ratio = hw.g_on[0, -1] / max(hw.g_off[0, -1], 1e-30)
    return (("bit", "state", "v_in_V", "g_uS"), rows,
            f"weights: LSB on/off ratio = {ratio:.3g} at "
            f"{cfg['v_read']:.2f} V")


def _load_splits(cfg):
    train, test = nnq.load_mnist(cfg["mnist_dir"])
    return nnq.desk_splits(train, test, n_train=cfg["n_train"],
                           n_val=cfg["n_val"], n_test=cfg["n_test"])


def _train_kwargs(cfg):
    return {"l2": cfg["l2"], "epochs": cfg["epochs"], "batch": cfg["batch"],
            "lr": cfg["lr"], "lr_decay": cfg["lr_decay"], "seed": cfg["seed"]}


def _obtain_model(cfg, tr, out_dir):
    if cfg.get("weights_in"):
        return nnq.load_weights(cfg["weights_in"])
    return nnq.train(tr, cfg["hidden"], **_train_kwargs(cfg))


def _run_train(cfg, threads, out_dir):
    tr, val, te = _load_splits(cfg)
    model = nnq.train(tr, cfg["hidden"], **_train_kwargs(cfg))
    nnq.save_weights(Path(out_dir) / cfg["weights_out"], model)
    acc = nnq.evaluate_float(model, te)
    rows = [("train", cfg["hidden"], None, None, cfg["l2"], None, None, acc)]
    return (RESULTS_HEADER, rows,
            f"train: float test accuracy = {acc:.4f} "
            f"(weights -> {cfg['weights_out']})")


def _run_quantize_eval(cfg, threads, out_dir):
    tr, val, te = _load_splits(cfg)
    model = _obtain_model(cfg, tr, out_dir)
    rows = [("quantize-eval", model.hidden, None, None, cfg["l2"], None, None,
             nnq.evaluate_float(model, te))]
    for bits in cfg["bits"]:
        cfgs = nnq.optimize_window(model, bits, val,
                                   n_points=cfg["window_points"])
        fraction = cfgs[0].window / float(np.abs(model.w1).max())
        acc = nnq.evaluate_quantized(model, cfgs, te)
        rows.append(("quantize-eval", model.hidden, bits, fraction,
                     cfg["l2"], None, None, acc))
    summary = ", ".join(f"{r[2]}-bit {r[7]:.4f}" for r in rows[1:])
    return (RESULTS_HEADER, rows,
            f"quantize-eval: float {rows[0][7]:.4f}, {summary}")


def _run_noise_mc(cfg, threads, out_dir):
    tr, val, te = _load_splits(cfg)
    model = _obtain_model(cfg, tr, out_dir)
    hw0 = nnq.build_hw_model(cfg["n_bits"], fet=cfg["fet"], cap=cfg["cap"])
    cfgs = nnq.optimize_window(model, cfg["n_bits"], val,
                               n_points=cfg["window_points"])
    net = nnq.make_hw_network(model, cfgs)
    base = nnq.evaluate_hw(net, hw0, te)
    rows = [("noise-mc", model.hidden, cfg["n_bits"], None, cfg["l2"],
             0.0, None, base)]
    means = []
    for sigma in cfg["sigmas"]:
        hw = dataclasses.replace(hw0, sigma_rel=float(sigma))

        def one_trial(t, hw=hw):
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg["seed"], t)))
            mult = nnq._draw_multipliers(net, hw, rng, cfg["per_weight"])
            return nnq.evaluate_hw(net, hw, te, multipliers=mult)

        accs = _parallel_map(one_trial, range(cfg["trials"]), threads)
        means.append(float(np.mean(accs)))
        for t, acc in enumerate(accs):
            rows.append(("noise-mc", model.hidden, cfg["n_bits"], None,
                         cfg["l2"], float(sigma), t, acc))
    drops = ", ".join(f"sigma={s:g}: drop {base - m:+.4f}"
                      for s, m in zip(cfg["sigmas"], means))
    return (RESULTS_HEADER, rows, f"noise-mc: base {base:.4f}; {drops}")


def _run_hw_reg(cfg, threads, out_dir):
    tr, val, te = _load_splits(cfg)
    hw = nnq.build_hw_model(cfg["n_bits"], fet=cfg["fet"], cap=cfg["cap"])
    kwargs = {"epochs": cfg["epochs"], "batch": cfg["batch"],
              "lr": cfg["lr"], "lr_decay": cfg["lr_decay"],
              "seed": cfg["seed"]}
    res = nnq.hw_aware_regularization(tr, val, cfg["lambdas"],
                                      cfg["fractions"], cfg["n_bits"], hw,
                                      cfg["hidden"], train_kwargs=kwargs)
    rows = []
    for i, l2 in enumerate(cfg["lambdas"]):
        for j, r in enumerate(cfg["fractions"]):
            rows.append(("hw-reg", cfg["hidden"], cfg["n_bits"], float(r),
                         float(l2), None, None, 1.0 - res.cost_grid[i, j]))
    acc_test = nnq.evaluate_hw(res.net, hw, te)
    rows.append(("hw-reg-best", cfg["hidden"], cfg["n_bits"], res.fraction,
                 res.l2, None, None, acc_test))
    return (RESULTS_HEADER, rows,
            f"hw-reg: best lambda = {res.l2:g}, fraction = {res.fraction:g},"
            f" hw test accuracy = {acc_test:.4f}")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def run(kind: str, cfg: dict, out_dir, threads: int) -> str:
    """Dispatch one validated experiment; returns the summary line."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "hysteresis":
        header, rows, summary = _run_hysteresis(cfg, threads)
    elif kind == "program-erase":
        header, rows, summary = _run_program_erase(cfg, threads)
    elif kind == "area-sweep":
        header, rows, summary = _run_area_sweep(cfg, threads)
    elif kind == "cell-iv":
        header, rows, summary = _run_cell_iv(cfg, threads)
    elif kind == "weights":
        header, rows, summary = _run_weights(cfg, threads)
    elif kind == "train":
        header, rows, summary = _run_train(cfg, threads, out_dir)
    elif kind == "quantize-eval":
        header, rows, summary = _run_quantize_eval(cfg, threads, out_dir)
    elif kind == "noise-mc":
        header, rows, summary = _run_noise_mc(cfg, threads, out_dir)
    elif kind == "hw-reg":
        header, rows, summary = _run_hw_reg(cfg, threads, out_dir)
    else:  # pragma: no cover - guarded by validate_config
        raise ConfigError([f"experiment: unknown kind {kind!r}"])
    write_csv(out_dir / cfg["out"], header, rows)
    return summary


def _echo(cfg: dict) -> str:
    plain = {}
    for key, value in sorted(cfg.items()):
        if dataclasses.is_dataclass(value):
            plain[key] = dataclasses.asdict(value)
        else:
            plain[key] = value
    return yaml.safe_dump(plain, sort_keys=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fefetsim",
        description="FeFET weight-cell and crossbar experiment runner")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", required=True, help="YAML config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for sweep points / MC trials")
        p.add_argument("--echo-config", action="store_true",
                       help="print the resolved config before running")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config(args.config)
        if args.seed is not None:
            raw["seed"] = args.seed
        cfg = validate_config(raw, args.kind)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.echo_config:
        print(_echo(cfg), end="")
    try:
        summary = run(args.kind, cfg, args.out, max(1, args.threads))
    except (circuit.SolverError, nnq.TrainingError,
            fecap.ModelDegeneracyError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(summary)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
