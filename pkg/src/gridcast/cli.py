"""Command-line entry point: ``gridcast {generate,train,evaluate,forecast,gradcheck,benchmark}``.

Every command takes ``--config PATH`` (a flat JSON object whose keys are the
long option names with dashes turned into underscores); explicit flags win
over the file. Exit codes: 0 success, 1 failed check, 2 bad arguments,
3 unreadable data, 4 checkpoint missing or incompatible with the data.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .linalg import ShapeError
from .measurement import (
    PROFILES,
    DataParseError,
    GridTopology,
    build_measurement_tensor,
    csv_header,
    generate_state_series,
    measure,
    read_state_csv,
    write_measurement_csv,
    write_state_csv,
)
from .metrics import evaluate
from .model import ARCHITECTURES, CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .serialization import canonical_dump
from .training import SeriesTooShort, SplitSpec, default_stencil, gradcheck, split_dataset, train

log = logging.getLogger("gridcast")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _csv_ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _csv_strs(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


# name -> (type, default, help); None-typed entries are boolean switches
COMMON = {
    "seed": (int, 0, "random seed"),
    "out": (str, ".", "output directory"),
}
MODEL = {
    "arch": (str, "bigru", f"one of {', '.join(ARCHITECTURES)}"),
    "seq_len": (int, 5, "input window length"),
    "horizon": (int, 5, "forecast steps"),
    "hidden": (int, 16, "hidden units per recurrent layer"),
    "depth": (int, 3, "recurrent layers"),
    "filters": (int, 64, "Conv1D filters (conv_bigru)"),
    "kernel": (int, 5, "Conv1D kernel length (conv_bigru)"),
    "stride": (int, 1, "Conv1D stride (conv_bigru)"),
    "dropout": (float, 0.05, "dropout rate between stacked layers"),
    "teacher_forcing": (None, False, "feed ground truth to the decoder while training"),
}
TRAINING = {
    "epochs": (int, 100, "maximum epochs"),
    "batch_size": (int, 32, "examples per Adam step"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "patience": (int, 10, "epochs without validation improvement before stopping"),
    "clip_norm": (float, None, "clip gradients to this global norm"),
}
SPLIT = {
    "train_frac": (float, 0.75, "training fraction"),
    "val_frac": (float, 0.05, "validation fraction"),
    "test_frac": (float, 0.20, "test fraction"),
}

COMMANDS = {
    "generate": {
        "buses": (int, 6, "number of buses K"),
        "steps": (int, 2000, "number of time steps T"),
        "profile": (str, "sinusoidal_load", f"one of {', '.join(PROFILES)}"),
        "jitter": (float, 0.002, "Gaussian jitter on magnitude and angle"),
        "noise": (float, 0.01, "measurement noise standard deviation"),
        **COMMON,
    },
    "train": {"data": (str, None, "state CSV"), **MODEL, **TRAINING, **SPLIT, "verbose": (None, False, "log every epoch"), **COMMON},
    "evaluate": {
        "data": (str, None, "state CSV"),
        "checkpoint": (str, None, "model checkpoint"),
        "bus": (int, 1, "bus for the error trace"),
        "time": (int, None, "test-segment index for the snapshot (default: last)"),
        "trace_start": (int, 0, "test-segment index where the bus trace window starts"),
        **SPLIT,
        **COMMON,
    },
    "forecast": {
        "data": (str, None, "state CSV"),
        "checkpoint": (str, None, "model checkpoint"),
        "horizon": (int, None, "forecast steps (default: the model's horizon)"),
        **COMMON,
    },
    "gradcheck": {
        "arch": (str, "all", "architecture, or 'all'"),
        "threshold": (float, 1e-4, "largest acceptable relative error"),
        "trials": (int, 20, "random configurations per architecture"),
        "step": (float, None, "finite-difference step (default depends on the architecture)"),
        "stencil": (int, None, "3 or 5 point central difference (default depends on the architecture)"),
        "input_dim": (int, 4, "toy input dimension"),
        "hidden": (int, 3, "toy hidden size"),
        "depth": (int, 2, "toy depth"),
        "seq_len": (int, 4, "toy window length"),
        "horizon": (int, 2, "toy horizon"),
        "filters": (int, 2, "toy Conv1D filters"),
        "kernel": (int, 2, "toy Conv1D kernel"),
        "dropout": (float, 0.05, "dropout rate (masks are frozen per trial)"),
        **COMMON,
    },
    "benchmark": {
        "data": (str, None, "state CSV"),
        "archs": (_csv_strs, "rnn,bigru", "comma-separated architectures"),
        "seq_lens": (_csv_ints, "5,10,15,20", "comma-separated window lengths"),
        "repetitions": (int, 30, "runs per cell, seeded seed+run"),
        "jobs": (int, 1, "worker processes"),
        **{k: v for k, v in MODEL.items() if k not in ("arch", "seq_len")},
        **TRAINING,
        **SPLIT,
        **COMMON,
    },
}
REQUIRED = {"train": ("data",), "evaluate": ("data", "checkpoint"), "forecast": ("data", "checkpoint"), "benchmark": ("data",)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON config; flags override it")
        for key, (typ, default, text) in options.items():
            flag = "--" + key.replace("_", "-")
            shown = default if not callable(default) else None
            if typ is None:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=text)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None, help=f"{text} (default: {shown})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    options = COMMANDS[command]
    values = {k: (v[1] if v[0] in (None, str, int, float) or v[1] is None else v[0](v[1])) for k, v in options.items()}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(loaded) - set(options))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for k, v in loaded.items():
            typ = options[k][0]
            values[k] = typ(v) if typ in (_csv_ints, _csv_strs) and isinstance(v, str) else v
    for k in options:
        v = getattr(args, k)
        if v is not None:
            values[k] = v
    for k in REQUIRED.get(command, ()):
        if values.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")
    for k in ("data", "checkpoint", "out"):
        if values.get(k) is not None:
            values[k] = Path(values[k]).expanduser().resolve()
    return values


def _split(v) -> SplitSpec:
    try:
        return SplitSpec(v["train_frac"], v["val_frac"], v["test_frac"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _model_config(v, arch=None, seq_len=None, input_dim=None) -> ModelConfig:
    try:
        return ModelConfig(
            architecture=arch or v["arch"],
            input_dim=input_dim,
            hidden_size=v["hidden"],
            depth=v["depth"],
            seq_len=seq_len or v["seq_len"],
            horizon=v["horizon"],
            conv_filters=v["filters"],
            conv_kernel=v["kernel"],
            conv_stride=v.get("stride", 1),
            dropout_rate=v["dropout"],
            teacher_forcing=bool(v.get("teacher_forcing", False)),
            seed=v["seed"],
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _out_dir(v) -> Path:
    out = v["out"]
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _load_data(path):
    if not Path(path).is_file():
        raise DataParseError(f"no such data file: {path}")
    return read_state_csv(path)


def _load_model(path, data):
    model = load_checkpoint(path)
    if model.cfg.input_dim != data.states.shape[1]:
        raise CheckpointError(
            f"checkpoint expects states of dimension {model.cfg.input_dim}, data has {data.states.shape[1]}"
        )
    return model


def cmd_generate(v) -> int:
    if v["buses"] < 2 or v["steps"] < 1:
        raise UsageError("--buses must be >= 2 and --steps >= 1")
    if v["profile"] not in PROFILES:
        raise UsageError(f"--profile must be one of {', '.join(PROFILES)}")
    if v["noise"] < 0 or v["jitter"] < 0:
        raise UsageError("--noise and --jitter must be non-negative")
    out = _out_dir(v)
    topo = GridTopology.ring(v["buses"])
    series = generate_state_series(topo, v["steps"], v["seed"], v["profile"], v["jitter"])
    write_state_csv(series, out / "states.csv")
    tensor = build_measurement_tensor(topo, seed=v["seed"])
    rng = np.random.default_rng(v["seed"])
    Z = np.stack([measure(tensor, x, v["noise"], rng.integers(2**63)) for x in series.states])
    write_measurement_csv(Z, tensor.labels, out / "measurements.csv")
    mag = series.magnitudes()
    print(f"T={series.T} K={series.K} |V| min={mag.min():.6f} max={mag.max():.6f} -> {out / 'states.csv'}")
    return EXIT_OK


def cmd_train(v) -> int:
    data = _load_data(v["data"])
    spec = _split(v)
    cfg = _model_config(v, input_dim=data.states.shape[1])
    if v["verbose"]:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = _out_dir(v)
    try:
        model, report = train(
            cfg, data, spec, v["epochs"], v["batch_size"], v["lr"], v["patience"], v["seed"], v["clip_norm"], bool(v["verbose"])
        )
    except SeriesTooShort as exc:
        raise UsageError(str(exc)) from None
    save_checkpoint(model, out / "model.ckpt")
    report.save(out / "report.json")
    canonical_dump({"wall_clock_seconds": report.wall_clock_seconds}, out / "timing.json")
    print(
        f"{cfg.architecture} l={cfg.seq_len}: test NRMSE {report.test_nrmse:.6g} "
        f"(epoch {report.best_epoch}/{report.stopped_epoch}, {report.parameter_count} params, "
        f"{report.wall_clock_seconds:.1f}s)"
    )
    return EXIT_OK


def cmd_evaluate(v) -> int:
    data = _load_data(v["data"])
    model = _load_model(v["checkpoint"], data)
    spec = _split(v)
    try:
        test = split_dataset(data, spec, model.cfg.seq_len + model.cfg.horizon)[2]
        result = evaluate(model, test, v["bus"], v["time"], v["trace_start"])
    except (SeriesTooShort, IndexError) as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(v)
    result.save_json(out / "eval.json")
    result.save_profile_csv(out / "horizon_profile.csv")
    result.save_snapshot_csv(out / "snapshot.csv")
    print(f"test NRMSE {result.nrmse:.17g}")
    return EXIT_OK


def cmd_forecast(v) -> int:
    data = _load_data(v["data"])
    model = _load_model(v["checkpoint"], data)
    horizon = v["horizon"] or model.cfg.horizon
    if horizon < 1:
        raise UsageError("--horizon must be >= 1")
    if data.T < model.cfg.seq_len:
        raise UsageError(f"need at least {model.cfg.seq_len} states, data has {data.T}")
    preds = model.forward(data.states[-model.cfg.seq_len :], horizon, "eval")[0]
    out = _out_dir(v)
    with open(out / "forecast.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + csv_header(data.K)[1:])
        for k, row in enumerate(preds, start=1):
            w.writerow([k] + [format(x, ".17g") for x in row])
    print(f"{horizon} steps -> {out / 'forecast.csv'}")
    return EXIT_OK


def cmd_gradcheck(v) -> int:
    archs = ARCHITECTURES if v["arch"] == "all" else (v["arch"],)
    ok = True
    for arch in archs:
        try:
            cfg = ModelConfig(
                architecture=arch,
                input_dim=v["input_dim"],
                hidden_size=v["hidden"],
                depth=v["depth"],
                seq_len=v["seq_len"],
                horizon=v["horizon"],
                conv_filters=v["filters"],
                conv_kernel=v["kernel"],
                dropout_rate=v["dropout"],
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        stencil, step = default_stencil(cfg)
        stencil = v["stencil"] or stencil
        step = v["step"] or step
        if stencil not in (3, 5):
            raise UsageError("--stencil must be 3 or 5")
        err = gradcheck(cfg, step=step, trials=v["trials"], seed=v["seed"], stencil=stencil)
        passed = err < v["threshold"]
        ok &= passed
        print(f"{arch:<11s} max relative error {err:.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


def _bench_run(job):
    cfg, data_states, spec, kw = job
    from .measurement import StateSeries

    _, report = train(cfg, StateSeries(data_states), spec, **kw)
    return report


def cmd_benchmark(v) -> int:
    data = _load_data(v["data"])
    spec = _split(v)
    if v["repetitions"] < 1 or v["jobs"] < 1:
        raise UsageError("--repetitions and --jobs must be >= 1")
    jobs, keys = [], []
    for arch in v["archs"]:
        for l in v["seq_lens"]:
            for run in range(v["repetitions"]):
                cfg = _model_config(v, arch=arch, seq_len=l, input_dim=data.states.shape[1]).replace(seed=v["seed"] + run)
                kw = dict(epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"], patience=v["patience"], clip_norm=v["clip_norm"])
                jobs.append((cfg, data.states, spec, kw))
                keys.append((arch, l, run))
    try:
        split_dataset(data, spec, max(v["seq_lens"]) + v["horizon"])
    except SeriesTooShort as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(v)
    start = time.perf_counter()
    if v["jobs"] == 1:
        reports = [_bench_run(j) for j in jobs]
    else:
        with ProcessPoolExecutor(v["jobs"]) as pool:
            reports = list(pool.map(_bench_run, jobs))
    table = benchmark_table(keys, reports)
    write_benchmark(out, v["seq_lens"], keys, reports, table)
    for arch, row in table.items():
        print(arch.ljust(11) + "  ".join(f"l={l}: {row[l]:.6f}" for l in v["seq_lens"]))
    print(f"{len(jobs)} runs in {time.perf_counter() - start:.0f}s -> {out / 'table.csv'}")
    return EXIT_OK


def benchmark_table(keys, reports) -> dict:
    """Mean test NRMSE per (architecture, window length)."""
    cells = {}
    for (arch, l, _), rep in zip(keys, reports):
        cells.setdefault(arch, {}).setdefault(l, []).append(rep.test_nrmse)
    return {arch: {l: float(np.mean(vals)) for l, vals in row.items()} for arch, row in cells.items()}


def write_benchmark(out: Path, seq_lens, keys, reports, table) -> None:
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + [f"l={l}" for l in seq_lens])
        for arch, row in table.items():
            w.writerow([arch] + [format(row[l], ".17g") for l in seq_lens])
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seq_len", "run", "seed", "test_nrmse", "best_epoch", "stopped_epoch", "wall_clock_seconds"])
        for (arch, l, run), rep in zip(keys, reports):
            w.writerow([arch, l, run, rep.seed, format(rep.test_nrmse, ".17g"), rep.best_epoch, rep.stopped_epoch, f"{rep.wall_clock_seconds:.3f}"])


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "gradcheck": cmd_gradcheck,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        values = resolve(args.command, args)
        return HANDLERS[args.command](values)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gridcast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataParseError as exc:
        print(f"gridcast {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, ShapeError) as exc:
        print(f"gridcast {args.command}: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    raise SystemExit(main())
