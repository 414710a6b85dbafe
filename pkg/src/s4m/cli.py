"""Command-line entry point.

Subcommands: synth, corrupt, split, train, eval, compare, bank inspect,
kernel dump.  Run configuration comes from an INI file (sections below) and
``--set section.key=value`` / dedicated flags, flags winning.  Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import mds
from .atpm import bank_from_state, bank_state
from .data import DataError, inject_missing, load_csv, overall_missing_ratio, save_csv, synth_generate
from .ssm import DiscretizationError
from .train import (METHODS, S4M, TrainConfig, TrainingError, derive_seed, make_model,
                    masked_metrics, metrics, predict, prepare_data, run_method, write_comparison_csv,
                    write_metrics_csv, write_timing_csv)

log = logging.getLogger("s4m")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# section -> keys; every TrainConfig field lives in exactly one section
SECTIONS: dict[str, tuple[str, ...]] = {
    "train": ("lr", "batch_size", "max_epochs", "patience", "seed", "lookback", "horizon",
              "train_stride", "eval_stride", "shuffle", "loss_mask"),
    "mds_s4": ("H", "R", "F_ch", "n_blocks", "dropout", "train_A", "no_mask"),
    "atpm": ("gamma", "K1", "K2", "top_k", "tau1", "tau2", "s", "W_emb", "n_samples", "k_init", "no_atpm"),
    "baselines": ("decay_lambda",),
    "data": ("input", "clean"),
    "run": ("out_dir", "method", "checkpoint"),
}
RUN_DEFAULTS = {"input": "", "clean": "", "out_dir": "out", "method": "s4m", "checkpoint": ""}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


class CliConfigError(ValueError):
    pass


def _section_of(key: str) -> str:
    for sec, keys in SECTIONS.items():
        if key in keys:
            return sec
    raise CliConfigError(f"unknown key {key!r}")


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES.get(key, "str")
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise CliConfigError(f"{_section_of(key)}.{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    """Defaults <- INI file <- ``section.key=value`` overrides."""
    resolved = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    resolved.update(RUN_DEFAULTS)
    raw: dict[str, str] = {}
    if path:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            with open(path) as f:
                cp.read_file(f)
        except OSError as e:
            raise CliConfigError(f"cannot read config {path}: {e}") from None
        except configparser.Error as e:
            raise CliConfigError(f"{path}: {e}") from None
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise CliConfigError(f"{path}: unknown section [{sec}]")
            for key, val in cp.items(sec):
                if key not in SECTIONS[sec]:
                    raise CliConfigError(f"{path}: unknown key {sec}.{key}")
                raw[key] = val
    for item in overrides:
        path_key, sep, val = item.partition("=")
        sec, dot, key = path_key.partition(".")
        if not sep or not dot or sec not in SECTIONS or key not in SECTIONS[sec]:
            raise CliConfigError(f"bad override {item!r} (expected section.key=value with a known key)")
        raw[key] = val
    for key, val in raw.items():
        resolved[key] = _convert(key, val)
    return resolved


def train_config(resolved: dict) -> TrainConfig:
    try:
        return TrainConfig(**{k: resolved[k] for k in TrainConfig.keys()})
    except ValueError as e:
        raise CliConfigError(str(e)) from None


def format_config(resolved: dict) -> str:
    lines = []
    for sec, keys in SECTIONS.items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {resolved[k]}" for k in keys)
        lines.append("")
    return "\n".join(lines)


def echo_config(out_dir: str, resolved: dict) -> None:
    with open(os.path.join(out_dir, "config.resolved.ini"), "w") as f:
        f.write(format_config(resolved))


# ---------------------------------------------------------------- helpers

def _load_frame(path: str, what: str):
    if not path:
        raise CliConfigError(f"data.{what}: no path given")
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {path}")
    return load_csv(path)


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _model_state(model, method: str, cfg: TrainConfig, D: int):
    arrays = {k: v.data for k, v in model.all_tensors().items()}
    meta = {"method": method, "D": str(D)}
    meta.update({f"config.{k}": repr(getattr(cfg, k)) for k in TrainConfig.keys()})
    if getattr(model, "bank", None) is not None:
        b_arr, b_meta = bank_state(model.bank)
        arrays.update(b_arr)
        meta.update(b_meta)
    return arrays, meta


def load_model(path: str):
    """Rebuild (model, method, cfg) from a checkpoint written by ``train``."""
    if not path:
        raise CliConfigError("run.checkpoint: no path given")
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    try:
        arrays, meta = mds.load_checkpoint(path)
        method, D = meta["method"], int(meta["D"])
        cfg = train_config({k: _convert(k, meta[f"config.{k}"])
                            for k in TrainConfig.keys()})
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed checkpoint ({e})") from None
    model = make_model(method, D, cfg)
    if hasattr(model, "method"):
        model.method = method
    for name, t in model.all_tensors().items():
        if name not in arrays or arrays[name].shape != t.shape:
            raise DataError(f"{path}: tensor {name} missing or misshapen")
        t.data[...] = arrays[name]
    if "bank.size" in meta:
        model.bank = bank_from_state(arrays, meta)
    return model, method, cfg


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    frame = synth_generate(args.T, args.D, args.seed, data_mod.SynthSpec.default(args.D, sigma=args.sigma))
    save_csv(frame, args.out)
    spec = data_mod.SynthSpec.default(args.D, sigma=args.sigma)
    data_mod.write_manifest(args.out + ".manifest", {
        "kind": "synth", "T": args.T, "D": args.D, "seed": args.seed, "sigma": repr(args.sigma),
        "periods": ",".join(map(repr, spec.periods)), "amplitudes": ",".join(map(repr, spec.amplitudes)),
        "slopes": ",".join(map(repr, spec.slopes)),
        "mixing": ";".join(",".join(repr(float(v)) for v in row) for row in spec.mixing)})
    return EXIT_OK


def cmd_corrupt(args) -> int:
    frame = _load_frame(args.input, "input")
    try:
        out = inject_missing(frame, args.pattern, args.r, args.block_len, args.seed)
    except data_mod.ConfigError as e:
        raise CliConfigError(str(e)) from None
    save_csv(out, args.out)
    data_mod.write_manifest(args.out + ".manifest", {
        "kind": "corrupt", "source": os.path.basename(args.input), "pattern": args.pattern, "r": repr(args.r),
        "block_len": args.block_len, "seed": args.seed, "missing_ratio": repr(overall_missing_ratio(out))})
    return EXIT_OK


def cmd_split(args) -> int:
    frame = _load_frame(args.input, "input")
    try:
        ratios = tuple(float(v) for v in args.ratios.split(","))
        parts = data_mod.chronological_split(frame, ratios)
    except (ValueError, data_mod.ConfigError) as e:
        raise CliConfigError(f"--ratios: {e}") from None
    _ensure_dir(args.out_dir)
    entries = {"kind": "split", "source": os.path.basename(args.input), "ratios": args.ratios}
    for name, part in zip(("train", "val", "test"), parts):
        save_csv(part, os.path.join(args.out_dir, f"{name}.csv"))
        entries[f"{name}_rows"] = part.T
    data_mod.write_manifest(os.path.join(args.out_dir, "split.manifest"), entries)
    return EXIT_OK


def _resolve(args) -> dict:
    overrides = list(args.set or [])
    for flag, key in (("seed", "train.seed"), ("lr", "train.lr"), ("max_epochs", "train.max_epochs"),
                      ("input", "data.input"), ("clean", "data.clean"), ("out_dir", "run.out_dir"),
                      ("method", "run.method"), ("checkpoint", "run.checkpoint")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    resolved = load_config(args.config, overrides)
    if resolved["method"] not in METHODS:
        raise CliConfigError(f"run.method: unknown method {resolved['method']!r}; choose from {', '.join(METHODS)}")
    return resolved


def _frames(resolved):
    cor = _load_frame(resolved["input"], "input")
    clean = _load_frame(resolved["clean"], "clean") if resolved["clean"] else None
    if clean is not None and clean.values.shape != cor.values.shape:
        raise DataError(f"clean frame {clean.values.shape} does not match input {cor.values.shape}")
    return cor, clean


def cmd_train(args) -> int:
    resolved = _resolve(args)
    cfg = train_config(resolved)
    cor, clean = _frames(resolved)
    out = _ensure_dir(resolved["out_dir"])
    echo_config(out, resolved)
    report, model = run_method(resolved["method"], cor, clean, cfg)
    arrays, meta = _model_state(model, resolved["method"], cfg, cor.D)
    mds.save_checkpoint(os.path.join(out, "checkpoint.txt"), arrays, meta)
    if getattr(model, "bank", None) is not None:
        with open(os.path.join(out, "bank.txt"), "w") as f:
            f.write(model.bank.dump())
    write_metrics_csv(os.path.join(out, "metrics.csv"), [report])
    write_timing_csv(os.path.join(out, "timing.csv"), [report])
    print(f"{report.method}: test MAE {report.test_mae:.6f} MSE {report.test_mse:.6f} "
          f"(best epoch {report.best_epoch})")
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved = _resolve(args)
    model, method, cfg = load_model(resolved["checkpoint"])
    cor, clean = _frames(resolved)
    if cor.D != model.D:
        raise DataError(f"checkpoint expects {model.D} variables, input has {cor.D}")
    impute = {"s4_mean": "mean", "s4_ffill": "ffill", "s4_decay": "decay"}.get(method)
    data = prepare_data(cor, clean, cfg, impute)
    pred = predict(model, data.test)
    mae, mse = metrics(pred, data.test.y_true)
    mae_o, mse_o = masked_metrics(pred, data.test.y, data.test.ym)
    out = _ensure_dir(resolved["out_dir"])
    echo_config(out, resolved)
    path = os.path.join(out, "eval_metrics.csv")
    with open(path, "w") as f:
        f.write("method,split,metric,value,epoch\n")
        for name, v in (("mae", mae), ("mse", mse), ("mae_observed", mae_o), ("mse_observed", mse_o)):
            f.write(f"{method},test,{name},{v!r},0\n")
    print(f"{method}: test MAE {mae:.6f} MSE {mse:.6f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    resolved = _resolve(args)
    cfg = train_config(resolved)
    cor, clean = _frames(resolved)
    out = _ensure_dir(resolved["out_dir"])
    echo_config(out, resolved)
    reports = []
    for method in METHODS:
        report, _ = run_method(method, cor, clean, cfg)
        reports.append(report)
        print(f"{method:12s} MAE {report.test_mae:.6f} MSE {report.test_mse:.6f}", flush=True)
    write_comparison_csv(os.path.join(out, "comparison.csv"), reports)
    write_metrics_csv(os.path.join(out, "metrics.csv"), reports)
    write_timing_csv(os.path.join(out, "timing.csv"), reports)
    return EXIT_OK


def _fresh_model(resolved):
    """Untrained model whose bank (if any) is initialized from the first training batch."""
    cfg = train_config(resolved)
    cor, clean = _frames(resolved)
    method = resolved["method"]
    model = make_model(method, cor.D, cfg)
    if isinstance(model, S4M) and not model.cfg.no_atpm:
        from .atpm import extract_local_stats
        data = prepare_data(cor, clean, cfg)
        batch = data.train.take(np.arange(min(cfg.batch_size, len(data.train))))
        z = extract_local_stats(batch.x, batch.m, model.decay, fallback=0.0).z.data
        model.init_bank(z, np.random.default_rng(derive_seed(cfg.seed, "bank")))
    return model, method, cfg


def _write_or_print(text: str, path: str | None) -> None:
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_bank_inspect(args) -> int:
    resolved = _resolve(args)
    if resolved["checkpoint"]:
        model, _, _ = load_model(resolved["checkpoint"])
    else:
        model, _, _ = _fresh_model(resolved)
    if getattr(model, "bank", None) is None:
        raise CliConfigError("model has no prototype bank (baseline or no_atpm run)")
    _write_or_print(model.bank.dump(), args.out)
    return EXIT_OK


def cmd_kernel_dump(args) -> int:
    """CSV of SSM kernels: block, stream, channel, lag, value."""
    resolved = _resolve(args)
    model, _, cfg = load_model(resolved["checkpoint"]) if resolved["checkpoint"] else _fresh_model(resolved)
    L = args.L or cfg.lookback
    rows = ["block,stream,channel,lag,value"]
    with ad.no_grad():
        for b, blk in enumerate(model.backbone.blocks):
            if blk.dual:
                k1, k2 = blk.ssm.kernels(L)
                streams = (("obs", k1.data), ("mask", k2.data))
            else:
                streams = (("obs", blk.ssm.kernel(L).data),)
            for name, k in streams:
                for r in range(k.shape[1]):
                    rows.extend(f"{b},{name},{r},{i},{float(k[i, r])!r}" for i in range(L))
    _write_or_print("\n".join(rows) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    p.add_argument("--input", help="corrupted (observed) series CSV")
    p.add_argument("--clean", help="ground-truth series CSV for evaluation")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--method", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="s4m", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic seasonal series")
    p.add_argument("--T", type=int, default=4000)
    p.add_argument("--D", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", help="hide values in blocks")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pattern", default="time-point")
    p.add_argument("--r", type=float, default=0.12)
    p.add_argument("--block-len", dest="block_len", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("split", help="chronological train/val/test split")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.set_defaults(func=cmd_split)

    for name, func, text in (("train", cmd_train, "train one method and write a checkpoint"),
                             ("compare", cmd_compare, "train every method and write a comparison table")):
        p = sub.add_parser(name, help=text)
        _run_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _run_flags(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bank", help="prototype bank tools")
    bsub = p.add_subparsers(dest="bank_command", required=True)
    q = bsub.add_parser("inspect", help="dump cluster records")
    _run_flags(q)
    q.add_argument("--checkpoint")
    q.add_argument("--out")
    q.set_defaults(func=cmd_bank_inspect)

    p = sub.add_parser("kernel", help="SSM kernel tools")
    ksub = p.add_subparsers(dest="kernel_command", required=True)
    q = ksub.add_parser("dump", help="write SSM kernels as CSV")
    _run_flags(q)
    q.add_argument("--checkpoint")
    q.add_argument("--L", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_kernel_dump)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliConfigError, data_mod.ConfigError, mds.ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, ad.NumericError, DiscretizationError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
