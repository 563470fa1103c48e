"""Command-line front end: ``fp8sim <subcommand> [flags]``.

Every subcommand writes CSV whose leading ``#`` lines echo the resolved
configuration as JSON, so an artifact's header can be fed back through
``--config`` to reproduce it. Output is a pure function of that config.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .experiments import BENCH_COLUMNS, allreduce_bench
from .formats import code_table, get_format
from .optimizer import SETTINGS, decoupling_ablation
from .training import POLICIES, comm_reduction_report, train
from .zero import TensorDescriptor, greedy_distribute, plan_stats

SEED_ENV = "FP8SIM_SEED"
CONFIG_PREFIX = "# config: "
SUMMARY_PREFIX = "# summary: "

TRAIN_COLUMNS = ("step", "loss", "snr_db", "underflow", "overflow", "mu", "grad_bytes")
ABLATION_COLUMNS = ("step", "spec", "loss", "diverged_flag")
ZERO_COLUMNS = ("device", "tensor_id", "size")
CODEC_COLUMNS = ("bits_hex", "value", "class")

DEFAULTS = {
    "codec-table": {"format": "e4m3"},
    "allreduce-bench": {"workers": 128, "strategy": "auto", "dist": "lognormal", "sigma": 1e-4, "steps": 10,
                        "format": "e4m3", "size": 4096, "spread": 1.0, "seed": 0},
    "ablate-optimizer": {"specs": "0,1,2a,2b,3,4", "steps": 2000, "seed": 0, "workers": 1},
    "zero-plan": {"sizes_file": None, "devices": 2},
    "train": {"policy": "fp32", "workers": 4, "steps": 2000, "seed": 0},
}


class CliError(Exception):
    """Failure that maps to exit status 1 (I/O or bad artifact contents)."""


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


class Artifact:
    """Collects header, rows and footer, then writes them in one go."""

    def __init__(self, command: str, config: dict, columns):
        self.lines = [f"# fp8sim {__version__} {command}", CONFIG_PREFIX + json.dumps(config, sort_keys=True)]
        self.columns = tuple(columns)
        self.rows: list[list[str]] = []
        self.footer: list[str] = []

    def add(self, *values) -> None:
        self.rows.append([_fmt(v) for v in values])

    def summary(self, data: dict) -> None:
        self.footer.append(SUMMARY_PREFIX + json.dumps(data, sort_keys=True, default=_fmt))

    def render(self) -> str:
        buf = io.StringIO()
        buf.write("\n".join(self.lines) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        for line in self.footer:
            buf.write(line + "\n")
        return buf.getvalue()


def _emit(art: Artifact, out: str | None) -> None:
    text = art.render()
    if not out or out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}") from exc


def _resolve(parser: argparse.ArgumentParser, command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            parser.error(f"config {args.config} must be a mapping")
        loaded = {str(k).replace("-", "_"): v for k, v in loaded.items()}
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            parser.error(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    if "seed" in cfg and os.environ.get(SEED_ENV):
        try:
            cfg["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            parser.error(f"{SEED_ENV} must be an integer")
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _cmd_codec_table(cfg: dict) -> Artifact:
    fmt = get_format(cfg["format"])
    art = Artifact("codec-table", cfg, CODEC_COLUMNS)
    width = fmt.total_bits // 4
    for code, value, cls in code_table(fmt):
        art.add(f"0x{code:0{width}x}", value, cls)
    return art


def _cmd_bench(cfg: dict) -> Artifact:
    rows = allreduce_bench(cfg["workers"], cfg["strategy"], cfg["dist"], cfg["sigma"], cfg["steps"],
                           cfg["format"], cfg["size"], cfg["seed"], cfg["spread"])
    art = Artifact("allreduce-bench", cfg, BENCH_COLUMNS)
    for r in rows:
        art.add(*(r[c] for c in BENCH_COLUMNS))
    return art


def _cmd_ablate(cfg: dict) -> Artifact:
    names = [s.strip() for s in str(cfg["specs"]).split(",") if s.strip()]
    unknown = [n for n in names if n not in SETTINGS]
    if unknown or not names:
        raise ValueError(f"unknown optimizer specs: {unknown or names}; expected from {sorted(SETTINGS)}")
    runs = decoupling_ablation(names, steps=cfg["steps"], seed=cfg["seed"], workers=cfg["workers"])
    art = Artifact("ablate-optimizer", cfg, ABLATION_COLUMNS)
    for name, run in runs.items():
        for s in run.steps:
            art.add(s.step, name, s.loss, int(run.diverged))
    art.summary({name: {"final_loss": run.final_loss, "initial_loss": run.initial_loss,
                        "diverged": run.diverged, "m2_underflow_rate": run.m2_underflow_rate}
                 for name, run in runs.items()})
    return art


def _read_sizes(path: str) -> list[TensorDescriptor]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read sizes file {path}: {exc}") from exc
    tensors = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tensors.append(TensorDescriptor(len(tensors), int(line)))
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad tensor size {line!r} ({exc})") from exc
    if not tensors:
        raise CliError(f"{path}: no tensor sizes")
    return tensors


def _cmd_zero(cfg: dict) -> Artifact:
    if not cfg["sizes_file"]:
        raise ValueError("zero-plan needs --sizes-file")
    plan = greedy_distribute(_read_sizes(cfg["sizes_file"]), cfg["devices"])
    art = Artifact("zero-plan", cfg, ZERO_COLUMNS)
    for device, part in enumerate(plan.partitions):
        for t in part:
            art.add(device, t.id, t.size_bytes)
    st = plan_stats(plan)
    art.summary({"loads": plan.loads, "min_load": st.min_load, "max_load": st.max_load,
                 "imbalance_ratio": st.imbalance_ratio})
    return art


def _cmd_train(cfg: dict) -> Artifact:
    run = train(policy=cfg["policy"], workers=cfg["workers"], steps=cfg["steps"], seed=cfg["seed"])
    art = Artifact("train", cfg, TRAIN_COLUMNS)
    for s in run.steps:
        art.add(s.step, s.loss, s.snr_db, s.underflow, s.overflow, s.mu, s.grad_bytes)
    rep = comm_reduction_report(run)
    art.summary({"initial_loss": run.initial_loss, "final_loss": run.final_loss, "diverged": run.diverged,
                 "zero_loads": run.zero_loads, **rep, **run.metadata})
    return art


# ---------------------------------------------------------------- report


def read_artifact(path: str) -> tuple[dict, list[str], list[dict], dict]:
    """Parse an artifact into (config, columns, rows, summary)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    config, summary, body = {}, {}, []
    for line in text.splitlines():
        if line.startswith(CONFIG_PREFIX):
            config = json.loads(line[len(CONFIG_PREFIX):])
        elif line.startswith(SUMMARY_PREFIX):
            summary = json.loads(line[len(SUMMARY_PREFIX):])
        elif not line.startswith("#"):
            body.append(line)
    reader = csv.reader(body)
    try:
        columns = next(reader)
    except StopIteration:
        raise CliError(f"{path}: no CSV header") from None
    rows = [dict(zip(columns, r)) for r in reader]
    return config, columns, rows, summary


def _mean(values) -> float:
    vals = [v for v in values if math.isfinite(v)]
    return sum(vals) / len(vals) if vals else math.nan


def _report_train(paths, parsed) -> Artifact:
    art = Artifact("report", {"inputs": paths}, ("file", "policy", "workers", "final_loss", "mean_snr_db",
                                                  "grad_bytes", "reduction_fraction", "diverged"))
    for path, (cfg, _, rows, summ) in zip(paths, parsed):
        final = summ.get("final_loss", float(rows[-1]["loss"]) if rows else math.nan)
        art.add(path, cfg.get("policy", ""), cfg.get("workers", ""), float(final),
                _mean(float(r["snr_db"]) for r in rows), sum(int(r["grad_bytes"]) for r in rows),
                float(summ.get("reduction_fraction", math.nan)), int(bool(summ.get("diverged", False))))
    return art


def _report_ablation(paths, parsed) -> Artifact:
    art = Artifact("report", {"inputs": paths}, ("file", "spec", "final_loss", "diverged"))
    for path, (_, _, rows, summ) in zip(paths, parsed):
        last: dict[str, dict] = {}
        for r in rows:
            last[r["spec"]] = r
        for spec, r in last.items():
            final = summ.get(spec, {}).get("final_loss", float(r["loss"]))
            art.add(path, spec, float(final), int(r["diverged_flag"]))
    return art


def _report_bench(paths, parsed) -> Artifact:
    art = Artifact("report", {"inputs": paths}, ("file", "strategy", "sigma", "mean_snr_db", "mean_underflow_rate",
                                                  "mean_overflow_rate", "ordering_ok"))
    summaries = []
    for path, (cfg, _, rows, _) in zip(paths, parsed):
        summaries.append((path, cfg, {
            "snr": _mean(float(r["snr_db"]) for r in rows),
            "under": _mean(float(r["underflow_rate"]) for r in rows),
            "over": _mean(float(r["overflow_rate"]) for r in rows),
        }))

    def key(cfg):
        return tuple(cfg.get(k) for k in ("workers", "dist", "sigma", "format", "size", "spread", "seed", "steps"))

    for path, cfg, m in summaries:
        verdict = ""
        if cfg.get("strategy") == "auto":
            peers = {c.get("strategy"): mm for _, c, mm in summaries if key(c) == key(cfg)}
            if "pre" in peers and "post" in peers:
                ok = (m["under"] <= peers["pre"]["under"] and m["over"] <= peers["post"]["over"]
                      and m["snr"] >= max(peers["pre"]["snr"], peers["post"]["snr"]) - 0.5)
                verdict = int(ok)
        art.add(path, cfg.get("strategy", ""), cfg.get("sigma", ""), m["snr"], m["under"], m["over"], verdict)
    return art


def _report_zero(paths, parsed) -> Artifact:
    art = Artifact("report", {"inputs": paths}, ("file", "devices", "min_load", "max_load", "imbalance_ratio"))
    for path, (cfg, _, rows, _) in zip(paths, parsed):
        loads: dict[int, int] = {}
        for r in rows:
            loads[int(r["device"])] = loads.get(int(r["device"]), 0) + int(r["size"])
        devices = int(cfg.get("devices", len(loads)))
        full = [loads.get(d, 0) for d in range(devices)]
        hi = max(full)
        art.add(path, devices, min(full), hi, (hi - min(full)) / hi if hi else 0.0)
    return art


_REPORTERS = {
    TRAIN_COLUMNS: _report_train,
    ABLATION_COLUMNS: _report_ablation,
    BENCH_COLUMNS: _report_bench,
    ZERO_COLUMNS: _report_zero,
}


def report(paths: list[str]) -> Artifact:
    if not paths:
        raise CliError("report needs at least one CSV")
    parsed = [read_artifact(p) for p in paths]
    schemas = {tuple(cols) for _, cols, _, _ in parsed}
    if len(schemas) != 1:
        raise CliError("schema mismatch: inputs have different column sets: "
                       + "; ".join(",".join(s) for s in sorted(schemas)))
    schema = schemas.pop()
    if schema not in _REPORTERS:
        raise CliError(f"unsupported schema: {','.join(schema)}")
    return _REPORTERS[schema](list(paths), parsed)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fp8sim", description="FP8 mixed-precision training simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML file with flag values (unknown keys are rejected)")
        p.add_argument("--out", help="output CSV path (default: stdout)")
        return p

    fmt_choices = ["e4m3", "e5m2"]
    p = add("codec-table", "list every code of an FP8 format")
    p.add_argument("--format", choices=fmt_choices)

    p = add("allreduce-bench", "per-step metrics of a simulated FP8 gradient all-reduce")
    p.add_argument("--workers", type=int)
    p.add_argument("--strategy", choices=["pre", "post", "auto", "shared"])
    p.add_argument("--dist", choices=["normal", "lognormal"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--format", choices=fmt_choices)
    p.add_argument("--size", type=int, help="elements per gradient tensor")
    p.add_argument("--spread", type=float, help="log-scale width of lognormal magnitudes")
    p.add_argument("--seed", type=int)

    p = add("ablate-optimizer", "train once per optimizer precision setting")
    p.add_argument("--specs", help="comma-separated settings, e.g. 0,1,2a,2b,3,4")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)

    p = add("zero-plan", "greedy whole-tensor placement of optimizer state")
    p.add_argument("--sizes-file", dest="sizes_file", help="newline-delimited tensor sizes in bytes")
    p.add_argument("--devices", type=int)

    p = add("train", "train the tiny model under a mixed-precision policy")
    p.add_argument("--policy", choices=sorted(POLICIES))
    p.add_argument("--workers", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("report", help="summarise artifacts of one kind into a comparison table")
    p.add_argument("csvs", nargs="*", help="CSV artifacts produced by fp8sim")
    p.add_argument("--out", help="output CSV path (default: stdout)")
    return parser


_COMMANDS = {
    "codec-table": _cmd_codec_table,
    "allreduce-bench": _cmd_bench,
    "ablate-optimizer": _cmd_ablate,
    "zero-plan": _cmd_zero,
    "train": _cmd_train,
}


def _validate(parser, command: str, cfg: dict) -> None:
    checks = {
        "workers": lambda v: isinstance(v, int) and v >= 1,
        "devices": lambda v: isinstance(v, int) and v >= 1,
        "steps": lambda v: isinstance(v, int) and v >= 0,
        "size": lambda v: isinstance(v, int) and v >= 1,
        "seed": lambda v: isinstance(v, int) and v >= 0,
        "sigma": lambda v: isinstance(v, (int, float)) and v > 0,
        "spread": lambda v: isinstance(v, (int, float)) and v >= 0,
        "format": lambda v: str(v).lower() in ("e4m3", "e5m2"),
        "strategy": lambda v: v in ("pre", "post", "auto", "shared"),
        "dist": lambda v: v in ("normal", "lognormal"),
        "policy": lambda v: v in POLICIES,
    }
    for key, ok in checks.items():
        if key in cfg and not ok(cfg[key]):
            parser.error(f"{command}: invalid value for {key}: {cfg[key]!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            if not args.csvs:
                parser.error("report: need at least one CSV")
            _emit(report(args.csvs), args.out)
            return 0
        cfg = _resolve(parser, args.command, args)
        _validate(parser, args.command, cfg)
        _emit(_COMMANDS[args.command](cfg), args.out)
    except CliError as exc:
        print(f"fp8sim: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"fp8sim: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
