"""Command-line front end.

Three subcommands:

* ``simulate`` -- one run, report to stdout as json/csv/text.
* ``sweep`` -- one CSV row per point along a seq/clusters/fmt axis.
* ``validate`` -- desk-scale numeric checks (``--recipes`` adds the
  figure-level trend reproductions).

All behaviour is controlled by explicit flags; no environment variables
are consulted. Exit codes: 0 success, 1 failed validation, 2 bad config.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys

from .executor import RunReport, run_ar_generate, run_nar, run_vit
from .machine import (
    ConfigError,
    MachineConfig,
    default_machine_config,
    load_machine_config,
    replace_config,
)
from .models import get_model, load_model_config
from .numerics import parse_format
from . import validation

_CSV_COLUMNS = ("axis", "throughput", "total_ns", "fpu_util",
                "hbm_read_bytes", "hbm_write_bytes")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmsim",
                                description="transformer kernel/machine simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def add_run_flags(sp):
        sp.add_argument("--model", help="preset name (vit-b, vit-l, vit-h, gpt3-xl, gpt-j)")
        sp.add_argument("--model-config", help="path to a model config JSON")
        sp.add_argument("--machine-config", help="path to a machine config JSON")
        sp.add_argument("--mode", choices=("nar", "ar", "vit"),
                        help="execution mode (default: vit for encoders, nar for decoders)")
        sp.add_argument("--fmt", default="fp32", help="number format")
        sp.add_argument("--seq", type=int, help="sequence length / prompt length")
        sp.add_argument("--new-tokens", type=int, help="tokens to generate (ar mode only)")
        sp.add_argument("--clusters", type=int, help="total cluster count override")
        sp.add_argument("--groups", type=int, help="group count override")
        sp.add_argument("--fused", action=argparse.BooleanOptionalAction, default=True,
                        help="fuse head merge and GELU (default on)")
        sp.add_argument("--isa", choices=("baseline", "ssr-frep"),
                        help="ISA mode override")
        sp.add_argument("--out", choices=("json", "csv", "text"), default="json")
        sp.add_argument("--dump-plan", action="store_true",
                        help="include tiling plans in the report")
        sp.add_argument("--seed", type=int, default=0)

    sim = sub.add_parser("simulate", help="run one configuration")
    add_run_flags(sim)

    sw = sub.add_parser("sweep", help="sweep one axis, emit CSV")
    add_run_flags(sw)
    sw.add_argument("--axis", choices=("seq", "clusters", "fmt"), required=True)
    sw.add_argument("--values", required=True,
                    help="comma-separated axis values")

    val = sub.add_parser("validate", help="run the numeric validation suite")
    val.add_argument("--recipes", action="store_true",
                     help="also replay the trend-reproduction recipes")
    val.add_argument("--seed", type=int, default=0)
    return p


def _resolve_machine(args) -> MachineConfig:
    cfg = load_machine_config(args.machine_config) if args.machine_config \
        else default_machine_config()
    if args.clusters is not None:
        if args.groups is not None:
            if args.clusters % args.groups:
                raise ConfigError("clusters", f"{args.clusters} not divisible by {args.groups} groups")
            cfg = replace_config(cfg, clusters_per_group=args.clusters // args.groups,
                                 groups=args.groups)
        else:
            cfg = cfg.with_clusters(args.clusters)
    elif args.groups is not None:
        cfg = replace_config(cfg, groups=args.groups)
    if args.isa is not None:
        cfg = replace_config(cfg, isa_mode=args.isa.replace("-", "_"))
    return cfg


def _resolve_model(args):
    if args.model_config:
        return load_model_config(args.model_config)
    if not args.model:
        raise ConfigError("model", "either --model or --model-config is required")
    return get_model(args.model)


def _run_one(args, model, cfg, fmt, mode, seq) -> RunReport:
    if mode == "vit":
        return run_vit(model, fmt, cfg, fused=args.fused, collect_plans=args.dump_plan)
    if mode == "nar":
        return run_nar(model, seq, fmt, cfg, fused=args.fused, collect_plans=args.dump_plan)
    if mode == "ar":
        n_new = args.new_tokens if args.new_tokens is not None else 16
        return run_ar_generate(model, seq, n_new, fmt, cfg, fused=args.fused,
                               collect_plans=args.dump_plan, logits_seed=args.seed)
    raise ConfigError("mode", f"unknown mode {mode!r}")


def _infer_mode(args, model) -> str:
    if args.mode:
        mode = args.mode
    else:
        mode = "vit" if model.kind == "encoder" else "nar"
    if args.new_tokens is not None and mode != "ar":
        raise ConfigError("new_tokens", "--new-tokens is only valid in ar mode")
    if mode == "vit" and model.kind != "encoder":
        raise ConfigError("mode", f"{model.name} is not an encoder model")
    return mode


def _default_seq(model, mode) -> int:
    return model.seq_default if mode != "vit" else model.seq_default


def _throughput(report: RunReport) -> tuple[str, float]:
    if report.images_per_s is not None:
        return "images_per_s", report.images_per_s
    return "tokens_per_s", report.tokens_per_s


def _emit_text(report: RunReport, out) -> None:
    name, value = _throughput(report)
    print(f"model={report.model} mode={report.mode} fmt={report.fmt} "
          f"clusters={report.clusters} isa={report.isa_mode} fused={report.fused}", file=out)
    print(f"total           {report.total_ns / 1e6:14.3f} ms", file=out)
    print(f"{name:<15s} {value:14.3f}", file=out)
    print(f"fpu_utilization {report.fpu_utilization * 100:14.2f} %", file=out)
    print(f"hbm_read        {report.hbm_bytes_read / 1e6:14.2f} MB", file=out)
    print(f"hbm_write       {report.hbm_bytes_written / 1e6:14.2f} MB", file=out)
    print("kernel latency breakdown:", file=out)
    for bucket, ns in sorted(report.breakdown.items(), key=lambda kv: -kv[1]):
        share = ns / report.total_ns * 100 if report.total_ns else 0.0
        print(f"  {bucket:<16s} {ns / 1e6:14.3f} ms {share:6.2f} %", file=out)
    for note in report.assumptions:
        print(f"note: {note}", file=out)


def _emit_report(report: RunReport, how: str, out) -> None:
    if how == "json":
        json.dump(report.to_dict(), out, indent=2)
        out.write("\n")
    elif how == "csv":
        name, value = _throughput(report)
        writer = csv.writer(out)
        writer.writerow(_CSV_COLUMNS)
        writer.writerow(["-", value, report.total_ns, report.fpu_utilization,
                         report.hbm_bytes_read, report.hbm_bytes_written])
    else:
        _emit_text(report, out)


def _cmd_simulate(args) -> int:
    model = _resolve_model(args)
    cfg = _resolve_machine(args)
    fmt = parse_format(args.fmt)
    mode = _infer_mode(args, model)
    seq = args.seq if args.seq is not None else _default_seq(model, mode)
    report = _run_one(args, model, cfg, fmt, mode, seq)
    _emit_report(report, args.out, sys.stdout)
    return 0


def _cmd_sweep(args) -> int:
    model = _resolve_model(args)
    fmt_flag = args.fmt
    mode = _infer_mode(args, model)
    values = [v for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("values", "sweep axis value list is empty")
    writer = csv.writer(sys.stdout)
    writer.writerow(_CSV_COLUMNS)
    for raw in values:
        raw = raw.strip()
        args_clusters = args.clusters
        seq = args.seq if args.seq is not None else _default_seq(model, mode)
        fmt = parse_format(fmt_flag)
        if args.axis == "seq":
            seq = int(raw)
        elif args.axis == "clusters":
            args_clusters = int(raw)
        else:
            fmt = parse_format(raw)
        ns = argparse.Namespace(**vars(args))
        ns.clusters = args_clusters
        cfg = _resolve_machine(ns)
        report = _run_one(args, model, cfg, fmt, mode, seq)
        _, value = _throughput(report)
        writer.writerow([raw, value, report.total_ns, report.fpu_utilization,
                         report.hbm_bytes_read, report.hbm_bytes_written])
    return 0


def _cmd_validate(args) -> int:
    results = validation.run_checks(seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    ok = not failed
    if args.recipes:
        print("--- recipes ---")
        ok &= validation.run_recipes(seed=args.seed)
    if not ok:
        first = failed[0].name if failed else "recipes"
        print(f"FAILED: {first}")
        return 1
    print("all checks passed")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "validate":
            return _cmd_validate(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
