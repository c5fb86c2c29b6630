"""Command-line front end: trace generation, simulation, policy comparison,
and sensitivity sweeps.

Outputs are deterministic given config and seed; wall-clock metadata goes to
a separate run_meta.json sidecar so primary outputs stay byte-identical
across reruns. All machine-readable numbers are plain SI units.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, apply_overrides, config_from_dict, load_config
from .model import InvalidConfig
from .scheduler import Policy, UnknownPolicy
from .sim import (
    BASELINE_POLICIES,
    MismatchedTraceModel,
    SWEEP_AXES,
    compare,
    resolve_trace,
    simulate,
    sweep,
)
from .trace import ParseError, SchemaViolation, save_trace

import yaml


class _Once(argparse.Action):
    """Flags strictly override config keys; passing the same flag twice is
    ambiguous and rejected."""

    def __call__(self, parser, namespace, values, option_string=None):
        if getattr(namespace, f"_seen_{self.dest}", False):
            parser.error(f"duplicate flag {option_string}")
        setattr(namespace, f"_seen_{self.dest}", True)
        setattr(namespace, self.dest, values)


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", required=True, action=_Once,
                   help="experiment config file (YAML or JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE",
                   help="override a config key by dotted path, "
                        "e.g. --set migration.enabled=false")


def _parse_override_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _load_cfg(args):
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        if key in overrides:
            raise ConfigError(f"conflicting duplicate override for {key!r}")
        overrides[key] = _parse_override_value(value)
    return config_from_dict(apply_overrides(raw, overrides))


def _out_dir(cfg, args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out: Path) -> None:
    meta = {"created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "tool_version": __version__}
    (out / "run_meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")


def _summary_lines(run) -> list[str]:
    lines = [
        f"policy                {run.policy}",
        f"total decode time     {run.total_decode_time_s:.6f} s",
        f"throughput            {run.throughput_tokens_per_s:.2f} tokens/s",
        "utilization           gpu {gpu:.1%}  cpu {cpu:.1%}  ndp {ndp:.1%}".format(
            **run.utilization),
        "token shares          hot {hot:.1%}  warm {warm:.1%}  cold {cold:.1%}".format(
            **run.class_token_shares),
        "expert shares         hot {hot:.1%}  warm {warm:.1%}  cold {cold:.1%}".format(
            **run.class_expert_shares),
        f"migrations applied    {run.migration_tasks_applied} "
        f"(stale {run.migration_tasks_stale})",
        f"migration overhead    {run.migration_overhead_s:.6f} s "
        f"({run.migration_overhead_fraction:.2%} of decode time)",
    ]
    return lines


def cmd_gen_trace(args) -> int:
    cfg = _load_cfg(args)
    if cfg.trace.generator is None:
        raise ConfigError("gen-trace requires a generator trace source")
    trace = resolve_trace(cfg)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "trace.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trace(trace, out)
    print(f"wrote {trace.num_steps} steps x {trace.num_layers} layers to {out}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    result = simulate(resolve_trace(cfg), cfg)
    out = _out_dir(cfg, args)
    _write_json(out / "report.json", result.run.to_dict())
    _write_json(out / "step_reports.json", [s.to_dict() for s in result.steps])
    with open(out / "migration_log.jsonl", "w") as f:
        for rec in result.migration_log:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    _write_meta(out)
    print("\n".join(_summary_lines(result.run)))
    print(f"reports written to {out}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    if args.policies:
        policies = tuple(Policy.parse(p) for p in args.policies.split(","))
    else:
        policies = (Policy.TRI,) + BASELINE_POLICIES
    result = compare(cfg, policies)
    out = _out_dir(cfg, args)

    head = policies[0].value
    rows = []
    for policy in policies:
        run = result.results[policy.value].run
        speedup = (run.total_decode_time_s
                   / result.results[head].run.total_decode_time_s)
        rows.append({"policy": policy.value,
                     "total_decode_time_s": run.total_decode_time_s,
                     "throughput_tokens_per_s": run.throughput_tokens_per_s,
                     f"time_ratio_vs_{head}": speedup})
        _write_json(out / f"report_{policy.value}.json", run.to_dict())
    with open(out / "compare.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    _write_meta(out)

    width = max(len(r["policy"]) for r in rows)
    print(f"{'policy':<{width}}  {'decode_s':>12}  {'tokens/s':>12}  "
          f"{'time_vs_' + head:>14}")
    for r in rows:
        print(f"{r['policy']:<{width}}  {r['total_decode_time_s']:>12.6f}  "
              f"{r['throughput_tokens_per_s']:>12.2f}  "
              f"{r[f'time_ratio_vs_{head}']:>14.3f}")
    for p, s in result.speedup_vs.items():
        print(f"{head} speedup over {p}: {s:.2f}x")
    print(f"reports written to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    values = [float(v) for v in args.values.split(",")]
    rows = sweep(cfg, args.axis, values)
    out = _out_dir(cfg, args)
    path = out / f"sweep_{args.axis}.csv"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([args.axis, "total_decode_time_s",
                         "throughput_tokens_per_s", "gpu_utilization",
                         "cpu_utilization", "ndp_utilization"])
        for v, run in rows:
            writer.writerow([v, run.total_decode_time_s,
                             run.throughput_tokens_per_s,
                             run.utilization["gpu"], run.utilization["cpu"],
                             run.utilization["ndp"]])
    _write_meta(out)
    for v, run in rows:
        print(f"{args.axis}={v:g}: decode {run.total_decode_time_s:.6f} s, "
              f"{run.throughput_tokens_per_s:.2f} tokens/s")
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moesim",
        description="Trace-driven simulator for MoE decode expert offloading "
                    "across GPU, matrix-extension CPU, and per-DIMM NDP.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic activation trace")
    _add_config_arg(p)
    p.add_argument("--out", action=_Once, help="output trace path (.jsonl)")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("simulate", help="run one policy over a trace")
    _add_config_arg(p)
    p.add_argument("--out", action=_Once, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run several policies on one trace")
    _add_config_arg(p)
    p.add_argument("--policies", action=_Once,
                   help="comma-separated policies (first is the reference)")
    p.add_argument("--out", action=_Once, help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="sensitivity sweep over one axis")
    _add_config_arg(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES, action=_Once)
    p.add_argument("--values", required=True, action=_Once,
                   help="comma-separated axis values")
    p.add_argument("--out", action=_Once, help="output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidConfig, UnknownPolicy, ParseError,
            SchemaViolation, MismatchedTraceModel, ValueError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
