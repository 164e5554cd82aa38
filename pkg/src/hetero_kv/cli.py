"""Command-line front end.

Exit codes: 0 success, 1 config or usage error, 2 trace error, 3 run guard.
"""

from __future__ import annotations

import argparse
import inspect
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, PageSizeStrategy, WorkloadProfile, load_model_config, predict_uniform_waste
from .layout import build_address_map, dump_layout
from .memory import Strategy
from .simulator import EngineConfig, RunGuardError, simulate
from .trace import GENERATORS, TraceError, dumps_trace, load_bundled_trace, read_trace

EXIT_OK, EXIT_CONFIG, EXIT_TRACE, EXIT_GUARD = 0, 1, 2, 3

SWEEP_COLUMNS = ("model", "strategy", "mean_decode_batch", "waste_fraction", "hit_rate", "steps", "preemptions")


def _load_trace(arg: str):
    # a path wins over a bundled trace of the same name
    if Path(arg).exists() or "/" in arg:
        return read_trace(arg)
    return load_bundled_trace(arg)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def _positive_float(value: str) -> float:
    f = float(value)
    if not f > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return f


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", required=True)
    p.add_argument("--memory-bytes", type=int, required=True)
    p.add_argument("--chunk-size", type=int, default=512)
    p.add_argument("--prefix-caching", type=_on_off, default=False, metavar="on|off")
    p.add_argument("--vision-mode", choices=["on_demand", "reuse"], default="on_demand")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=_positive_float, default=1.0,
                   help="shrink model windows and the memory budget by this factor")
    p.add_argument("--max-steps", type=int, default=1_000_000)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetero-kv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run one strategy on one trace")
    p.add_argument("--model-config", required=True)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="lcm")
    _run_flags(p)
    p.add_argument("--metrics-out")
    p.add_argument("--summary-out")

    p = sub.add_parser("sweep", help="run every (config, strategy) pair on one trace")
    p.add_argument("--model-config", action="append", required=True, help="repeatable")
    p.add_argument("--strategy", action="append", choices=[s.value for s in Strategy],
                   help="repeatable (default: lcm and uniform)")
    _run_flags(p)
    p.add_argument("--summary-out", help="write the table here instead of stdout")

    p = sub.add_parser("predict-waste", help="analytic waste fraction of uniform paging")
    p.add_argument("--model-config", required=True)
    p.add_argument("-T", "--text-tokens", type=float, required=True)
    p.add_argument("-I", "--image-tokens", type=float, default=0.0)
    p.add_argument("-E", "--embedding-bytes", type=float, default=0.0,
                   help="per-layer bytes per token applied to every group (0: use the config)")

    p = sub.add_parser("gen-trace", help="write a synthetic trace")
    p.add_argument("--kind", choices=sorted(GENERATORS), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=_positive_float, default=1.0, help="shrink token counts by this factor")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="generator parameter, repeatable (e.g. num_requests=20)")
    p.add_argument("--out", help="output path (default stdout)")

    p = sub.add_parser("layout-dump", help="print the byte layout of the first large pages")
    p.add_argument("--model-config", required=True)
    p.add_argument("--strategy", choices=[s.value for s in PageSizeStrategy if s is not PageSizeStrategy.UNIFORM],
                   default="lcm")
    p.add_argument("--num-large-pages", type=int, default=2)
    p.add_argument("--out")
    return parser


def _engine_config(args, strategy: str) -> EngineConfig:
    return EngineConfig(
        memory_bytes=max(1, round(args.memory_bytes * args.scale)),
        strategy=strategy,
        chunk_size=args.chunk_size,
        prefix_caching=args.prefix_caching,
        vision_mode=args.vision_mode,
        seed=args.seed,
        max_steps=args.max_steps,
    )


def _load_spec(path: str, scale: float = 1.0):
    spec = load_model_config(path)
    return spec.scaled(scale) if scale != 1.0 else spec


def _write(path: Optional[str], text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_simulate(args) -> int:
    spec = _load_spec(args.model_config, args.scale)
    trace = _load_trace(args.trace)
    report = simulate(spec, trace, _engine_config(args, args.strategy))
    if args.metrics_out:
        Path(args.metrics_out).write_text(report.metrics_csv())
    _write(args.summary_out, report.summary_json())
    return EXIT_OK


def _format_cell(value) -> str:
    return f"{value:.6f}" if isinstance(value, float) else str(value)


def cmd_sweep(args) -> int:
    # validate everything up front; only run errors are reported per cell
    specs = [(path, _load_spec(path, args.scale)) for path in args.model_config]
    trace = _load_trace(args.trace)
    strategies = args.strategy or ["lcm", "uniform"]
    configs = {s: _engine_config(args, s) for s in strategies}
    lines = ["\t".join(SWEEP_COLUMNS)]
    for path, spec in specs:
        for s in strategies:
            try:
                summary = simulate(spec, trace, configs[s]).summary
            except (RunGuardError, ConfigError) as e:
                lines.append(f"{spec.name}\t{s}\terror: {e}")
                continue
            lines.append("\t".join(_format_cell(summary[c]) for c in SWEEP_COLUMNS))
    _write(args.summary_out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_predict_waste(args) -> int:
    spec = load_model_config(args.model_config)
    profile = WorkloadProfile(args.text_tokens, args.image_tokens, args.embedding_bytes)
    print(repr(predict_uniform_waste(spec, profile)))
    return EXIT_OK


def _parse_params(pairs: Sequence[str]) -> dict:
    params = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise TraceError(f"bad --param {pair!r}, expected KEY=VALUE")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    return params


def cmd_gen_trace(args) -> int:
    gen = GENERATORS[args.kind]
    params = _parse_params(args.param)
    params["scale"] = args.scale
    if "seed" in inspect.signature(gen).parameters:
        params["seed"] = args.seed
    try:
        requests = gen(**params)
    except TypeError as e:
        raise TraceError(f"{args.kind}: {e}") from None
    _write(args.out, dumps_trace(requests))
    return EXIT_OK


def cmd_layout_dump(args) -> int:
    spec = load_model_config(args.model_config)
    if args.num_large_pages < 1:
        raise ConfigError("--num-large-pages must be >= 1")
    try:
        amap = build_address_map(spec, args.num_large_pages, args.strategy)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    _write(args.out, dump_layout(amap))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "predict-waste": cmd_predict_waste,
    "gen-trace": cmd_gen_trace,
    "layout-dump": cmd_layout_dump,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TraceError as e:
        print(f"trace error: {e}", file=sys.stderr)
        return EXIT_TRACE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RunGuardError as e:
        print(f"run guard: {e}", file=sys.stderr)
        return EXIT_GUARD


if __name__ == "__main__":
    sys.exit(main())
