"""Command-line front end: generate workloads, compile schedules, simulate, compare."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import io
from .cost_model import parse_size
from .errors import ConfigError, Infeasible, PassError
from .graph_ir import validate
from .pipeline import DEFAULT_WARMUP, KNOWN_PASSES, run_pipeline
from .simulator import simulate
from .workload import generate_workload

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3

EPILOG = """\
exit codes:
  0  success
  2  malformed input, unknown config field, invalid pass list or schedule
  3  infeasible under the memory limit (the violating node id is reported)

sizes accept KB/MB/GB/TB suffixes (powers of 1024) or plain byte counts.
"""


class _Diag:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, level: str, message: str, **extra) -> None:
        if self.as_json:
            rec = {"level": level, "message": message}
            rec.update({k: v for k, v in extra.items() if v is not None})
            print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        else:
            tail = "".join(f" [{k}={v}]" for k, v in sorted(extra.items()) if v is not None)
            print(f"{level}: {message}{tail}", file=sys.stderr)


def _fail(diag: _Diag, exc: Exception) -> int:
    if isinstance(exc, Infeasible):
        diag.emit("error", str(exc), node=exc.node, stage=exc.stage, code=EXIT_INFEASIBLE)
        return EXIT_INFEASIBLE
    stage = getattr(exc, "stage", None)
    diag.emit("error", str(exc), stage=stage, code=EXIT_INVALID)
    return EXIT_INVALID


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _passes(text: str) -> list[str]:
    items = [p.strip() for p in text.split(",") if p.strip()]
    bad = [p for p in items if p not in KNOWN_PASSES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown pass {bad[0]!r}; choose from {','.join(KNOWN_PASSES)}")
    return items


# --------------------------------------------------------------------------- gen

def cmd_gen(args, diag: _Diag) -> int:
    try:
        graph = generate_workload(
            args.layers, args.compute_us, parse_size(args.param_bytes), args.accumulation_steps,
            args.optimizer_multiplier, activation_bytes=parse_size(args.activation_bytes),
            transient_bytes=parse_size(args.transient_bytes), backward=not args.forward_only,
            optimizer_step_us=args.optimizer_step_us, fragments=args.fragments)
    except ValueError as exc:
        return _fail(diag, exc)
    text = io.dumps(io.model_to_dict(graph))
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        _write(Path(args.out), text)
    return EXIT_OK


# ----------------------------------------------------------------------- compile

def _compile_one(model_path: str, cluster_path: str, passes, warmup, strict, out_dir: str) -> dict:
    """Run the pipeline for one grid point; returns a status record (picklable)."""
    caught: list[str] = []
    try:
        graph = io.load_model(model_path)
        cluster, cost = io.load_cluster(cluster_path)
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            result = run_pipeline(graph, cluster, cost, passes, warmup, strict)
        caught = [str(x.message) for x in w]
    except Infeasible as exc:
        return {"code": EXIT_INFEASIBLE, "message": str(exc), "node": exc.node, "stage": exc.stage}
    except (ConfigError, PassError, ValueError) as exc:
        return {"code": EXIT_INVALID, "message": str(exc), "stage": getattr(exc, "stage", None)}

    bad = validate(result.graph, result.schedule)
    if bad:
        return {"code": EXIT_INVALID, "message": f"output schedule invalid: {bad[0]}"}
    out = Path(out_dir)
    _write(out / "schedule.json",
           io.dumps(io.schedule_to_dict(result.graph, result.schedule, result.optimizer_resident)))
    for name, records in sorted(result.logs.items()):
        out.mkdir(parents=True, exist_ok=True)
        io.write_jsonl(out / f"{name}.jsonl", records)
    stages = {
        "model": Path(model_path).name,
        "cluster": Path(cluster_path).name,
        "passes": list(passes),
        "warnings": sorted(set(caught) | set(result.warnings)),
        "stages": [{"name": s.name, **s.report.summary()} for s in result.stages],
    }
    _write(out / "stages.json", io.dumps(stages))
    return {"code": EXIT_OK, "out": str(out), "warnings": stages["warnings"]}


def cmd_compile(args, diag: _Diag) -> int:
    passes = args.passes
    warmup, strict = args.warmup, args.strict
    if args.config:
        try:
            cfg = io.load_pipeline_config(args.config)
            passes = passes or _passes(",".join(cfg.get("passes", [])))
        except (ConfigError, argparse.ArgumentTypeError) as exc:
            return _fail(diag, ConfigError(str(exc)))
        warmup = cfg.get("warmup_iterations", warmup) if warmup is None else warmup
        strict = strict or bool(cfg.get("strict", False))
        if args.out is None and cfg.get("decision_log_dir"):
            args.out = cfg["decision_log_dir"]
    passes = passes or ["shard", "prefetch", "unshard"]
    warmup = DEFAULT_WARMUP if warmup is None else warmup
    out = Path(args.out or "out")

    points = [(m, c) for m in args.model for c in args.cluster]
    multi = len(points) > 1
    jobs = []
    for m, c in points:
        d = out / f"{Path(m).stem}__{Path(c).stem}" if multi else out
        jobs.append((m, c, passes, warmup, strict, str(d)))
    if args.jobs > 1 and multi:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_compile_one, *zip(*jobs)))
    else:
        results = [_compile_one(*j) for j in jobs]

    code = EXIT_OK
    for (m, c, *_), r in zip(jobs, results):
        where = f"{m} x {c}"
        for w in r.get("warnings", ()):
            diag.emit("warning", w, point=where)
        if r["code"]:
            diag.emit("error", r["message"], point=where, node=r.get("node"),
                      stage=r.get("stage"), code=r["code"])
            code = max(code, r["code"])
        else:
            print(f"wrote {r['out']}")
    return code


# ---------------------------------------------------------------------- simulate

def cmd_simulate(args, diag: _Diag) -> int:
    try:
        model = io.load_model(args.model[0]) if args.model else None
        graph, schedule, resident = io.load_schedule(args.schedule, model)
        cluster, cost = io.load_cluster(args.cluster[0])
        report = simulate(graph, schedule, cost, cluster, optimizer_resident=resident)
    except (ConfigError, PassError, ValueError) as exc:
        return _fail(diag, exc)
    out = Path(args.out or ".")
    _write(out / "report.json", report.to_json())
    _write(out / "timeline.csv", report.timeline_csv())
    _write(out / "memory.csv", report.memory_csv())
    s = report.summary()
    print(f"iteration {s['iteration_time_us']} us, peak {s['peak_memory_bytes']} B, "
          f"{s['gather_count']} gathers, overlap {s['overlap_fraction']:.3f}")
    return EXIT_OK


# ------------------------------------------------------------------------ report

_COLUMNS = (("iteration_time_us", "iter_us"), ("peak_memory_bytes", "peak_B"),
            ("gather_count", "gathers"), ("gathered_bytes", "gathered_B"),
            ("overlap_fraction", "overlap"))


def format_table(rows: list[dict]) -> str:
    header = ["config", "stage"] + [short for _, short in _COLUMNS]
    body = [[r["config"], r["stage"]] + [
        f"{r[k]:.3f}" if isinstance(r[k], float) else str(r[k]) for k, _ in _COLUMNS] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
             for line in [header] + body]
    return "\n".join(lines) + "\n"


def cmd_report(args, diag: _Diag) -> int:
    rows = []
    try:
        for src in args.stages:
            p = Path(src)
            if p.is_dir():
                p = p / "stages.json"
            try:
                data = io.parse_json(p.read_text(), str(p))
            except OSError as exc:
                raise ConfigError(f"{p}: {exc.strerror}") from None
            if not isinstance(data, dict) or "stages" not in data:
                raise ConfigError(f"{p}: not a stages file")
            config = f"{data.get('model', '?')}/{data.get('cluster', '?')}"
            for s in data["stages"]:
                rows.append({"config": config, "stage": s["name"],
                             **{k: s[k] for k, _ in _COLUMNS}})
    except (ConfigError, KeyError) as exc:
        return _fail(diag, ConfigError(f"bad stages file: {exc}"))
    sys.stdout.write(format_table(rows))
    if args.out:
        _write(Path(args.out), io.dumps({"rows": rows}))
    return EXIT_OK


# -------------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="diagnostics on stderr as JSON lines")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="shardsched", description=__doc__, epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    g = sub.add_parser("gen", parents=[common], epilog=EPILOG, formatter_class=fmt,
                       help="write a layered workload model")
    g.add_argument("--layers", type=int, default=8)
    g.add_argument("--compute-us", type=int, default=10_000)
    g.add_argument("--param-bytes", default="200MB")
    g.add_argument("--accumulation-steps", type=int, default=1)
    g.add_argument("--optimizer-multiplier", type=float, default=2.0)
    g.add_argument("--activation-bytes", default="0")
    g.add_argument("--transient-bytes", default="0")
    g.add_argument("--optimizer-step-us", type=int, default=0)
    g.add_argument("--fragments", type=int, default=32)
    g.add_argument("--forward-only", action="store_true")
    g.add_argument("--out", help="output file (default stdout)")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("compile", parents=[common], epilog=EPILOG, formatter_class=fmt,
                       help="run the pass pipeline and write the schedule and decision logs")
    c.add_argument("--model", action="append", required=True, help="model JSON (repeatable)")
    c.add_argument("--cluster", action="append", required=True,
                   help="cluster/cost config, JSON or TOML (repeatable; forms a grid)")
    c.add_argument("--passes", type=_passes, help="comma list, default shard,prefetch,unshard")
    c.add_argument("--strict", action="store_true", help="strict prefetch memory checks")
    c.add_argument("--warmup", type=int, help=f"warmup iterations (default {DEFAULT_WARMUP})")
    c.add_argument("--config", help="pipeline config file (JSON or TOML)")
    c.add_argument("--jobs", type=int, default=1, help="parallel grid points")
    c.add_argument("--out", help="output directory (default ./out)")
    c.set_defaults(func=cmd_compile)

    s = sub.add_parser("simulate", parents=[common], epilog=EPILOG, formatter_class=fmt,
                       help="simulate a compiled schedule")
    s.add_argument("--schedule", required=True)
    s.add_argument("--model", action="append", help="model JSON, if the schedule carries none")
    s.add_argument("--cluster", action="append", required=True)
    s.add_argument("--out", help="output directory (default .)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", parents=[common], epilog=EPILOG, formatter_class=fmt,
                       help="compare stage reports from one or more compile runs")
    r.add_argument("stages", nargs="+", help="stages.json files or compile output directories")
    r.add_argument("--out", help="write the table as JSON")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args, _Diag(args.json))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
