"""Command-line entry point: ``psd decode|sweep|calibrate|analyze``.

Exit codes: 0 success, 2 configuration or input-format error, 3 runtime error.
Set ``PSD_LOG=DEBUG`` (or INFO, WARNING...) to control logging.
"""
from __future__ import annotations

import argparse
import csv
import glob
import io
import itertools
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, apply_grid_point, build_instances, load_run_config, parse_grid_values
from .draftgraph import calibrate_topology, estimate_rank_acceptance, expected_accepted_ranks
from .engine import decode
from .metrics import acceptance_rate_by_rank, build_report, committed_tokens, tpf
from .policies import mean_reveal_rate
from .trace import DecodeTrace, TraceSchemaError

log = logging.getLogger("psd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SWEEP_COLUMNS = [
    "point", "replicate", "seed", "mode", "policy", "tau", "depth", "branch", "graph_nodes",
    "noise", "correctness", "forward_passes", "tokens", "iterations", "tpf", "mean_reveal_rate",
    "acceptance_by_rank",
]


def fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.9f}"


def _run_replicates(cfg: RunConfig) -> list[DecodeTrace]:
    traces = []
    for inst in build_instances(cfg):
        _, trace = decode(replace(cfg.engine, seed=inst.seed), inst.denoiser, inst.prompt)
        traces.append(trace)
    return traces


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else cfg.out
    if out is None:
        raise ConfigError("--out", "no output directory given on the command line or in the config")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _override(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "replicates", None) is not None:
        if args.replicates < 1:
            raise ConfigError("--replicates", f"must be >= 1, got {args.replicates}")
        cfg = replace(cfg, replicates=args.replicates)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _commit_counts(trace: DecodeTrace) -> dict[str, int]:
    counts = {"spatial": 0, "speculative": 0, "verifier_commit": 0}
    for rec in trace.iterations:
        for name, group in rec.commits_in_order():
            counts[name] += len(group)
    return counts


def cmd_decode(args) -> int:
    cfg = _override(load_run_config(args.config), args)
    out = _out_dir(args, cfg)
    for r, trace in enumerate(_run_replicates(cfg)):
        trace.write(out / f"trace_r{r:03d}.jsonl")
        c = _commit_counts(trace)
        print(
            f"replicate {r} seed {trace.seed}: tpf={tpf(trace):.4f} passes={trace.forward_passes} "
            f"tokens={committed_tokens(trace)} spatial={c['spatial']} speculative={c['speculative']} "
            f"verifier={c['verifier_commit']} eos={trace.eos_position}"
        )
    return EXIT_OK


def parse_grid(items: list[str] | None, cfg: RunConfig) -> dict[str, list]:
    grid = dict(cfg.sweep)
    for item in items or []:
        if "=" not in item:
            raise ConfigError("--grid", f"expected KEY=V1,V2,..., got {item!r}")
        key, values = item.split("=", 1)
        vals = [v for v in values.split(",") if v != ""]
        grid[key] = parse_grid_values(key, vals, f"--grid {key}")
    if not grid:
        raise ConfigError("--grid", "empty grid; give --grid KEY=V1,V2 or a 'sweep' section")
    return grid


def sweep_rows(cfg: RunConfig, grid: dict[str, list], trace_dir: Path | None = None) -> list[dict]:
    keys = list(grid)
    rows = []
    for idx, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        point = dict(zip(keys, combo))
        pcfg = apply_grid_point(cfg, point)
        log.info("sweep point %d: %s", idx, point)
        graph_nodes = pcfg.engine.draft_graph().K
        for r, trace in enumerate(_run_replicates(pcfg)):
            if trace_dir is not None:
                trace.write(trace_dir / f"p{idx:03d}_r{r:03d}.jsonl")
            pol = pcfg.engine.effective_policy()
            rows.append({
                "point": idx,
                "replicate": r,
                "seed": trace.seed,
                "mode": pcfg.engine.mode,
                "policy": pol.kind,
                "tau": fmt(pol.threshold),
                "depth": pcfg.engine.topology.depth,
                "branch": pcfg.engine.topology.branch,
                "graph_nodes": graph_nodes,
                "noise": fmt(pcfg.denoiser.noise) if pcfg.denoiser.kind == "frontier" else "",
                "correctness": fmt(pcfg.denoiser.correctness) if pcfg.denoiser.kind == "frontier" else "",
                "forward_passes": trace.forward_passes,
                "tokens": committed_tokens(trace),
                "iterations": len(trace.iterations),
                "tpf": fmt(tpf(trace)),
                "mean_reveal_rate": fmt(mean_reveal_rate(trace)),
                "acceptance_by_rank": ";".join(fmt(a) for a in acceptance_rate_by_rank(trace)),
            })
    return rows


def write_csv(rows: list[dict], columns: list[str], path: Path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def cmd_sweep(args) -> int:
    cfg = _override(load_run_config(args.config), args)
    grid = parse_grid(args.grid, cfg)
    out = _out_dir(args, cfg)
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    rows = sweep_rows(cfg, grid, trace_dir)
    write_csv(rows, SWEEP_COLUMNS, out / "sweep.csv")
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return EXIT_OK


def _read_traces(pattern: str) -> list[DecodeTrace]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise ConfigError("--traces", f"no files match {pattern!r}")
    return [DecodeTrace.read(p) for p in paths]


def cmd_calibrate(args) -> int:
    if args.budget < 1:
        raise ConfigError("--budget", f"must be >= 1, got {args.budget}")
    traces = _read_traces(args.traces)
    p = estimate_rank_acceptance(traces)
    graph = calibrate_topology(traces, args.budget, args.branch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(graph.to_text(), encoding="utf-8")
    print("p_hat " + " ".join(f"{x:.4f}" for x in p))
    print(f"nodes {graph.K} depth {graph.depth()} expected_accepted {expected_accepted_ranks(graph, p):.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def analysis_rows(report) -> list[dict]:
    rows = [
        {"metric": "tpf", "value": fmt(report.tpf)},
        {"metric": "mean_reveal_rate", "value": fmt(report.mean_reveal_rate)},
    ]
    for j, a in enumerate(report.acceptance_rate_by_rank, 1):
        rows.append({"metric": "acceptance_rate", "rank": j, "value": fmt(a)})
    for (K, h, v), x in sorted(report.precision_curves.items()):
        rows.append({"metric": "precision", "variant": v, "k": K, "h": h, "value": fmt(x)})
        rows.append({"metric": "oracle_bound", "variant": v, "k": K, "h": h,
                     "value": fmt(report.oracle_curves[(K, h, v)])})
    for i, b in enumerate(report.contribution_profile):
        rows.append({"metric": "speculative_pct", "bucket": i, "value": fmt(b.speculative_pct)})
        rows.append({"metric": "spatial_pct", "bucket": i, "value": fmt(b.spatial_pct)})
        rows.append({"metric": "bucket_tokens", "bucket": i, "value": b.tokens})
    return rows


ANALYSIS_COLUMNS = ["metric", "variant", "k", "h", "rank", "bucket", "value"]


def _json_num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def cmd_analyze(args) -> int:
    traces = _read_traces(args.traces)
    ks, hs, buckets = (5, 7, 9), range(1, 11), 10
    if args.config:
        m = load_run_config(args.config).metrics
        ks, hs, buckets = m.k_values, m.horizons, m.buckets
    report = build_report(traces, ks, hs, buckets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(analysis_rows(report), ANALYSIS_COLUMNS, out / "analysis.csv")
    summary = {
        "traces": len(traces),
        "tpf": _json_num(report.tpf),
        "mean_reveal_rate": _json_num(report.mean_reveal_rate),
        "acceptance_rate_by_rank": report.acceptance_rate_by_rank,
        "precision": [
            {"k": K, "h": h, "variant": v, "value": _json_num(x), "oracle": _json_num(report.oracle_curves[(K, h, v)])}
            for (K, h, v), x in sorted(report.precision_curves.items())
        ],
        "contribution_profile": [
            {"lo": b.lo, "hi": b.hi, "tokens": b.tokens, "spatial_pct": b.spatial_pct,
             "speculative_pct": b.speculative_pct}
            for b in report.contribution_profile
        ],
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"{len(traces)} traces, pooled tpf {report.tpf:.4f}; wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="psd", description="Parallel speculative decoding experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    def run_args(p):
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--replicates", type=int)
        p.add_argument("--seed", type=int, help="base seed; replicate r uses seed + r")

    p = sub.add_parser("decode", help="decode each replicate and write traces")
    run_args(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", help="grid sweep written to sweep.csv")
    run_args(p)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="grid axis; repeatable")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="fit a draft graph from chain-probe traces")
    p.add_argument("--traces", required=True, help="glob of trace files")
    p.add_argument("--budget", type=int, required=True, help="maximum number of graph nodes")
    p.add_argument("--branch", type=int, default=1, help="largest skip offset considered")
    p.add_argument("--out", required=True, help="path of the graph file to write")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("analyze", help="metrics report from traces")
    p.add_argument("--traces", required=True, help="glob of trace files")
    p.add_argument("--config", help="run configuration supplying the metrics section")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("PSD_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceSchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
