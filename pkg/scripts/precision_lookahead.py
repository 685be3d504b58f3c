"""How well the cached confidence ordering predicts the next few commits.

Decodes the count model, then prints empirical precision@K against its
oracle bound for each horizon.
"""
import argparse
import math
from pathlib import Path

from psd.cli import main
from psd.config import load_run_config
from psd.metrics import HIT_RATE, WINDOW_COVERAGE, build_report
from psd.trace import DecodeTrace

ROOT = Path(__file__).resolve().parents[1]


def show(x: float) -> str:
    return "  n/a" if math.isnan(x) else f"{x:.3f}"


def run(config: Path, out: Path) -> None:
    if main(["decode", "--config", str(config), "--out", str(out)]):
        raise SystemExit(3)
    m = load_run_config(config).metrics
    traces = [DecodeTrace.read(p) for p in sorted(out.glob("trace_r*.jsonl"))]
    rep = build_report(traces, m.k_values, m.horizons, m.buckets)
    for variant in (HIT_RATE, WINDOW_COVERAGE):
        print(f"{variant}: precision / oracle bound")
        for K in m.k_values:
            cells = [f"{show(rep.precision_curves[(K, h, variant)])}/{show(rep.oracle_curves[(K, h, variant)])}"
                     for h in m.horizons]
            print(f"  K={K}: " + " ".join(cells))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "count_model.json"))
    ap.add_argument("--out", default=str(ROOT / "runs" / "precision"))
    a = ap.parse_args()
    run(Path(a.config), Path(a.out))
