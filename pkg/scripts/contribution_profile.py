"""Share of tokens committed speculatively, bucketed by position within the block."""
import argparse
from pathlib import Path

from psd.cli import main
from psd.metrics import contribution_profile
from psd.trace import DecodeTrace

ROOT = Path(__file__).resolve().parents[1]


def run(config: Path, out: Path, buckets: int) -> None:
    if main(["decode", "--config", str(config), "--out", str(out)]):
        raise SystemExit(3)
    traces = [DecodeTrace.read(p) for p in sorted(out.glob("trace_r*.jsonl"))]
    for b in contribution_profile(traces, buckets):
        if not b.tokens:
            continue
        bar = "#" * round(b.speculative_pct / 2)
        print(f"  [{b.lo:.1f}, {b.hi:.1f})  {b.speculative_pct:5.1f}% speculative  {bar}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "frontier_noisy.json"))
    ap.add_argument("--out", default=str(ROOT / "runs" / "profile"))
    ap.add_argument("--buckets", type=int, default=10)
    a = ap.parse_args()
    run(Path(a.config), Path(a.out), a.buckets)
