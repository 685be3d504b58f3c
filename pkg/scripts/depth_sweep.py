"""Tokens per forward pass as a function of draft depth, clean and noisy oracle."""
import argparse
import csv
from collections import defaultdict
from pathlib import Path

from psd.cli import main

ROOT = Path(__file__).resolve().parents[1]


def summarize(csv_path: Path) -> None:
    by_depth = defaultdict(list)
    with open(csv_path) as f:
        for row in csv.DictReader(f):
            by_depth[int(row["depth"])].append(float(row["tpf"]))
    for d in sorted(by_depth):
        vals = by_depth[d]
        print(f"  depth {d}: mean tpf {sum(vals) / len(vals):.3f} over {len(vals)} replicates")


def run(out: Path, depths: str) -> None:
    for name in ("frontier_clean", "frontier_noisy"):
        dest = out / name
        code = main(["sweep", "--config", str(ROOT / "configs" / f"{name}.json"), "--out", str(dest),
                     "--grid", f"depth={depths}"])
        if code:
            raise SystemExit(code)
        print(name)
        summarize(dest / "sweep.csv")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "runs" / "depth_sweep"))
    ap.add_argument("--depths", default="0,1,2,3,5,7")
    a = ap.parse_args()
    run(Path(a.out), a.depths)
