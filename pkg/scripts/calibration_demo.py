"""Probe with a deep chain, calibrate a graph under a node budget, then decode with it.

Compares the calibrated graph against the default family at the same budget.
"""
import argparse
import csv
import json
from pathlib import Path

from psd.cli import main

ROOT = Path(__file__).resolve().parents[1]


def mean_tpf(sweep_csv: Path) -> float:
    with open(sweep_csv) as f:
        vals = [float(r["tpf"]) for r in csv.DictReader(f)]
    return sum(vals) / len(vals)


def run(out: Path, budget: int) -> None:
    probe = ROOT / "configs" / "chain_probe.json"
    if main(["decode", "--config", str(probe), "--out", str(out / "probe")]):
        raise SystemExit(3)
    graph = out / "calibrated.txt"
    main(["calibrate", "--traces", str(out / "probe" / "*.jsonl"), "--budget", str(budget), "--branch", "2",
          "--out", str(graph)])

    doc = json.loads(probe.read_text())
    doc["denoiser"].pop("corpus", None)
    doc.pop("sweep", None)
    doc["engine"]["topology"] = {"depth": 3, "branch": 1, "budget": budget}
    base_cfg = out / "baseline.json"
    base_cfg.write_text(json.dumps(doc))
    doc["engine"]["graph"] = graph.name
    cal_cfg = out / "calibrated.json"
    cal_cfg.write_text(json.dumps(doc))
    for name, cfg in (("default family", base_cfg), ("calibrated", cal_cfg)):
        main(["sweep", "--config", str(cfg), "--out", str(out / cfg.stem), "--grid", "tau=0.9"])
        print(f"{name}: mean tpf {mean_tpf(out / cfg.stem / 'sweep.csv'):.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "runs" / "calibration"))
    ap.add_argument("--budget", type=int, default=6)
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    run(out, a.budget)
