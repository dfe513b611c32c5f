"""Greedy per-stage substep search on a trained toy checkpoint, then a cond-scale scan with the result.

    python scripts/search_schedule_toy.py --checkpoint runs/toy/checkpoint.tsw --stages 4 --base-substeps 10
"""

import argparse
import json
from pathlib import Path

from tecswin.evaluate import SampleEvaluator
from tecswin.search import build_staged_schedule, greedy_substep_search, parse_grid, parse_int_range, scan_scalar
from tecswin.train import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", default="runs/toy/checkpoint.tsw")
    ap.add_argument("--out", default="runs/search_toy")
    ap.add_argument("--stages", type=int, default=4)
    ap.add_argument("--base-substeps", type=int, default=10)
    ap.add_argument("--candidates", default="5,10,15")
    ap.add_argument("--cond-scale", type=float, default=1.14)
    ap.add_argument("--scan-grid", default="1.0:3.0:0.5")
    ap.add_argument("--num-samples", type=int, default=32)
    args = ap.parse_args()

    model, cfg = load_model(args.checkpoint)
    ev = SampleEvaluator(model, cfg, num_samples=args.num_samples, num_real=256, seed=0)
    base = build_staged_schedule(cfg.diffusion.T, args.stages, args.base_substeps)

    def metric(sched):
        value = ev(sched, args.cond_scale)
        print(f"  substeps {list(sched.substeps)} -> proxy FID {value:.4f}", flush=True)
        return value

    report = greedy_substep_search(metric, base, parse_int_range(args.candidates))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_log(out / "search_log.jsonl")
    report.final.save(out / "schedule.json")
    print(f"uniform {report.initial_metric:.4f} -> searched {report.final_metric:.4f}")

    best, table = scan_scalar(lambda s: ev(report.final, s), parse_grid(args.scan_grid))
    for x, m in table:
        print(f"cond-scale {x:4.2f}: proxy FID {m:.4f}")
    (out / "scan.json").write_text(json.dumps({"best": best, "table": table}, indent=2) + "\n")


if __name__ == "__main__":
    main()
