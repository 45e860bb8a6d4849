"""Reproduce the variant-ordering and compute trends over several seeds.

Runs the five-policy ablation once per seed with a shared config, merges the
per-seed tables, and prints median final task losses plus the compute
accounting. The hierarchical policy is expected to have the lowest median
task loss on the default multi-type task.

Run from the repository root:

    python3 scripts/reproduce_trends.py --config configs/default.toml --seeds 5 --out runs/trends
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from moelab.cli import cmd_ablate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/default.toml")
    ap.add_argument("--seeds", type=int, default=5, help="number of seeds (0..N-1)")
    ap.add_argument("--out", default="runs/trends")
    args = ap.parse_args()

    out = Path(args.out)
    losses = defaultdict(list)
    static = {}
    for seed in range(args.seeds):
        run_dir = cmd_ablate(args.config, out_dir=out / f"seed{seed}", seed=seed)
        with open(run_dir / "ablate.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                if row["status"] != "ok":
                    print(f"seed {seed} {row['variant']}: {row['status']}")
                    continue
                losses[row["variant"]].append(float(row["final_task_loss"]))
                static[row["variant"]] = (
                    int(row["total_params"]),
                    int(row["active_params_per_query"]),
                    int(row["flops_per_query"]),
                )
        print(f"seed {seed} done -> {run_dir}")

    rows = []
    for variant, vals in losses.items():
        params, active, flops = static[variant]
        rows.append(
            {
                "variant": variant,
                "median_final_task_loss": repr(float(np.median(vals))),
                "n_seeds": len(vals),
                "total_params": params,
                "active_params_per_query": active,
                "flops_per_query": flops,
            }
        )
    rows.sort(key=lambda r: float(r["median_final_task_loss"]))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    width = max(len(r["variant"]) for r in rows)
    print(f"\n{'variant':<{width}}  median loss  params  active/query  flops/query")
    for r in rows:
        print(
            f"{r['variant']:<{width}}  {float(r['median_final_task_loss']):.4f}      "
            f"{r['total_params']:>6}  {r['active_params_per_query']:>12}  {r['flops_per_query']:>11}"
        )
    print(f"\nwrote {out / 'summary.csv'}")


if __name__ == "__main__":
    main()
