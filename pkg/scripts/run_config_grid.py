"""Train the full 8-configuration adapter grid on all three tasks and print
the aggregate report table.

Usage: python3 scripts/run_config_grid.py [--out DIR] [--seeds 1 2 3 4 5]

This is the long-running headline experiment: 8 configs x 3 tasks x seeds.
Budget several hours on one CPU core for the full grid; trim --seeds or
--tasks for a quicker pass.
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from peftlab import cli

GRID = [
    ("lora", {"method": "lora", "rank": 4, "label": "r=4"}),
    ("lora", {"method": "lora", "rank": 8, "label": "r=8"}),
    ("lora", {"method": "lora", "rank": 16, "dropout": 0.1, "label": "r=16,drop=0.1"}),
    ("adalora", {"method": "adalora", "rank": 4, "budget": 0.5, "lam": 1e-6, "label": "b=0.5,r=4"}),
    ("adalora", {"method": "adalora", "rank": 8, "budget": 1.0, "lam": 1e-6, "label": "b=1.0,r=8"}),
    ("adalora", {"method": "adalora", "rank": 16, "budget": 1.5, "lam": 1e-6, "label": "b=1.5,r=16"}),
    ("ia3", {"method": "ia3", "layer_scope": "all", "label": "all-layers"}),
    ("ia3", {"method": "ia3", "layer_scope": 1, "label": "last-layers"}),
]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out_grid")
    ap.add_argument("--seeds", type=int, nargs="+", default=[3, 5, 6, 8, 9])
    ap.add_argument("--tasks", nargs="+", default=["sepsis", "mortality", "note"])
    ap.add_argument("--format", default="markdown", choices=("markdown", "csv"))
    args = ap.parse_args()

    out = Path(args.out)
    for task in args.tasks:
        for method, adapter in GRID:
            train_kw = {"lam": adapter["lam"]} if "lam" in adapter else {}
            config = {
                "task": task,
                "seeds": args.seeds,
                "output_dir": str(out / task),
                "adapter": adapter,
                "train": train_kw,
            }
            with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
                json.dump(config, f)
                cfg_path = f.name
            print(f"=== {task} / {method} / {adapter['label']} ===", flush=True)
            rc = cli.main(["train", "--config", cfg_path])
            if rc != 0:
                return rc
            for seed in args.seeds:
                run_dir = out / task / method / adapter["label"] / str(seed)
                rc = cli.main(["eval", "--run-dir", str(run_dir)])
                if rc != 0:
                    return rc
    return cli.main(["report", "--format", args.format,
                     "--runs"] + [str(out / t) for t in args.tasks])


if __name__ == "__main__":
    sys.exit(main())
