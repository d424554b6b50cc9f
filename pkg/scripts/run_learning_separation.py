"""Run the adapter-vs-frozen-base separation experiment and print a summary.

Usage: python3 scripts/run_learning_separation.py [--seeds 1 2 3 4 5] [--json PATH]
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from peftlab import experiments as E


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[3, 5, 6, 8, 9])
    ap.add_argument("--json", type=Path, default=None, help="write results to this JSON file")
    args = ap.parse_args()
    cfg = E.SeparationConfig(seeds=tuple(args.seeds))
    res = E.run_separation(cfg, E.default_methods())
    print(f"base: mean acc {res.mean_base_acc():.3f} per-seed {res.base_acc}  "
          f"build time {res.base_seconds:.0f}s total")
    for label in res.method_acc:
        accs = ", ".join(f"{a:.3f}" for a in res.method_acc[label])
        print(f"{label}: mean acc {res.mean_acc(label):.3f} [{accs}]  "
              f"train+eval {res.method_seconds[label]:.0f}s total")
    if args.json:
        args.json.write_text(json.dumps({
            "base_acc": res.base_acc, "base_seconds": res.base_seconds,
            "method_acc": res.method_acc, "method_seconds": res.method_seconds,
        }, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
