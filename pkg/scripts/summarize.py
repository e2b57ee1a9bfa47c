"""Print the aggregate table of one or more run directories.

usage: python scripts/summarize.py results/demod results/eq_active_vs_passive
"""
import csv
import json
import sys
from pathlib import Path


def show(run_dir: Path) -> None:
    meta = json.loads((run_dir / "summary.json").read_text())
    cfg = meta["config"]
    print(f"# {cfg['experiment']} ({cfg['profile']}, master seed {cfg['master_seed']}, {cfg['seeds']} seeds)")
    print(f"# content hash {meta['content_hash'][:16]}")
    agg = run_dir / "aggregate.csv"
    if not agg.exists():
        print(json.dumps(meta["summary"], indent=2))
        return
    rows = list(csv.reader(agg.open()))
    widths = [max(len(r[i]) if i < 3 else min(len(r[i]), 10) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        cells = [c if i < 3 else c[:10] for i, c in enumerate(r)]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    print()


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__.strip())
    for arg in sys.argv[1:]:
        show(Path(arg))
