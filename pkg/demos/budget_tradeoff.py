"""Spend a fixed annotation budget on boxes or on image-level labels.

One instance annotation costs as much as seven image labels. The script
trains one model per allocation and prints novel AP50 for each.

    python3 demos/budget_tradeoff.py [budget] [seeds]
"""

import sys

from anyshot.experiments import budget_table

budget = int(sys.argv[1]) if len(sys.argv) > 1 else 10
seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 2
table = budget_table(range(seeds), budget, fractions=(0.0, 0.5, 1.0))
print("seed  weak_fraction  shots  weak_images  novel_AP50")
for row in table.rows:
    r = dict(zip(table.columns, row))
    print(f"{r['seed']:4d}  {r['weak_fraction']:13.1f}  {r['k']:5d}  {r['weak_images']:11d}  {r['novel_AP50']:10.1f}")
for f, v in table.medians("weak_fraction", "novel_AP50").items():
    print(f"median over seeds, weak fraction {f:.1f}: {v:.1f}")
