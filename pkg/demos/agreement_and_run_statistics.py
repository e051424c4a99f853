"""
Agreement with human raters, and run statistics
===============================================

Two small reporting tasks. First, compare a QC system's PASS/FAIL labels with
three human raters using Gwet's AC1. AC1 stays informative when almost every
subject passes, which is the usual situation in QC. Second, summarize five
recorded episode ledgers as mean (min-max).
"""

import random
from pathlib import Path

from neuroagent.agreement import RatingMatrix, display, mean_agreement_report, pass_rate_table
from neuroagent.ledger import compute_run_stats, export_tables, load_ledger

# A 160-subject cohort where about 4% of scans are bad.
rng = random.Random(0)
truth = ["FAIL" if rng.random() < 0.04 else "PASS" for _ in range(160)]


def noisy(labels, flip):
    return [("FAIL" if x == "PASS" else "PASS") if rng.random() < flip else x for x in labels]


raters = [noisy(truth, 0.02) for _ in range(3)]
systems = {"metric_only": noisy(truth, 0.15), "hierarchical": noisy(truth, 0.03)}

for name, labels in systems.items():
    report = mean_agreement_report(labels, raters, name, ["R1", "R2", "R3"])
    per_rater = ", ".join(f"{p.rater_b} {display(p.ac1)}" for p in report.pairs)
    print(f"{name:<13} mean AC1 {display(report.mean_ac1)}   ({per_rater})")

# Pass rates are printed the way QC tables usually show them.
items = [f"sub-{i:03d}" for i in range(160)]
table = pass_rate_table(RatingMatrix.from_columns(items, {**systems, "R1": raters[0]}))
for name, rate in table.items():
    print(f"{name:<13} {rate.render()}")

# Run statistics over the five fixture ledgers shipped with the tests.
ledgers = sorted((Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "ledgers").glob("run*.jsonl"))
stats = [compute_run_stats(load_ledger(p)) for p in ledgers]
print()
print(export_tables(stats), end="")
