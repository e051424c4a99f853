"""
A scripted end-to-end episode
=============================

The Supervisor plans, the Data-Awareness agent profiles a 12-subject synthetic
dataset, and QC removes one noisy subject. Processing then tries two pilot
pipelines. QC rejects the first, so the Supervisor sends Processing back to
try the second. The analysis agent hits a missing-module error, fixes its
script and trains a small classifier.

Every decision comes from a fixed script, so the run is reproducible offline.
"""

import tempfile
from pathlib import Path

from neuroagent.ledger import compute_run_stats, stats_tsv
from neuroagent.policy import ScriptedPolicy
from neuroagent.registry import default_library
from neuroagent.runtime import TickClock, run_episode
from neuroagent.synthetic import happy_path_objective, happy_path_script, make_dataset

root = Path(tempfile.mkdtemp(prefix="neuroagent-demo-"))
dataset = make_dataset(root / "dataset")
objective = happy_path_objective(dataset)
print(objective.goal_text, "\n")

result = run_episode(
    objective,
    default_library(),
    ScriptedPolicy(happy_path_script()),
    workspace=root / "workspace",
    clock=TickClock(),
    ledger_path=root / "trace.jsonl",
)

# The ledger holds every action with the observation it produced.
for step in result.ledger.steps:
    lines = step.observation.splitlines()
    first_line = next((l for l in lines if not l.startswith("exit status")), lines[0] if lines else "")
    flag = "  <-- error" if step.error else ""
    print(f"{step.index:>3} {step.agent:<19} {step.kind:<19} {first_line[:60]}{flag}")

# Every message went through the Supervisor.
print("\nmessages:", len(result.messages))
print("deliverables:")
for d in result.deliverables:
    print(f"  {d.kind:<17} {d.path}")

# The run summary has the same columns as the multi-run tables.
print()
print(stats_tsv(compute_run_stats(result.ledger)))
print("trace written to", root / "trace.jsonl")
