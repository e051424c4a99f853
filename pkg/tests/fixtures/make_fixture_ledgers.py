"""Regenerate the five committed fixture ledgers.

Each run is built from hand-chosen counts so the golden summary next to the
ledgers can be worked out by hand:

run  interactions  scripts  pipelines  refinements  errors  recovered  hours  cost   completed
1    18            10       2          1            3       2          1.5    6.77   yes
2    32            22       4          3            6       5          4.0    11.94  yes
3    25            15       3          2            4       4          2.5    9.01   yes
4    25            14       2          1            2       1          2.0    8.0    yes
5    25            16       3          2            5       3          3.0    9.33   no

Actions = interactions + pipelines + refinements + scripts.
"""

from pathlib import Path

from neuroagent.ledger import TraceLedger, TraceStep
from neuroagent.policy import Usage

RUNS = [
    (18, 10, 2, 1, 3, 2, 1.5, 6.77, True),
    (32, 22, 4, 3, 6, 5, 4.0, 11.94, True),
    (25, 15, 3, 2, 4, 4, 2.5, 9.01, True),
    (25, 14, 2, 1, 2, 1, 2.0, 8.0, True),
    (25, 16, 3, 2, 5, 3, 3.0, 9.33, False),
]


def build(run, path):
    interactions, scripts, pipelines, refinements, errors, recovered, hours, cost, completed = run
    ledger = TraceLedger(path)
    t = 0.0

    def add(agent, kind, args, obs, error=None, recovers=(), usage=None):
        nonlocal t
        t += 60.0
        ledger.append_step(TraceStep(ledger.next_index, agent, {"kind": kind, "args": args}, obs, usage, t, error, tuple(recovers)))
        return ledger.next_index - 1

    for i in range(interactions):
        sender = "Supervisor" if i % 2 == 0 else "Processing"
        usage = Usage(1000, 100, cost) if i == 0 else Usage(1000, 100, 0.0)
        add(sender, "send_message", {"to": "Processing" if i % 2 == 0 else "Supervisor", "body": f"message {i}"}, "delivered", usage=usage)
    for p in range(pipelines):
        add("Processing", "synthesize_program", {"name": f"pipe_{p}", "source": "print(1)", "pipeline": f"P{p}"}, f"program pipe_{p} saved")
    for _ in range(refinements):
        add("Processing", "synthesize_program", {"name": "pipe_0", "source": "print(2)", "pipeline": "P0"}, "program pipe_0 saved")
    failed = []
    for e in range(errors):
        obs = "exit status 1\nTraceback (most recent call last):\nModuleNotFoundError: No module named 'nilearn'"
        failed.append(add("Processing", "execute_program", {"name": "pipe_0"}, obs, {"category": "CodeGenExecutionError", "note": "ModuleNotFoundError"}))
    for s in range(scripts - errors):
        rec = [failed[s]] if s < recovered else []
        add("Processing", "execute_program", {"name": "pipe_0"}, "exit status 0", recovers=rec)
    ledger.close(completed, None if completed else "TimeLimit", hours * 3600.0)


if __name__ == "__main__":
    here = Path(__file__).parent / "ledgers"
    here.mkdir(exist_ok=True)
    for i, run in enumerate(RUNS, start=1):
        build(run, here / f"run{i}.jsonl")
