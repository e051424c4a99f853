"""
Hierarchical QC on a coregistration checkpoint
==============================================

Twelve subjects went through BOLD-to-T1w coregistration. Two of them (s7 and
s9) have a poor overlap. Cohort screening should find both. The visual judge
then looks only at those two and keeps s7, whose contour is still close, while
rejecting s9.
"""

from neuroagent.qc import StubJudge, run_checkpoint, screen_cohort
from neuroagent.synthetic import COREG_CHECKPOINT, coregistration_cohort

cohort = coregistration_cohort()
for m in cohort:
    print(m.subject, {k: round(v, 3) for k, v in m.metrics.metrics.items()})

# Stage one: screen every subject's metric vector with Tukey fences.
rule = COREG_CHECKPOINT.screening_rule()
screen = screen_cohort([m.metrics for m in cohort], list(COREG_CHECKPOINT.metrics), rule)
print("\nflagged:", sorted(screen.flagged))
for subject, metrics in sorted(screen.triggers.items()):
    print(f"  {subject} triggered by {', '.join(metrics)}")

# Stage two: only the flagged subjects reach the judge.
# The stub judge measures the mask/reference contour mismatch directly.
judge = StubJudge(threshold=0.05)
result = run_checkpoint(cohort, COREG_CHECKPOINT, judge)
print("\nmode:", result.mode)
print("judge was called on:", judge.calls)

# Subjects that were never flagged pass without being looked at.
for subject, verdict in result.pass_fail().items():
    reasons = result.verdicts[subject].evidence.summary
    print(f"  {subject}: {verdict}" + (f"  ({reasons})" if verdict == "FAIL" else ""))

# The same cohort, judged without screening, costs one judge call per subject.
everyone = StubJudge(threshold=0.05)
full = run_checkpoint(cohort, COREG_CHECKPOINT, everyone, mode="visual_only")
print(f"\nvisual-only would need {len(everyone.calls)} judge calls instead of {len(judge.calls)}")
print("same verdicts:", full.pass_fail() == result.pass_fail())
