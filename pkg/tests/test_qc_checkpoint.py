import json

import pytest
from hypothesis import given, settings, strategies as st

from neuroagent.errors import ConfigError, NoSteps
from neuroagent.qc.checkpoint import (
    DEFAULT_CHECKPOINTS,
    CohortMember,
    Verdict,
    aggregate_subject_verdicts,
    compute_cohort_metrics,
    load_checkpoint_configs,
    merge_subject_verdicts,
    run_checkpoint,
    write_qc_report,
)
from neuroagent.qc.metrics import MetricVector
from neuroagent.qc.screening import RuleKind, ScreeningRule
from neuroagent.qc.visual import ElementVerdict, Label, StubJudge, VisualizationDescriptor, VizKind
from neuroagent.synthetic import COREG_CHECKPOINT, coregistration_cohort, large_cohort, planted_montage

OK = ElementVerdict(Label.ACCEPTABLE)


def test_all_acceptable_pass():
    v = aggregate_subject_verdicts("s1", {"skull": OK, "seg": OK})
    assert v.y is Verdict.PASS and v.evidence.rejected_steps() == []


def test_rejected_step_fails_and_is_named():
    v = aggregate_subject_verdicts("s1", {"skull": OK, "seg": ElementVerdict(Label.REJECTED, "fragmented GM/WM")}, {"seg": {"gm_ml": 310.0}})
    assert v.y is Verdict.FAIL
    assert v.evidence.rejected_steps() == ["seg"]
    assert "seg: fragmented GM/WM" in v.evidence.summary
    assert v.to_record()["steps"]["seg"]["triggering_metrics"] == {"gm_ml": 310.0}


def test_no_steps():
    with pytest.raises(NoSteps):
        aggregate_subject_verdicts("s1", {})


def test_merge_across_checkpoints():
    a = aggregate_subject_verdicts("s1", {"skull": OK})
    b = aggregate_subject_verdicts("s1", {"seg": ElementVerdict(Label.REJECTED, "noisy")})
    merged = merge_subject_verdicts([a, b])
    assert merged.y is Verdict.FAIL and set(merged.evidence.per_step) == {"skull", "seg"}
    with pytest.raises(ValueError):
        merge_subject_verdicts([a, aggregate_subject_verdicts("s2", {"x": OK})])


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.sampled_from(["raw", "skull", "seg", "mni", "coreg"]), st.booleans(), min_size=1))
def test_verdict_logic(steps):
    per_step = {s: ElementVerdict(Label.REJECTED, "bad") if rej else OK for s, rej in steps.items()}
    v = aggregate_subject_verdicts("s", per_step)
    assert (v.y is Verdict.FAIL) == any(steps.values())
    assert set(v.evidence.rejected_steps()) == {s for s, rej in steps.items() if rej}


def test_coregistration_cohort_end_to_end():
    judge = StubJudge(0.05)
    res = run_checkpoint(coregistration_cohort(), COREG_CHECKPOINT, judge)
    assert res.mode == "hierarchical"
    assert res.flagged == {"s7", "s9"}
    assert sorted(judge.calls) == ["s7", "s9"]
    pf = res.pass_fail()
    assert sum(v == "PASS" for v in pf.values()) == 11
    assert [s for s, v in pf.items() if v == "FAIL"] == ["s9"]
    ev = res.verdicts["s9"].to_record()["steps"]["bold_to_t1w"]
    assert set(ev["triggering_metrics"]) == {"dice", "nmi"}
    assert ev["viz_refs"] == ["montages/s9.npz"]
    assert res.verdicts["s1"].to_record()["steps"]["bold_to_t1w"]["viz_refs"] == []


def test_small_cohort_inspects_everyone():
    cohort = coregistration_cohort()[:6]
    judge = StubJudge()
    res = run_checkpoint(cohort, COREG_CHECKPOINT, judge)
    assert res.mode == "visual_only"
    assert sorted(judge.calls) == sorted(m.subject for m in cohort)


def test_missing_metric_is_flagged():
    cohort = coregistration_cohort()
    cohort[0] = CohortMember("s1", MetricVector("s1", "bold_to_t1w", {"dice": 0.95}, {"nmi"}), cohort[0].viz)
    res = run_checkpoint(cohort, COREG_CHECKPOINT, StubJudge())
    assert "s1" in res.flagged
    assert res.verdicts["s1"].to_record()["steps"]["bold_to_t1w"]["triggering_metrics"] == {"nmi": None}


def test_metric_only_fails_flagged():
    res = run_checkpoint(coregistration_cohort(), COREG_CHECKPOINT, mode="metric_only")
    assert {s for s, v in res.pass_fail().items() if v == "FAIL"} == {"s7", "s9"}
    assert res.inspected == []


def test_topk_rule_override():
    rule = ScreeningRule(RuleKind.TOPK, fraction=0.25)
    cohort = coregistration_cohort()
    res = run_checkpoint(cohort, COREG_CHECKPOINT, StubJudge(), rule=rule)
    # union over metrics of the 3 lowest values (ceil(0.25 * 12)), ties to the smaller id
    oracle = set()
    for metric in ("dice", "nmi"):
        ranked = sorted(cohort, key=lambda m: (m.metrics.metrics[metric], m.subject))
        oracle |= {m.subject for m in ranked[:3]}
    assert res.flagged == oracle


def test_needs_judge_and_viz():
    with pytest.raises(ValueError):
        run_checkpoint(coregistration_cohort(), COREG_CHECKPOINT, None)
    cohort = [CohortMember(m.subject, m.metrics) for m in coregistration_cohort()]
    with pytest.raises(ValueError):
        run_checkpoint(cohort, COREG_CHECKPOINT, StubJudge())
    with pytest.raises(ValueError):
        run_checkpoint(coregistration_cohort(), COREG_CHECKPOINT, StubJudge(), mode="vote")


def test_large_cohort_sparsity():
    cohort = large_cohort()
    judge = StubJudge()
    res = run_checkpoint(cohort, DEFAULT_CHECKPOINTS["t1w_to_mni"], judge)
    assert sorted(judge.calls) == sorted(res.flagged)
    assert 15 <= len(res.flagged) <= 30
    for s, v in res.verdicts.items():
        assert (v.y is Verdict.FAIL) == bool(v.evidence.rejected_steps())
        if s not in res.flagged:
            assert v.y is Verdict.PASS


def test_report_files(tmp_path):
    res = run_checkpoint(coregistration_cohort(), COREG_CHECKPOINT, StubJudge())
    report = write_qc_report([res], tmp_path / "qc.json", tmp_path / "qc.tsv")
    assert json.loads((tmp_path / "qc.json").read_text()) == report
    rows = (tmp_path / "qc.tsv").read_text().splitlines()
    assert rows[0] == "subject_id\tverdict\tfailed_steps\treasons"
    assert len(rows) == 13
    s9 = next(r for r in rows if r.startswith("s9\t")).split("\t")
    assert s9[1:3] == ["FAIL", "bold_to_t1w"] and "mismatch" in s9[3]


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"checkpoints": {n: c.to_record() for n, c in DEFAULT_CHECKPOINTS.items()}}))
    loaded = load_checkpoint_configs(path)
    assert set(loaded) == set(DEFAULT_CHECKPOINTS)
    assert loaded["skull_strip"].rule.kind is RuleKind.TOPK
    yml = tmp_path / "c.yaml"
    yml.write_text("checkpoints:\n  x:\n    metrics: {dice: low_bad}\n    visualization: mask_contour_montage\n")
    assert load_checkpoint_configs(yml)["x"].viz_kind is VizKind.MASK_CONTOUR


def test_config_errors(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"checkpoints": {"x": {"metrics": {"dice": "sideways"}, "visualization": "raw_mosaic"}}}))
    with pytest.raises(ConfigError):
        load_checkpoint_configs(path)


def test_cohort_metrics_keep_order():
    out = compute_cohort_metrics([f"s{i}" for i in range(12)], lambda s: MetricVector(s, "x", {"v": float(s[1:])}))
    assert [v.subject for v in out] == [f"s{i}" for i in range(12)]
