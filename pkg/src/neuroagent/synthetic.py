"""Synthetic datasets, QC cohorts and scripted episodes for offline runs.

Everything here is seeded, so two calls with the same arguments produce the
same files and the same scripts.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import ScriptEntry, Usage, write_script
from .qc.checkpoint import CheckpointConfig, CohortMember
from .qc.metrics import MetricVector, VoxelGrid, write_metric_table
from .qc.screening import Direction, RuleKind, ScreeningRule
from .qc.visual import Montage, VisualizationDescriptor, VizKind
from .roles import AgentRole, DecisionPoint
from .runtime import DatasetRef, Objective

GRID = 24
SPACING = (2.0, 2.0, 2.0)
HEAD_RADIUS = 10.5
SKULL_INNER = 7.5


def subject_ids(n: int) -> list[str]:
    return [f"sub-{i:02d}" for i in range(1, n + 1)]


def make_t1w(brain_radius: float, noise_sd: float, rng: np.random.Generator, size: int = GRID) -> np.ndarray:
    """Concentric head model: white matter core, gray matter rim, CSF, skull."""
    c = (size - 1) / 2
    z, y, x = np.indices((size, size, size))
    d = np.sqrt((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2)
    img = np.full(d.shape, 5.0)
    img[d <= HEAD_RADIUS] = 50.0
    img[d <= SKULL_INNER] = 30.0
    img[d <= brain_radius] = 70.0
    img[d <= brain_radius - 1.5] = 100.0
    return img + rng.normal(0.0, noise_sd, d.shape)


def make_dataset(root: str | Path, n_subjects: int = 12, seed: int = 0, noisy: Sequence[str] = ("sub-05",)) -> DatasetRef:
    """BIDS-like folder with one T1w volume per subject and a participants table.

    Subjects in ``noisy`` get heavy noise so raw-data QC should exclude them.
    Diagnosis alternates CN/AD; AD brains are slightly smaller.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows = ["participant_id\tage\tsex\tdiagnosis"]
    ids = subject_ids(n_subjects)
    for i, s in enumerate(ids):
        dx = "AD" if i % 2 else "CN"
        radius = (5.4 if dx == "AD" else 6.2) + float(rng.uniform(-0.2, 0.2))
        noise = 30.0 if s in noisy else 2.0
        img = make_t1w(radius, noise, rng)
        path = root / s / "anat" / f"{s}_T1w.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        VoxelGrid(img, SPACING).save(path)
        rows.append(f"{s}\t{60 + int(rng.integers(0, 25))}\t{'F' if rng.random() < 0.5 else 'M'}\t{dx}")
    (root / "participants.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return DatasetRef(root, ids, root / "participants.tsv")


# -- montages with a known contour mismatch -------------------------------------------------

def disk(size: int, radius: float) -> np.ndarray:
    c = (size - 1) / 2
    y, x = np.indices((size, size))
    return (x - c) ** 2 + (y - c) ** 2 <= radius**2


def planted_montage(mismatch: float, size: int = 40, radius: float = 14.0, seed: int = 0) -> Montage:
    """Montage whose subject mask drops ``round(mismatch * N)`` pixels of an N-pixel disk.

    The contour mismatch |XOR| / |OR| then equals k / N exactly.
    """
    ref = disk(size, radius)
    mask = ref.copy()
    coords = np.argwhere(ref)
    k = int(round(mismatch * len(coords)))
    if k:
        order = np.lexsort((coords[:, 1], coords[:, 0]))[::-1]  # drop from the bottom rows up
        drop = coords[order[:k]]
        mask[drop[:, 0], drop[:, 1]] = False
    background = np.where(ref, 80.0, 5.0) + np.random.default_rng(seed).normal(0, 1.0, ref.shape)
    return Montage(background, ref, mask)


# -- QC cohorts ------------------------------------------------------------------------------

COREG_CHECKPOINT = CheckpointConfig(
    "bold_to_t1w",
    {"nmi": Direction.LOW_BAD, "dice": Direction.LOW_BAD},
    ScreeningRule(RuleKind.IQR),
    VizKind.TEMPLATE_CONTOUR,
    "Anatomical outlines should sit on the brain boundary of the mean functional image.",
)


def coregistration_cohort() -> list[CohortMember]:
    """12 subjects; s7 and s9 are misaligned (Dice 0.30).

    s7's montage shows only a 2% contour mismatch (acceptable on inspection);
    s9's shows 12% (rejected).
    """
    members = []
    for i in range(1, 13):
        s = f"s{i}"
        if s in ("s7", "s9"):
            dice, nmi = 0.30, 0.31
        else:
            dice = 0.94 + 0.002 * (i % 6)
            nmi = 0.60 + 0.004 * (i % 5)
        mismatch = {"s7": 0.02, "s9": 0.12}.get(s, 0.0)
        viz = VisualizationDescriptor(s, "bold_to_t1w", VizKind.TEMPLATE_CONTOUR, planted_montage(mismatch, seed=i), f"montages/{s}.npz")
        members.append(CohortMember(s, MetricVector(s, "bold_to_t1w", {"dice": dice, "nmi": nmi}), viz))
    return members


def write_coregistration_fixture(directory: str | Path) -> dict[str, Path]:
    """Metric table, montages and checkpoint config of :func:`coregistration_cohort` on disk."""
    directory = Path(directory)
    (directory / "montages").mkdir(parents=True, exist_ok=True)
    cohort = coregistration_cohort()
    metrics = write_metric_table([m.metrics for m in cohort], directory / "metrics.tsv")
    for m in cohort:
        m.viz.image.save(directory / m.viz.path)
    config = directory / "checkpoints.json"
    config.write_text(json.dumps({"checkpoints": {COREG_CHECKPOINT.name: COREG_CHECKPOINT.to_record()}}, indent=2) + "\n", encoding="utf-8")
    return {"metrics": metrics, "montages": directory / "montages", "config": config}


def large_cohort(n: int = 100, seed: int = 3, n_outliers: int = 8) -> list[CohortMember]:
    """Normalization cohort with planted low-NMI/NCC subjects.

    Half of the planted subjects also have a visibly wrong montage (15% mismatch).
    """
    rng = np.random.default_rng(seed)
    ids = [f"sub-{i:03d}" for i in range(1, n + 1)]
    planted = set(rng.choice(ids, size=n_outliers, replace=False).tolist())
    bad_view = set(sorted(planted)[: n_outliers // 2])
    members = []
    for j, s in enumerate(ids):
        if s in planted:
            nmi, ncc = float(rng.uniform(0.2, 0.35)), float(rng.uniform(0.3, 0.5))
        else:
            nmi, ncc = float(rng.normal(0.62, 0.02)), float(rng.normal(0.9, 0.015))
        mismatch = 0.15 if s in bad_view else float(rng.uniform(0.0, 0.03))
        viz = VisualizationDescriptor(s, "t1w_to_mni", VizKind.TEMPLATE_CONTOUR, planted_montage(mismatch, size=24, radius=8, seed=j))
        members.append(CohortMember(s, MetricVector(s, "t1w_to_mni", {"nmi": nmi, "ncc": ncc}), viz))
    return members


# -- scripted episodes -------------------------------------------------------------------------

GOAL = (
    "Preprocess the structural T1w images, keep only subjects that pass quality control, and "
    "train a diagnosis classifier (CN vs AD). Deliver the preprocessing pipeline, the trained "
    "model and a standalone inference script."
)
DELIVERABLES = ("pipeline", "model", "inference-script")


def happy_path_objective(dataset: DatasetRef) -> Objective:
    return Objective(GOAL, dataset, DELIVERABLES)


RAW_QC = '''\
import os
from pathlib import Path

from neuroagent.mocklib import get_mriqc_group_level_tsv_and_outliers, mriqc_visual_inspection_based_qc, run_mriqc

dataset = Path(os.environ["DATASET_ROOT"])
out = Path("derivatives/mriqc")
rows = (dataset / "participants.tsv").read_text().splitlines()[1:]
subjects = [r.split("\\t")[0] for r in rows if r.strip()]
for s in subjects:
    run_mriqc(dataset, out, s)
flagged = get_mriqc_group_level_tsv_and_outliers(out, out / "group_T1w.tsv")
print("flagged by metrics:", ", ".join(flagged) or "none")
excluded = []
for s in flagged:
    verdict = mriqc_visual_inspection_based_qc(out / f"{s}_T1w_mosaic.npz", s)
    print(s, verdict["verdict"], verdict["reject_reason"] or "")
    if verdict["verdict"] == "REJECTED":
        excluded.append(s)
included = [s for s in subjects if s not in excluded]
Path("subjects_included.txt").write_text("".join(s + "\\n" for s in included))
print("excluded:", ", ".join(excluded) or "none")
print("included:", len(included), "subjects listed in subjects_included.txt")
'''

PILOT_A = '''\
from neuroagent.mocklib import afni_t1w_skull_strip, t1w_path
from neuroagent.sandbox import read_subjects_file, sample_subjects, write_subjects_file

pilot = sample_subjects(read_subjects_file("subjects_included.txt"), 10, seed=7)
write_subjects_file("subjects_pilot.txt", pilot)
for s in pilot:
    afni_t1w_skull_strip(t1w_path(s), "derivatives/pipeline_A", s)
print("pipeline A done for", len(pilot), "pilot subjects:", ", ".join(pilot))
print("outputs: derivatives/pipeline_A/{subject}_brain_mask.npz and {subject}_brain.npz")
'''

PILOT_B = '''\
from neuroagent.mocklib import fsl_bet_t1w, fsl_fast, t1w_path
from neuroagent.sandbox import read_subjects_file

pilot = read_subjects_file("subjects_pilot.txt")
for s in pilot:
    paths = fsl_bet_t1w(t1w_path(s), "derivatives/pipeline_B", s)
    fsl_fast(paths["brain"], "derivatives/pipeline_B", s)
print("pipeline B done for", len(pilot), "pilot subjects")
print("outputs: derivatives/pipeline_B/{subject}_brain_mask.npz and {subject}_seg.npz")
'''

PROCESS_SUBJECT = '''\
import sys

from neuroagent.mocklib import fsl_bet_t1w, fsl_fast, t1w_path

subject = sys.argv[1]
paths = fsl_bet_t1w(t1w_path(subject), "derivatives/pipeline_B", subject)
fsl_fast(paths["brain"], "derivatives/pipeline_B", subject)
print(subject, "skull stripping and tissue segmentation done")
'''

QC_HEAD = '''\
from neuroagent.mocklib import {primitives}, t1w_path
from neuroagent.qc import DEFAULT_CHECKPOINTS, CohortMember, MetricVector, StubJudge, VisualizationDescriptor, run_checkpoint, write_qc_report
from neuroagent.sandbox import read_subjects_file

subjects = read_subjects_file("{subjects_file}")
base = "derivatives/pipeline_{pipeline}"
out = "derivatives/qc/{pipeline}_{label}"
results = []
skull = []
for s in subjects:
    m = smri_skull_stripping_qc(t1w_path(s), f"{{base}}/{{s}}_brain_mask.npz", s, out)
    viz = VisualizationDescriptor(s, "skull_strip", "mask_contour_montage", path=m["montage"])
    skull.append(CohortMember(s, MetricVector(s, "skull_strip", {{"brain_volume_ml": m["brain_volume_ml"]}}), viz))
results.append(run_checkpoint(skull, DEFAULT_CHECKPOINTS["skull_strip"], StubJudge(), mode="{mode}"))
'''

QC_SEG = '''\
seg = []
for s in subjects:
    m = smri_tissue_segmentation_qc(t1w_path(s), f"{{base}}/{{s}}_seg.npz", s, out)
    viz = VisualizationDescriptor(s, "tissue_segmentation", "segmentation_contour_montage", path=m["montage"])
    volumes = {{k: m[k] for k in ("csf_ml", "gm_ml", "wm_ml")}}
    seg.append(CohortMember(s, MetricVector(s, "tissue_segmentation", volumes), viz))
results.append(run_checkpoint(seg, DEFAULT_CHECKPOINTS["tissue_segmentation"], StubJudge(), mode="{mode}"))
'''

QC_TAIL = '''\
report = write_qc_report(results, f"{{out}}_report.json", f"{{out}}_summary.tsv")
for r in results:
    print(r.checkpoint, "mode", r.mode, "inspected", len(r.inspected), "of", len(subjects))
fails = [row for row in report["subjects"] if row["verdict"] == "FAIL"]
print(f"FAIL {{len(fails)}}/{{len(subjects)}}")
for row in fails:
    print(row["subject"], "failed", ",".join(row["failed_steps"]), "-", row["summary"])
print(f"report: {{out}}_report.json")
'''

TRAIN_BROKEN = '''\
from neuroagent.models_extra import GradientBoostedTrees

model = GradientBoostedTrees()
'''

TRAIN = '''\
import json
import os
from pathlib import Path

import numpy as np

from neuroagent.qc import VoxelGrid
from neuroagent.sandbox import read_subjects_file

dataset = Path(os.environ["DATASET_ROOT"])
labels = {}
for row in (dataset / "participants.tsv").read_text().splitlines()[1:]:
    cols = row.split("\\t")
    labels[cols[0]] = 1.0 if cols[3] == "AD" else 0.0
subjects = read_subjects_file("subjects_included.txt")


def features(path):
    seg = VoxelGrid.load(path)
    ml = float(np.prod(seg.spacing)) / 1000.0
    return [float((seg.values == k).sum()) * ml for k in (1, 2, 3)]


X = np.array([features(f"derivatives/pipeline_B/{s}_seg.npz") for s in subjects])
y = np.array([labels[s] for s in subjects])
mean, scale = X.mean(axis=0), X.std(axis=0) + 1e-9
Z = (X - mean) / scale
w, b = np.zeros(Z.shape[1]), 0.0
for _ in range(2000):
    p = 1.0 / (1.0 + np.exp(-(Z @ w + b)))
    w -= 0.5 * Z.T @ (p - y) / len(y)
    b -= 0.5 * float((p - y).mean())
accuracy = float(((Z @ w + b > 0) == (y > 0.5)).mean())
Path("models").mkdir(exist_ok=True)
model = {"features": ["csf_ml", "gm_ml", "wm_ml"], "mean": mean.tolist(), "scale": scale.tolist(),
         "weights": w.tolist(), "bias": b, "train_accuracy": accuracy}
Path("models/classifier.json").write_text(json.dumps(model, indent=1, sort_keys=True) + "\\n")
print(f"trained on {len(subjects)} subjects, training accuracy {accuracy:.3f}")
print("model saved to models/classifier.json")
'''

INFER = '''\
"""Predict CN/AD from tissue segmentations: python infer.py SEG.npz [SEG.npz ...]"""
import json
import sys

import numpy as np

from neuroagent.qc import VoxelGrid

model = json.load(open("models/classifier.json"))
for path in sys.argv[1:]:
    seg = VoxelGrid.load(path)
    ml = float(np.prod(seg.spacing)) / 1000.0
    x = np.array([float((seg.values == k).sum()) * ml for k in (1, 2, 3)])
    z = (x - np.array(model["mean"])) / np.array(model["scale"])
    prob = 1.0 / (1.0 + np.exp(-(z @ np.array(model["weights"]) + model["bias"])))
    print(path, "AD" if prob > 0.5 else "CN", f"{prob:.3f}")
'''


def _qc_program(pipeline: str, subjects_file: str, mode: str, with_seg: bool, label: str) -> str:
    primitives = "smri_skull_stripping_qc, smri_tissue_segmentation_qc" if with_seg else "smri_skull_stripping_qc"
    template = QC_HEAD + (QC_SEG if with_seg else "") + QC_TAIL
    return template.format(primitives=primitives, pipeline=pipeline, subjects_file=subjects_file, mode=mode, label=label)


class _ScriptBuilder:
    def __init__(self):
        self.entries: list[ScriptEntry] = []

    def act(self, agent: AgentRole, match: str, action: str, **args) -> None:
        n = len(self.entries)
        usage = Usage(1800 + 53 * n, 120 + 7 * (n % 9), round(0.004 + 0.0005 * (n % 7), 6))
        body = json.dumps({"action": action, **args}, sort_keys=True)
        self.entries.append(ScriptEntry(agent, DecisionPoint.REACT_STEP, match, body, usage))


def happy_path_script() -> list[ScriptEntry]:
    """Scripted decisions for a full episode on :func:`make_dataset` output.

    Pipeline A is piloted and rejected by QC (every pilot subject fails), the
    team switches to pipeline B, scales it to the cohort as a job array, and the
    first training program fails on a missing module before a fixed version runs.
    """
    S, DA, QC, P, DS = (
        AgentRole.SUPERVISOR,
        AgentRole.DATA_AWARENESS,
        AgentRole.QUALITY_CONTROL,
        AgentRole.PROCESSING,
        AgentRole.DOWNSTREAM_ANALYSIS,
    )
    b = _ScriptBuilder()
    plan = [
        "profile the dataset", "raw data QC", "pilot preprocessing on a sample", "QC of the pilot",
        "preprocess all included subjects", "QC of all subjects", "train classifier", "report deliverables",
    ]
    b.act(S, "Objective:", "write_todos", items=[{"text": t, "status": "pending"} for t in plan])
    b.act(S, "[ ] profile the dataset", "send_message", to="DataAwareness",
          body="Profile the dataset at <dataset>: subjects, modalities and diagnosis labels.")
    b.act(DA, "Profile the dataset", "read_file", path="<dataset>/participants.tsv")
    b.act(DA, "diagnosis", "read_file", path="<dataset>/sub-01/anat")
    b.act(DA, "sub-01_T1w.npz", "send_message", to="Supervisor",
          body="12 subjects (sub-01..sub-12), one T1w image each at <dataset>/sub-XX/anat/sub-XX_T1w.npz; "
               "labels in <dataset>/participants.tsv column diagnosis (CN/AD).")

    b.act(S, "12 subjects", "write_todos", items=[{"text": t, "status": "done" if i < 1 else "pending"} for i, t in enumerate(plan)])
    b.act(S, "[x] profile the dataset", "send_message", to="QualityControl",
          body="Run raw-data QC on all 12 T1w images under <dataset> with run_mriqc, screen the group table with "
               "get_mriqc_group_level_tsv_and_outliers and inspect flagged subjects with "
               "mriqc_visual_inspection_based_qc. Write the kept subjects to subjects_included.txt.")
    b.act(QC, "raw-data QC", "synthesize_program", name="raw_qc", source=RAW_QC, entry_kind="single_run",
          primitives=["run_mriqc", "get_mriqc_group_level_tsv_and_outliers", "mriqc_visual_inspection_based_qc"])
    b.act(QC, "program raw_qc saved", "execute_program", name="raw_qc")
    b.act(QC, "excluded: sub-05", "send_message", to="Supervisor",
          body="Raw QC done. Exclude sub-05 (noisy image, contour mismatch on the mosaic). "
               "11 subjects remain, listed in <workspace>/subjects_included.txt.")

    b.act(S, "Exclude sub-05", "send_message", to="Processing",
          body="Pilot skull stripping with afni_t1w_skull_strip (pipeline A) on a seeded sample of 10 subjects from "
               "subjects_included.txt. Save the sample to subjects_pilot.txt and report output naming.")
    b.act(P, "pipeline A", "synthesize_program", name="pilot_A", source=PILOT_A, entry_kind="single_run",
          primitives=["afni_t1w_skull_strip"], pipeline="A")
    b.act(P, "program pilot_A saved", "execute_program", name="pilot_A", pipeline="A")
    b.act(P, "pipeline A done", "send_message", to="Supervisor",
          body="Pipeline A finished for 10 pilot subjects listed in <workspace>/subjects_pilot.txt. "
               "Masks at <workspace>/derivatives/pipeline_A/{subject}_brain_mask.npz.")

    b.act(S, "Pipeline A finished", "send_message", to="QualityControl",
          body="Check skull stripping of pipeline A for the 10 pilot subjects in subjects_pilot.txt with "
               "smri_skull_stripping_qc. Masks are at derivatives/pipeline_A/{subject}_brain_mask.npz. "
               "Small pilot, so inspect every subject visually.")
    b.act(QC, "pipeline A for the 10 pilot", "synthesize_program", name="qc_pilot_A", entry_kind="single_run",
          source=_qc_program("A", "subjects_pilot.txt", "visual_only", False, "pilot"), primitives=["smri_skull_stripping_qc"])
    b.act(QC, "program qc_pilot_A saved", "execute_program", name="qc_pilot_A")
    b.act(QC, "FAIL 10/10", "send_message", to="Supervisor",
          body="Pipeline A rejected: FAIL 10/10 at skull_strip, the masks cut into the brain (contour mismatch far above 5%). "
               "Report at <workspace>/derivatives/qc/A_pilot_report.json.")

    b.act(S, "Pipeline A rejected", "send_message", to="Processing",
          body="QC rejected pipeline A on all pilot subjects because the masks cut into the brain. Switch to pipeline B: "
               "fsl_bet_t1w for skull stripping followed by fsl_fast for tissue segmentation, on the same subjects_pilot.txt.")
    b.act(P, "Switch to pipeline B", "synthesize_program", name="pilot_B", source=PILOT_B, entry_kind="single_run",
          primitives=["fsl_bet_t1w", "fsl_fast"], pipeline="B")
    b.act(P, "program pilot_B saved", "execute_program", name="pilot_B", pipeline="B")
    b.act(P, "pipeline B done", "send_message", to="Supervisor",
          body="Pipeline B finished for the 10 pilot subjects. Outputs: derivatives/pipeline_B/{subject}_brain_mask.npz "
               "and derivatives/pipeline_B/{subject}_seg.npz.")

    b.act(S, "Pipeline B finished", "send_message", to="QualityControl",
          body="Check pipeline B for the pilot subjects in subjects_pilot.txt with smri_skull_stripping_qc and "
               "smri_tissue_segmentation_qc. Masks: derivatives/pipeline_B/{subject}_brain_mask.npz, labels: "
               "derivatives/pipeline_B/{subject}_seg.npz. Inspect every subject visually.")
    b.act(QC, "Check pipeline B for the pilot", "synthesize_program", name="qc_pilot_B", entry_kind="single_run",
          source=_qc_program("B", "subjects_pilot.txt", "visual_only", True, "pilot"),
          primitives=["smri_skull_stripping_qc", "smri_tissue_segmentation_qc"])
    b.act(QC, "program qc_pilot_B saved", "execute_program", name="qc_pilot_B")
    b.act(QC, "FAIL 0/10", "send_message", to="Supervisor",
          body="Pipeline B pilot passes: FAIL 0/10 for skull stripping and tissue segmentation.")

    b.act(S, "Pipeline B pilot passes", "write_todos", items=[{"text": t, "status": "done" if i < 4 else "pending"} for i, t in enumerate(plan)])
    b.act(S, "[x] QC of the pilot", "send_message", to="Processing",
          body="Scale pipeline B (fsl_bet_t1w then fsl_fast) to all 11 subjects in subjects_included.txt as a per-subject "
               "job array with at most 4 jobs at a time.")
    b.act(P, "Scale pipeline B", "synthesize_program", name="process_subject", source=PROCESS_SUBJECT, entry_kind="per_subject",
          primitives=["fsl_bet_t1w", "fsl_fast"], pipeline="B")
    b.act(P, "program process_subject saved", "execute_program", name="process_subject",
          subjects_file="subjects_included.txt", max_parallel=4, pipeline="B")
    b.act(P, "11/11 subjects succeeded", "send_message", to="Supervisor",
          body="Pipeline B ran for all 11 included subjects (job array, logs in <workspace>/logs/process_subject/). "
               "Per-subject pipeline script: <workspace>/scripts/process_subject.py.")

    b.act(S, "Pipeline B ran for all 11", "send_message", to="QualityControl",
          body="Run full-cohort QC of pipeline B on the 11 subjects in subjects_included.txt with smri_skull_stripping_qc "
               "and smri_tissue_segmentation_qc: screen the metrics first, then inspect only flagged subjects. "
               "Files: derivatives/pipeline_B/{subject}_brain_mask.npz and derivatives/pipeline_B/{subject}_seg.npz.")
    b.act(QC, "full-cohort QC", "synthesize_program", name="qc_full_B", entry_kind="single_run",
          source=_qc_program("B", "subjects_included.txt", "hierarchical", True, "full"),
          primitives=["smri_skull_stripping_qc", "smri_tissue_segmentation_qc"])
    b.act(QC, "program qc_full_B saved", "execute_program", name="qc_full_B")
    b.act(QC, "FAIL 0/11", "send_message", to="Supervisor",
          body="Full-cohort QC of pipeline B: FAIL 0/11. Flagged subjects were inspected and accepted. "
               "Report at <workspace>/derivatives/qc/B_full_report.json.")

    b.act(S, "FAIL 0/11", "send_message", to="DownstreamAnalysis",
          body="Train a CN vs AD classifier from tissue volumes (derivatives/pipeline_B/{subject}_seg.npz, labels in "
               "<dataset>/participants.tsv) for the 11 subjects in subjects_included.txt. Save the model under models/ "
               "and write a standalone inference script.")
    b.act(DS, "Train a CN vs AD classifier", "synthesize_program", name="train_model", source=TRAIN_BROKEN, entry_kind="single_run")
    b.act(DS, "program train_model saved", "execute_program", name="train_model")
    b.act(DS, "ModuleNotFoundError", "synthesize_program", name="train_model", source=TRAIN, entry_kind="single_run")
    b.act(DS, "program train_model saved", "execute_program", name="train_model")
    b.act(DS, "model saved to models/classifier.json", "synthesize_program", name="infer", source=INFER, entry_kind="single_run")
    b.act(DS, "program infer saved", "execute_program", name="infer", args=["derivatives/pipeline_B/sub-01_seg.npz"])
    b.act(DS, "sub-01_seg.npz", "send_message", to="Supervisor",
          body="Model trained and saved to <workspace>/models/classifier.json; inference script at "
               "<workspace>/scripts/infer.py (usage: python scripts/infer.py SEG.npz ...).")

    b.act(S, "Model trained", "write_todos", items=[{"text": t, "status": "done" if i < 7 else "pending"} for i, t in enumerate(plan)])
    b.act(S, "[x] train classifier", "report_final", deliverables=[
        {"kind": "pipeline", "path": "scripts/process_subject.py"},
        {"kind": "model", "path": "models/classifier.json"},
        {"kind": "inference-script", "path": "scripts/infer.py"},
    ])
    return b.entries


def infinite_loop_script(n: int = 600) -> list[ScriptEntry]:
    """A Supervisor that rewrites the same todo list forever."""
    b = _ScriptBuilder()
    for _ in range(n):
        b.act(AgentRole.SUPERVISOR, "", "write_todos", items=[{"text": "think about the data", "status": "pending"}])
    return b.entries


def write_happy_path(directory: str | Path, seed: int = 0) -> dict[str, Path]:
    """Dataset, objective file and script file for the happy-path episode."""
    directory = Path(directory)
    dataset = make_dataset(directory / "dataset", seed=seed)
    objective = directory / "objective.json"
    objective.write_text(json.dumps({"goal": GOAL, "deliverables": list(DELIVERABLES)}, indent=2) + "\n", encoding="utf-8")
    script = write_script(happy_path_script(), directory / "script.jsonl")
    return {"dataset": dataset.root_path, "objective": objective, "script": script}
