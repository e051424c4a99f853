"""Stand-ins for external neuroimaging tools, used by programs run in the sandbox.

Function names match primitive cards so the sandbox can check that a program
only uses primitives it was given. They operate on the small synthetic volumes
written by :mod:`neuroagent.synthetic` and are deterministic.

Intensity conventions of the synthetic T1w images: background about 5, skull
50, CSF 30, gray matter 70, white matter 100.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from scipy import ndimage

from .qc.metrics import VoxelGrid, compute_volume_ml
from .qc.visual import Montage, StubJudge, JudgeProtocol, VisualizationDescriptor, VizKind, make_montage, visual_inspect

BRAIN_LEVEL = 60.0
HEAD_LEVEL = 20.0
GM_LEVEL = 45.0
WM_LEVEL = 85.0
CSF, GM, WM = 1, 2, 3


def dataset_root() -> Path:
    return Path(os.environ.get("DATASET_ROOT", "dataset"))


def workspace_root() -> Path:
    return Path(os.environ.get("WORKSPACE_ROOT", "."))


def t1w_path(subject_id: str, bids_dir: str | Path | None = None) -> Path:
    root = Path(bids_dir) if bids_dir is not None else dataset_root()
    return root / subject_id / "anat" / f"{subject_id}_T1w.npz"


def _smooth(values: np.ndarray) -> np.ndarray:
    return ndimage.uniform_filter(values.astype(np.float64), size=3, mode="nearest")


def _visible_brain(values: np.ndarray) -> np.ndarray:
    """Brain region as it appears in the image: smoothed intensity above the skull level."""
    brain = _smooth(values) > BRAIN_LEVEL
    labels, n = ndimage.label(brain)
    if n > 1:
        sizes = ndimage.sum(brain, labels, range(1, n + 1))
        brain = labels == (1 + int(np.argmax(sizes)))
    return ndimage.binary_fill_holes(brain)


def _head(values: np.ndarray) -> np.ndarray:
    """Head region: thresholded, opened to drop isolated noise voxels, then filled."""
    return ndimage.binary_fill_holes(ndimage.binary_opening(values > HEAD_LEVEL))


# -- raw data QC ----------------------------------------------------------------------

def run_mriqc(bids_dir, output_dir, subject_id):
    """Image quality metrics and a raw mosaic for one subject's T1w image."""
    grid = VoxelGrid.load(t1w_path(subject_id, bids_dir))
    v = grid.values.astype(np.float64)
    head = _head(v)
    bg = v[~head]
    fg = v[head]
    wm = v[head & (v > WM_LEVEL)]
    gm = v[head & (v > GM_LEVEL) & (v <= WM_LEVEL)]
    sd_bg = float(bg.std()) or 1e-6
    iqms = {
        "cjv": float((wm.std() + gm.std()) / max(abs(wm.mean() - gm.mean()), 1e-6)),
        "cnr": float(abs(wm.mean() - gm.mean()) / np.sqrt(sd_bg**2 + wm.var() + gm.var())),
        "efc": float(-(np.abs(v) / np.sqrt((v**2).sum()) * np.log(np.abs(v) / np.sqrt((v**2).sum()) + 1e-12)).sum() / v.size),
        "fber": float((fg**2).mean() / max((bg**2).mean(), 1e-6)),
        "snr_total": float(fg.mean() / sd_bg),
        "qi_1": float((bg > HEAD_LEVEL).mean()),
        "wm2max": float(np.median(wm) / np.percentile(v, 99.95)),
    }
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{subject_id}_T1w_iqm.json").write_text(json.dumps(iqms, sort_keys=True, indent=1) + "\n")
    montage = make_montage(v, reference=head, mask=v > HEAD_LEVEL)
    montage.save(out / f"{subject_id}_T1w_mosaic.npz")
    return iqms


def get_mriqc_group_level_tsv_and_outliers(mriqc_dir, output_tsv, method="iqr"):
    """Collect per-subject IQMs into a group table and return the screened outliers."""
    from .qc.checkpoint import DEFAULT_CHECKPOINTS
    from .qc.metrics import MetricVector, write_metric_table
    from .qc.screening import RuleKind, ScreeningRule, screen_cohort

    vectors = []
    for path in sorted(Path(mriqc_dir).glob("*_T1w_iqm.json")):
        subject = path.name.split("_T1w_iqm.json")[0]
        vectors.append(MetricVector(subject, "raw_t1w", json.loads(path.read_text())))
    write_metric_table(vectors, output_tsv)
    config = DEFAULT_CHECKPOINTS["raw_t1w"]
    rule = config.screening_rule(ScreeningRule(RuleKind(method)))
    return sorted(screen_cohort(vectors, list(config.metrics), rule).flagged)


def mriqc_visual_inspection_based_qc(mosaic_path, subject_id, threshold=0.05):
    viz = VisualizationDescriptor(subject_id, "raw_t1w", VizKind.RAW_MOSAIC, Montage.load(mosaic_path), str(mosaic_path))
    verdict = visual_inspect(viz, StubJudge(threshold), JudgeProtocol())
    return verdict.to_record()


# -- processing --------------------------------------------------------------------------

def _write_brain(grid: VoxelGrid, mask: np.ndarray, output_dir, subject_id):
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mask_path = out / f"{subject_id}_brain_mask.npz"
    brain_path = out / f"{subject_id}_brain.npz"
    VoxelGrid(mask.astype(np.uint8), grid.spacing).save(mask_path)
    VoxelGrid(np.where(mask, grid.values, 0), grid.spacing).save(brain_path)
    return {"brain": str(brain_path), "mask": str(mask_path)}


def fsl_bet_t1w(input_image, output_dir, subject_id, frac=0.5):
    """Skull stripping that keeps the visible brain."""
    grid = VoxelGrid.load(input_image)
    return _write_brain(grid, _visible_brain(grid.values), output_dir, subject_id)


def afni_t1w_skull_strip(input_image, output_dir, subject_id):
    """Skull stripping that cuts too deep: the mask is eroded by two voxels."""
    grid = VoxelGrid.load(input_image)
    mask = ndimage.binary_erosion(_visible_brain(grid.values), iterations=2)
    return _write_brain(grid, mask, output_dir, subject_id)


def fsl_fast(input_brain, output_dir, subject_id):
    """Three-class intensity segmentation of a skull-stripped image (1 CSF, 2 GM, 3 WM)."""
    grid = VoxelGrid.load(input_brain)
    v = grid.values
    labels = np.zeros(v.shape, dtype=np.uint8)
    inside = v > 0
    labels[inside & (v <= GM_LEVEL)] = CSF
    labels[inside & (v > GM_LEVEL) & (v <= WM_LEVEL)] = GM
    labels[inside & (v > WM_LEVEL)] = WM
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{subject_id}_seg.npz"
    VoxelGrid(labels, grid.spacing).save(path)
    return {"labels": str(path)}


# -- derivative QC -----------------------------------------------------------------------

def smri_skull_stripping_qc(t1w_image, brain_mask, subject_id, output_dir):
    """Brain volume metric plus a mask-contour montage for one subject."""
    t1 = VoxelGrid.load(t1w_image)
    mask = VoxelGrid.load(brain_mask)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    montage_path = out / f"{subject_id}_skull_strip_montage.npz"
    make_montage(t1.values, reference=_visible_brain(t1.values), mask=mask.values).save(montage_path)
    return {"brain_volume_ml": compute_volume_ml(mask), "montage": str(montage_path)}


def smri_tissue_segmentation_qc(t1w_image, seg_labels, subject_id, output_dir):
    """Tissue volumes plus a segmentation-contour montage for one subject."""
    t1 = VoxelGrid.load(t1w_image)
    seg = VoxelGrid.load(seg_labels)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    montage_path = out / f"{subject_id}_tissue_seg_montage.npz"
    make_montage(t1.values, reference=_visible_brain(t1.values), mask=seg.values > 0).save(montage_path)
    volumes = {}
    for name, label in (("csf_ml", CSF), ("gm_ml", GM), ("wm_ml", WM)):
        volumes[name] = float(np.count_nonzero(seg.values == label) * np.prod(seg.spacing) / 1000.0)
    return {**volumes, "montage": str(montage_path)}
