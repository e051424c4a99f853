"""Quality control: image metrics, cohort screening, visual inspection and verdicts."""

from .checkpoint import (
    DEFAULT_CHECKPOINTS,
    CheckpointConfig,
    CheckpointResult,
    CohortMember,
    EvidenceBundle,
    StepEvidence,
    SubjectVerdict,
    Verdict,
    aggregate_subject_verdicts,
    load_checkpoint_configs,
    merge_subject_verdicts,
    run_checkpoint,
    write_qc_report,
)
from .metrics import (
    MetricVector,
    VoxelGrid,
    compute_dice,
    compute_ncc,
    compute_nmi,
    compute_volume_ml,
    ingest_metric_table,
    write_metric_table,
)
from .screening import Direction, RuleKind, ScreeningRule, screen_cohort, screen_iqr, screen_topk, topk_count
from .visual import (
    ElementVerdict,
    JudgeProtocol,
    Label,
    ModelJudge,
    Montage,
    StubJudge,
    VisualizationDescriptor,
    VizKind,
    contour_mismatch,
    make_montage,
    visual_inspect,
)
