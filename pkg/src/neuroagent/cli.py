"""Command line entry point: ``neuroagent run | qc | agree | stats``.

Exit codes: 0 success, 1 internal failure, 2 usage or configuration error,
3 budget exhausted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .runtime import Ablation
from .errors import BudgetExhausted, ConfigError, CorruptLedger, LedgerOpen, NeuroAgentError, PolicyFailure

log = logging.getLogger("neuroagent")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3
WORKSPACE_MARKER = ".neuroagent-workspace"


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    emitted_paths: list[Path] = field(default_factory=list)


def write_atomic(path: str | Path, text: str) -> Path:
    """Write ``text`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _need_file(flag: str, path) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def _need_dir(flag: str, path) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{flag}: directory not found: {path}")
    return path


# -- run ----------------------------------------------------------------------------------

def _fresh_workspace(path: Path) -> Path:
    """Empty workspace directory; only directories this command created are wiped."""
    if path.exists():
        if not (path / WORKSPACE_MARKER).is_file():
            if any(path.iterdir()):
                raise UsageError(f"workspace {path} exists and was not created by neuroagent; choose another --out")
        else:
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / WORKSPACE_MARKER).write_text("", encoding="utf-8")
    return path


def cmd_run(args) -> CommandResult:
    from .ledger import compute_run_stats, stats_tsv
    from .policy import LivePolicy, RecordingPolicy, ScriptedPolicy
    from .registry import default_library, load_directory
    from .runtime import DatasetRef, Objective, TickClock, load_episode_config, run_episode

    objective_path = _need_file("--objective", args.objective)
    dataset_root = _need_dir("--dataset", args.dataset)
    config = load_episode_config(_need_file("--config", args.config)) if args.config else load_episode_config_defaults()
    registry = load_directory(_need_dir("--cards", args.cards)) if args.cards else default_library()
    if not len(registry):
        raise UsageError(f"--cards: no primitive cards found in {args.cards}")
    try:
        objective = Objective.from_file(objective_path, DatasetRef.from_directory(dataset_root))
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"--objective: {exc}") from None

    random.seed(args.seed)
    np.random.seed(args.seed)
    policy_kind = args.policy or config.get("policy") or "scripted"
    if policy_kind == "scripted":
        policy = ScriptedPolicy.from_file(_need_file("--script", args.script))
    elif policy_kind == "live":
        policy = LivePolicy.from_env(options={"seed": args.seed})
        if args.record:
            policy = RecordingPolicy(policy, args.record)
    else:
        raise UsageError(f"--policy must be scripted or live, got {policy_kind!r}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workspace = _fresh_workspace(Path(config.get("workspace_root") or out / "workspace"))
    ablation = Ablation(args.ablation) if args.ablation else config["ablation"]
    clock = TickClock(0.0, args.fixed_clock) if args.fixed_clock is not None else None
    trace_tmp = out / ".trace.jsonl.partial"

    code, result, halt = EXIT_OK, None, None
    try:
        result = run_episode(
            objective, registry, policy, config["budget"], ablation, workspace, clock, trace_tmp,
            selector=config["selector"], executor=config["executor"],
        )
    except BudgetExhausted as exc:
        code, result, halt = EXIT_BUDGET, exc.result, f"budget exhausted: {exc.reason}"
    except PolicyFailure as exc:
        code, result, halt = EXIT_INTERNAL, getattr(exc, "result", None), f"policy failure: {exc}"
    if result is None:
        raise RuntimeError(halt or "episode produced no result")

    trace = out / "trace.jsonl"
    os.replace(trace_tmp, trace)
    deliverables = write_atomic(out / "deliverables.json", _json(result.deliverables_record()))
    stats = write_atomic(out / "run_stats.tsv", stats_tsv(compute_run_stats(result.ledger)))
    print(f"completed: {str(result.completed).lower()}  steps: {len(result.ledger)}  halt: {result.halt_reason or 'none'}")
    for path in (trace, deliverables, stats):
        print(path)
    if halt:
        print(halt, file=sys.stderr)
    return CommandResult(code, [trace, deliverables, stats])


def load_episode_config_defaults() -> dict:
    from .runtime import Budget

    return {"budget": Budget(), "ablation": Ablation.FULL, "workspace_root": None, "policy": None, "selector": "lexical", "executor": "local_pool"}


# -- qc ------------------------------------------------------------------------------------

def _checkpoints(args) -> dict:
    from .qc import DEFAULT_CHECKPOINTS, load_checkpoint_configs

    configs = dict(DEFAULT_CHECKPOINTS)
    if args.config:
        configs.update(load_checkpoint_configs(_need_file("--config", args.config)))
    return configs


def _rule(args, base=None):
    from .qc import RuleKind, ScreeningRule

    if args.rule is None and base is not None:
        kind = base.kind
    else:
        kind = RuleKind(args.rule or "iqr")
    multiplier = args.multiplier if args.multiplier is not None else (base.iqr_multiplier if base else 1.5)
    fraction = args.fraction if args.fraction is not None else (base.fraction if base else 0.15)
    return ScreeningRule(kind, multiplier, fraction)


def cmd_qc_screen(args) -> CommandResult:
    from .qc import Direction, ScreeningRule, ingest_metric_table, screen_cohort

    vectors = ingest_metric_table(_need_file("--metrics-table", args.metrics_table))
    if args.checkpoint:
        configs = _checkpoints(args)
        if args.checkpoint not in configs:
            raise UsageError(f"--checkpoint: unknown checkpoint {args.checkpoint!r}")
        config = configs[args.checkpoint]
        metrics = args.metric or list(config.metrics)
        rule = config.screening_rule(_rule(args, config.rule))
    else:
        if not args.metric:
            raise UsageError("--metric or --checkpoint is required")
        metrics = args.metric
        base = _rule(args)
        direction = Direction(args.direction)
        rule = ScreeningRule(base.kind, base.iqr_multiplier, base.fraction, {m: direction for m in metrics})
    result = screen_cohort(vectors, metrics, rule)
    record = {
        "metrics": list(metrics),
        "rule": rule.to_record(),
        "flagged": sorted(result.flagged),
        "triggers": {s: list(t) for s, t in sorted(result.triggers.items())},
    }
    path = write_atomic(Path(args.out) / "flagged.json", _json(record))
    print(f"flagged {len(result.flagged)}/{len(vectors)}: {', '.join(sorted(result.flagged)) or 'none'}")
    return CommandResult(EXIT_OK, [path])


_METRICS = ("dice", "nmi", "ncc", "volume_ml")


def cmd_qc_metrics(args) -> CommandResult:
    """Per-subject metrics from a manifest TSV with columns subject_id, image, reference."""
    import csv

    from .qc import MetricVector, VoxelGrid, compute_dice, compute_ncc, compute_nmi, compute_volume_ml, write_metric_table

    manifest = _need_file("--pairs", args.pairs)
    base = manifest.parent
    with open(manifest, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if not rows or not {"subject_id", "image"} <= set(rows[0]):
        raise UsageError("--pairs: manifest needs columns subject_id, image and (for pairwise metrics) reference")
    wanted = args.metric or ["dice", "nmi", "ncc"]
    for m in wanted:
        if m not in _METRICS:
            raise UsageError(f"--metric: unknown metric {m!r}; choose from {', '.join(_METRICS)}")

    vectors = []
    for row in rows:
        image = VoxelGrid.load(base / row["image"])
        ref = VoxelGrid.load(base / row["reference"]) if row.get("reference") else None
        values = {}
        for m in wanted:
            if m == "volume_ml":
                values[m] = compute_volume_ml(image, args.label)
                continue
            if ref is None:
                raise UsageError(f"--pairs: subject {row['subject_id']} has no reference for {m}")
            if m == "dice":
                values[m] = compute_dice(image, ref)
            elif m == "nmi":
                values[m] = compute_nmi(image, ref, args.bins)
            else:
                values[m] = compute_ncc(image, ref)
        vectors.append(MetricVector(row["subject_id"], args.step, values))
    text_path = Path(args.out) / "metrics.tsv"
    tmp = text_path.with_name(".metrics.tsv.partial")
    text_path.parent.mkdir(parents=True, exist_ok=True)
    write_metric_table(vectors, tmp)
    os.replace(tmp, text_path)
    print(f"wrote metrics for {len(vectors)} subjects to {text_path}")
    return CommandResult(EXIT_OK, [text_path])


def _judge(args):
    from .qc import ModelJudge, StubJudge

    if args.judge == "live":
        from .policy import LivePolicy

        return ModelJudge(LivePolicy.from_env())
    return StubJudge(args.threshold)


def cmd_qc_judge(args) -> CommandResult:
    from .qc import JudgeProtocol, Montage, VisualizationDescriptor, VizKind, visual_inspect

    protocol = JudgeProtocol(max_turns=args.max_turns)
    judge = _judge(args)
    verdicts = {}
    for raw in args.montage:
        path = _need_file("--montage", raw)
        subject = path.stem
        viz = VisualizationDescriptor(subject, args.step, VizKind(args.kind), Montage.load(path), str(raw))
        verdicts[subject] = visual_inspect(viz, judge, protocol).to_record()
    out = write_atomic(Path(args.out) / "judgments.json", _json(verdicts))
    for s, v in sorted(verdicts.items()):
        print(s, v["verdict"], v.get("reject_reason") or "")
    return CommandResult(EXIT_OK, [out])


def cmd_qc_checkpoint(args) -> CommandResult:
    from .qc import CohortMember, JudgeProtocol, Montage, VisualizationDescriptor, ingest_metric_table, run_checkpoint, write_qc_report

    configs = _checkpoints(args)
    if args.checkpoint not in configs:
        raise UsageError(f"--checkpoint: unknown checkpoint {args.checkpoint!r}; known: {', '.join(sorted(configs))}")
    config = configs[args.checkpoint]
    vectors = ingest_metric_table(_need_file("--metrics-table", args.metrics_table), config.name)
    montages = _need_dir("--montages", args.montages) if args.montages else None
    cohort = []
    for vec in vectors:
        viz = None
        if montages is not None and (montages / f"{vec.subject}.npz").is_file():
            path = montages / f"{vec.subject}.npz"
            viz = VisualizationDescriptor(vec.subject, config.name, config.viz_kind, Montage.load(path), f"{montages.name}/{path.name}")
        cohort.append(CohortMember(vec.subject, vec, viz))
    rule = _rule(args, config.rule) if (args.rule or args.multiplier or args.fraction) else None
    protocol = JudgeProtocol(config.criteria or JudgeProtocol.criteria, max_turns=args.max_turns)
    judge = None if args.mode == "metric_only" else _judge(args)
    try:
        result = run_checkpoint(cohort, config, judge, rule, protocol, args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_tmp, tsv_tmp = out / ".verdicts.json.partial", out / ".verdicts.tsv.partial"
    write_qc_report([result], json_tmp, tsv_tmp)
    os.replace(json_tmp, out / "verdicts.json")
    os.replace(tsv_tmp, out / "verdicts.tsv")
    fails = sorted(s for s, v in result.verdicts.items() if not v.passed)
    print(f"{config.name} ({result.mode}): flagged {len(result.flagged)}, inspected {len(result.inspected)}, FAIL {len(fails)}/{len(cohort)}: {', '.join(fails) or 'none'}")
    return CommandResult(EXIT_OK, [out / "verdicts.json", out / "verdicts.tsv"])


# -- agree ---------------------------------------------------------------------------------

def _named(raw: str, default: str) -> tuple[str, Path]:
    name, sep, path = raw.partition("=")
    if not sep:
        return default, Path(raw)
    return name, Path(path)


def cmd_agree(args) -> CommandResult:
    from .agreement import RatingMatrix, agreement_tsv, align, display, mean_agreement_report, pass_rate_table, read_ratings

    if not args.raters:
        raise UsageError("--raters needs at least one rating file")
    raters = []
    for i, raw in enumerate(args.raters):
        name, path = _named(raw, f"rater{i + 1}")
        raters.append((name, *read_ratings(_need_file("--raters", path))))
    items = raters[0][1]
    rater_labels = {name: align(items, its, labels) for name, its, labels in raters}
    systems = []
    for raw in args.system:
        name, path = _named(raw, "system")
        its, labels = read_ratings(_need_file("--system", path))
        systems.append((name, align(items, its, labels)))

    rows = []
    for name, labels in systems:
        report = mean_agreement_report(labels, list(rater_labels.values()), name, list(rater_labels))
        rows.append((args.checkpoint, name, report))
        print(f"{args.checkpoint} {name}: mean AC1 {display(report.mean_ac1)}")
    columns = {name: labels for name, labels in systems}
    columns.update(rater_labels)
    rates = pass_rate_table(RatingMatrix.from_columns(items, columns))
    rate_text = "checkpoint\trater\tpass_rate\n" + "".join(f"{args.checkpoint}\t{r}\t{pr.render()}\n" for r, pr in rates.items())
    out = Path(args.out)
    agreement = write_atomic(out / "agreement.tsv", agreement_tsv(rows))
    pass_rates = write_atomic(out / "pass_rates.tsv", rate_text)
    for r, pr in rates.items():
        print(f"  {r}: {pr.render()}")
    return CommandResult(EXIT_OK, [agreement, pass_rates])


# -- stats ---------------------------------------------------------------------------------

def cmd_stats(args) -> CommandResult:
    from .ledger import compute_run_stats, errors_tsv, export_tables, load_ledger

    ledgers, stats = [], []
    for raw in args.traces:
        path = _need_file("--traces", raw)
        try:
            ledger = load_ledger(path)
            stats.append(compute_run_stats(ledger))
        except (CorruptLedger, LedgerOpen) as exc:
            raise UsageError(f"{path}: {exc}") from None
        ledgers.append((path.stem, ledger))
    summary = export_tables(stats, args.runtime_unit)
    sys.stdout.write(summary)
    emitted = []
    if args.out:
        out = Path(args.out)
        emitted.append(write_atomic(out / "run_stats_summary.tsv", summary))
        emitted.append(write_atomic(out / "errors.tsv", errors_tsv(ledgers)))
    return CommandResult(EXIT_OK, emitted)


# -- wiring --------------------------------------------------------------------------------

def _screen_flags(p):
    p.add_argument("--rule", choices=["iqr", "topk"], help="screening rule (default: checkpoint's own, else iqr)")
    p.add_argument("--multiplier", type=float, help="IQR fence multiplier (default 1.5)")
    p.add_argument("--fraction", type=float, help="top-k fraction (default 0.15)")


def _judge_flags(p):
    p.add_argument("--judge", choices=["stub", "live"], default="stub")
    p.add_argument("--threshold", type=float, default=0.05, help="stub judge contour-mismatch threshold")
    p.add_argument("--max-turns", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuroagent", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one episode from raw dataset to deliverables")
    run.add_argument("--objective", required=True, help="JSON file with keys goal and deliverables")
    run.add_argument("--dataset", required=True, help="dataset root (participants.tsv or sub-* folders)")
    run.add_argument("--cards", help="primitive card directory (default: shipped library)")
    run.add_argument("--policy", choices=["scripted", "live"])
    run.add_argument("--script", help="script JSONL for --policy scripted")
    run.add_argument("--record", help="record a live session to this script file")
    run.add_argument("--config", help="episode config (JSON or YAML)")
    run.add_argument("--ablation", choices=[a.value for a in Ablation])
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--fixed-clock", type=float, metavar="TICK", help="simulated clock advancing TICK seconds per read")
    run.set_defaults(func=cmd_run)

    qc = sub.add_parser("qc", help="run QC stages standalone")
    qsub = qc.add_subparsers(dest="qc_command", required=True)

    screen = qsub.add_parser("screen", help="flag cohort outliers from a metric table")
    screen.add_argument("--metrics-table", required=True)
    screen.add_argument("--metric", action="append", help="metric column to screen (repeatable)")
    screen.add_argument("--direction", choices=["high_bad", "low_bad", "both"], default="both")
    screen.add_argument("--checkpoint", help="take metrics, directions and rule from this checkpoint")
    screen.add_argument("--config", help="checkpoint config file (JSON or YAML)")
    _screen_flags(screen)
    screen.add_argument("--out", required=True)
    screen.set_defaults(func=cmd_qc_screen)

    metrics = qsub.add_parser("metrics", help="compute per-subject metrics from volume files")
    metrics.add_argument("--pairs", required=True, help="TSV manifest: subject_id, image, reference (paths relative to the manifest)")
    metrics.add_argument("--metric", action="append", help=f"one of {', '.join(_METRICS)} (repeatable)")
    metrics.add_argument("--bins", type=int, default=64)
    metrics.add_argument("--label", type=int, help="label value for volume_ml")
    metrics.add_argument("--step", default="", help="checkpoint name recorded with the metrics")
    metrics.add_argument("--config", help="unused; accepted for symmetry with other qc commands")
    metrics.add_argument("--out", required=True)
    metrics.set_defaults(func=cmd_qc_metrics)

    judge = qsub.add_parser("judge", help="visually inspect montage files")
    judge.add_argument("--montage", action="append", required=True, help="montage .npz (repeatable; subject = file stem)")
    judge.add_argument("--kind", default="template_contour_montage", choices=["raw_mosaic", "mask_contour_montage", "segmentation_contour_montage", "template_contour_montage"])
    judge.add_argument("--step", default="")
    judge.add_argument("--config", help="unused; accepted for symmetry with other qc commands")
    _judge_flags(judge)
    judge.add_argument("--out", required=True)
    judge.set_defaults(func=cmd_qc_judge)

    ckpt = qsub.add_parser("checkpoint", help="screen a cohort and inspect flagged subjects")
    ckpt.add_argument("--checkpoint", required=True)
    ckpt.add_argument("--metrics-table", required=True)
    ckpt.add_argument("--montages", help="directory of <subject>.npz montages")
    ckpt.add_argument("--config", help="checkpoint config file (JSON or YAML)")
    ckpt.add_argument("--mode", choices=["auto", "hierarchical", "visual_only", "metric_only"], default="auto")
    _screen_flags(ckpt)
    _judge_flags(ckpt)
    ckpt.add_argument("--out", required=True)
    ckpt.set_defaults(func=cmd_qc_checkpoint)

    agree = sub.add_parser("agree", help="agreement (Gwet's AC1) between a QC system and human raters")
    agree.add_argument("--system", action="append", required=True, metavar="[NAME=]PATH",
                       help="system ratings; NAME is typically metric_only, agentic_visual_only, non_agentic_visual_only or hierarchical")
    agree.add_argument("--raters", nargs="+", required=True, metavar="[NAME=]PATH")
    agree.add_argument("--checkpoint", required=True)
    agree.add_argument("--out", required=True)
    agree.set_defaults(func=cmd_agree)

    stats = sub.add_parser("stats", help="summarize closed trace ledgers as mean (min-max)")
    stats.add_argument("--traces", nargs="+", required=True)
    stats.add_argument("--runtime-unit", choices=["h", "min", "s"], default="h")
    stats.add_argument("--out")
    stats.set_defaults(func=cmd_stats)
    return parser


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(EXIT_CONFIG if exc.code else EXIT_OK)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except NeuroAgentError as exc:
        # schema and input errors raised by library code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return CommandResult(EXIT_INTERNAL)
    return CommandResult(EXIT_CONFIG)


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    raise SystemExit(main())
