"""Program execution inside a confined workspace, plus job-array dispatch.

Programs are Python sources written under ``<root>/scripts`` and run with the
workspace root as working directory. Writes outside the root are blocked by an
audit hook and reported as violations. A nonzero exit status is returned as
data on the :class:`ExecutionRecord`; it is never raised.

Job arrays follow sbatch array semantics: array index *i* runs line *i* of
``subjects.txt`` and each subject's output goes to ``<log_dir>/<subject>.log``.
"""

from __future__ import annotations

import ast
import logging
import os
import random
import re
import shlex
import shutil
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import _confine
from .errors import (
    EmptyProgram,
    ExecutorUnavailable,
    OutputOverflow,
    SampleTooLarge,
    SandboxTimeout,
    SpawnFailure,
    SubjectsFileMissing,
    UndeclaredPrimitive,
    WorkspaceViolation,
)

log = logging.getLogger(__name__)

SUBDIRS = ("scripts", "logs", "slurm_outputs", "derivatives", "models")
TRUNCATION_MARKER = "\n[output truncated at {limit} bytes]\n"
CONFINE_SCRIPT = Path(_confine.__file__).resolve()
PACKAGE_PARENT = Path(__file__).resolve().parent.parent


@dataclass(frozen=True)
class WorkspaceLayout:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root).resolve())

    @property
    def subdirs(self) -> dict[str, Path]:
        return {name: self.root / name for name in SUBDIRS}

    def prepare(self) -> "WorkspaceLayout":
        for path in self.subdirs.values():
            path.mkdir(parents=True, exist_ok=True)
        (self.root / "tmp").mkdir(exist_ok=True)
        return self

    def resolve(self, path: str | os.PathLike) -> Path:
        """Absolute path for ``path`` (relative to the root), refusing escapes."""
        full = (self.root / path).resolve()
        if full != self.root and self.root not in full.parents:
            raise WorkspaceViolation(f"WorkspaceViolation: {path} resolves outside the workspace")
        return full

    def relative(self, path: str | os.PathLike) -> str:
        return Path(path).resolve().relative_to(self.root).as_posix()


@dataclass(frozen=True)
class Program:
    source: str
    declared_primitives: frozenset[str] = frozenset()
    entry_kind: str = "single_run"
    name: str = "program"

    def __post_init__(self):
        if self.entry_kind not in ("single_run", "per_subject"):
            raise ValueError(f"unknown entry_kind {self.entry_kind!r}")
        if not re.fullmatch(r"[A-Za-z0-9_.-]+", self.name):
            raise ValueError(f"invalid program name {self.name!r}")
        object.__setattr__(self, "declared_primitives", frozenset(self.declared_primitives))

    @property
    def filename(self) -> str:
        return self.name if self.name.endswith(".py") else f"{self.name}.py"


@dataclass
class ExecutionRecord:
    exit_status: int
    stdout_log: Path
    duration: float
    produced_paths: list[str] = field(default_factory=list)
    truncated: bool = False
    violations: list[str] = field(default_factory=list)
    subject: str | None = None

    def read_log(self) -> str:
        return self.stdout_log.read_text(encoding="utf-8", errors="replace")


@dataclass(frozen=True)
class Limits:
    wall_seconds: float = 3600.0
    output_bytes: int = 1_000_000
    on_overflow: str = "truncate"  # or "raise"


def referenced_primitives(source: str, names: Iterable[str]) -> set[str]:
    """Card names used as identifiers (imports, calls, attributes) in ``source``."""
    names = set(names)
    try:
        tree = ast.parse(source)
    except SyntaxError:
        words = set(re.findall(r"[A-Za-z_][A-Za-z0-9_]*", source))
        return names & words
    found = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Name):
            found.add(node.id)
        elif isinstance(node, ast.Attribute):
            found.add(node.attr)
        elif isinstance(node, (ast.ImportFrom, ast.Import)):
            for alias in node.names:
                found.add(alias.name.split(".")[-1])
    return names & found


def validate_program(program: Program, selection, known_names: Iterable[str] = ()) -> Program:
    """Check ``program`` against the primitives selected for its instruction.

    ``known_names`` are all registry names; any of them referenced in the source
    counts as declared, so a program cannot use a card it did not get.
    """
    if not program.source.strip():
        raise EmptyProgram("program source is empty")
    declared = set(program.declared_primitives) | referenced_primitives(program.source, known_names)
    allowed = set(selection.selected_names) if selection is not None else set()
    for name in sorted(declared):
        if name not in allowed:
            raise UndeclaredPrimitive(name)
    return Program(program.source, frozenset(declared), program.entry_kind, program.name)


def _snapshot(root: Path) -> dict[str, tuple[int, int]]:
    state = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in filenames:
            p = Path(dirpath) / fn
            try:
                st = p.stat()
            except OSError:
                continue
            state[p.relative_to(root).as_posix()] = (st.st_mtime_ns, st.st_size)
    return state


def _changed(before: Mapping, after: Mapping, exclude: Iterable[str] = ()) -> list[str]:
    skip = set(exclude)
    return sorted(p for p, sig in after.items() if before.get(p) != sig and p not in skip)


def sandbox_env(root: Path, extra: Mapping[str, str] | None = None) -> dict[str, str]:
    env = dict(os.environ)
    tmp = root / "tmp"
    tmp.mkdir(exist_ok=True)
    py_path = [str(PACKAGE_PARENT)]
    if env.get("PYTHONPATH"):
        py_path.append(env["PYTHONPATH"])
    env.update(
        PYTHONPATH=os.pathsep.join(py_path),
        PYTHONDONTWRITEBYTECODE="1",
        PYTHONUNBUFFERED="1",
        PYTHONHASHSEED="0",
        TMPDIR=str(tmp),
        MPLCONFIGDIR=str(tmp),
        WORKSPACE_ROOT=str(root),
    )
    if extra:
        env.update({k: str(v) for k, v in extra.items()})
    return env


def _finish_log(log_path: Path, limits: Limits) -> bool:
    size = log_path.stat().st_size
    if size <= limits.output_bytes:
        return False
    if limits.on_overflow == "raise":
        raise OutputOverflow(f"output exceeded {limits.output_bytes} bytes")
    with open(log_path, "r+b") as fh:
        fh.truncate(limits.output_bytes)
        fh.seek(0, os.SEEK_END)
        fh.write(TRUNCATION_MARKER.format(limit=limits.output_bytes).encode())
    return True


def _violations(log_path: Path) -> list[str]:
    text = log_path.read_text(encoding="utf-8", errors="replace")
    return [line.split(_confine.MARKER, 1)[1].strip() for line in text.splitlines() if _confine.MARKER in line]


def _run(argv: Sequence[str], cwd: Path, log_path: Path, env: Mapping[str, str], limits: Limits) -> tuple[int, float]:
    log_path.parent.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    with open(log_path, "wb") as out:
        try:
            proc = subprocess.Popen(list(argv), cwd=cwd, stdout=out, stderr=subprocess.STDOUT, env=dict(env))
        except OSError as exc:
            raise SpawnFailure(f"cannot start {argv[0]!r}: {exc}") from exc
        try:
            code = proc.wait(timeout=limits.wall_seconds)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
            out.write(f"\n[sandbox] SandboxTimeout: timed out after {limits.wall_seconds:g} s\n".encode())
            raise SandboxTimeout(f"timed out after {limits.wall_seconds:g} s") from None
    return code, time.monotonic() - start


def write_program(program: Program, workspace: WorkspaceLayout) -> Path:
    path = workspace.prepare().subdirs["scripts"] / program.filename
    path.write_text(program.source, encoding="utf-8")
    return path


def execute_program(
    program: Program,
    workspace: WorkspaceLayout,
    limits: Limits = Limits(),
    args: Sequence[str] = (),
    env: Mapping[str, str] | None = None,
    log_name: str | None = None,
) -> ExecutionRecord:
    workspace.prepare()
    script = write_program(program, workspace)
    log_path = workspace.subdirs["logs"] / (log_name or f"{Path(program.filename).stem}.log")
    before = _snapshot(workspace.root)
    argv = [sys.executable, str(CONFINE_SCRIPT), str(workspace.root), str(script), *args]
    code, duration = _run(argv, workspace.root, log_path, sandbox_env(workspace.root, env), limits)
    truncated = _finish_log(log_path, limits)
    after = _snapshot(workspace.root)
    skip = {workspace.relative(log_path), workspace.relative(script)}
    return ExecutionRecord(
        exit_status=code,
        stdout_log=log_path,
        duration=duration,
        produced_paths=_changed(before, after, skip),
        truncated=truncated,
        violations=_violations(log_path),
    )


def run_command(command: str, workspace: WorkspaceLayout, limits: Limits = Limits(), log_name: str = "command.log") -> ExecutionRecord:
    """Run a shell-free command line with the workspace root as cwd.

    Only Python children of confined scripts are confined; plain commands are
    trusted to respect the working directory.
    """
    workspace.prepare()
    argv = shlex.split(command)
    if not argv:
        raise SpawnFailure("empty command")
    argv = _python_argv(argv, workspace)
    log_path = workspace.subdirs["logs"] / log_name
    before = _snapshot(workspace.root)
    code, duration = _run(argv, workspace.root, log_path, sandbox_env(workspace.root), limits)
    truncated = _finish_log(log_path, limits)
    after = _snapshot(workspace.root)
    return ExecutionRecord(code, log_path, duration, _changed(before, after, {workspace.relative(log_path)}), truncated, _violations(log_path))


def _python_argv(argv: list[str], workspace: WorkspaceLayout | None) -> list[str]:
    if argv and argv[0] in ("python", "python3"):
        argv = [sys.executable, *argv[1:]]
        if workspace is not None and len(argv) > 1 and argv[1].endswith(".py"):
            argv = [sys.executable, str(CONFINE_SCRIPT), str(workspace.root), *argv[1:]]
    return argv


# -- subjects and job arrays ------------------------------------------------------------

def read_subjects_file(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise SubjectsFileMissing(f"subjects file {path} does not exist")
    ids = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not ids:
        raise SubjectsFileMissing(f"subjects file {path} is empty")
    if len(set(ids)) != len(ids):
        raise ValueError(f"subjects file {path} lists duplicate ids")
    return ids


def write_subjects_file(path: str | Path, subjects: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{s}\n" for s in subjects), encoding="utf-8")
    return path


@dataclass(frozen=True)
class JobArraySpec:
    subjects_file: Path
    per_subject_command: str  # "{subject}" is replaced by the subject id
    max_parallel: int = 4
    log_dir: Path = Path("logs")
    job_name: str = "job"

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")


class ConcurrencyProbe:
    """Tracks how many jobs run at once and the highest count seen."""

    def __init__(self):
        self.active = 0
        self.high_water = 0
        self._lock = threading.Lock()

    def enter(self):
        with self._lock:
            self.active += 1
            self.high_water = max(self.high_water, self.active)

    def exit(self):
        with self._lock:
            self.active -= 1


def render_sbatch(
    spec: JobArraySpec,
    n_subjects: int,
    output_dir: Path,
    options: Mapping[str, str] | None = None,
) -> str:
    """sbatch array script: one task per subjects-file line, logs per subject.

    Resource flags (cpus, mem, partition, ...) are cluster specific and only
    emitted when passed in ``options``.
    """
    lines = [
        "#!/bin/bash",
        f"#SBATCH --job-name={spec.job_name}",
        f"#SBATCH --array=1-{n_subjects}",
    ]
    for key, value in (options or {}).items():
        lines.append(f"#SBATCH --{key}={value}")
    lines += [
        f"#SBATCH --output={output_dir}/{spec.job_name}-%A_%a.out",
        "",
        f"SUBJECT_LIST={spec.subjects_file}",
        'SUB_ID=$(sed -n "${SLURM_ARRAY_TASK_ID}p" "$SUBJECT_LIST")',
        "",
        f"LOG_DIR={spec.log_dir}",
        'mkdir -p "$LOG_DIR"',
        "",
        'exec >"${LOG_DIR}/${SUB_ID}.log" 2>&1',
        "",
        spec.per_subject_command.replace("{subject}", "${SUB_ID}"),
        "",
    ]
    return "\n".join(lines)


def dispatch_job_array(
    spec: JobArraySpec,
    executor: str = "local_pool",
    workspace: WorkspaceLayout | None = None,
    limits: Limits = Limits(),
    env: Mapping[str, str] | None = None,
    probe: ConcurrencyProbe | None = None,
    sbatch_options: Mapping[str, str] | None = None,
) -> list[ExecutionRecord]:
    """Run one job per subject and wait for all of them.

    Records come back in subjects-file order. With ``local_pool`` at most
    ``spec.max_parallel`` jobs run at once; with ``slurm`` the rendered script
    is submitted through ``sbatch --wait``.
    """
    subjects = read_subjects_file(spec.subjects_file)
    root = workspace.root if workspace is not None else Path.cwd()
    log_dir = spec.log_dir if Path(spec.log_dir).is_absolute() else root / spec.log_dir
    log_dir.mkdir(parents=True, exist_ok=True)
    if executor == "local_pool":
        return _dispatch_local(spec, subjects, root, log_dir, workspace, limits, env, probe)
    if executor == "slurm":
        return _dispatch_slurm(spec, subjects, root, log_dir, limits, sbatch_options)
    raise ExecutorUnavailable(f"unknown executor {executor!r}")


def _dispatch_local(spec, subjects, root, log_dir, workspace, limits, env, probe):
    probe = probe or ConcurrencyProbe()
    base_env = sandbox_env(root, env) if workspace is not None else {**os.environ, **(env or {})}
    before = _snapshot(root)

    def job(i_subject):
        i, subject = i_subject
        argv = _python_argv(shlex.split(spec.per_subject_command.replace("{subject}", subject)), workspace)
        job_env = {**base_env, "SUBJECT_ID": subject, "SLURM_ARRAY_TASK_ID": str(i)}
        log_path = log_dir / f"{subject}.log"
        probe.enter()
        try:
            try:
                code, duration = _run(argv, root, log_path, job_env, limits)
            except SandboxTimeout:
                code, duration = -9, limits.wall_seconds
        finally:
            probe.exit()
        truncated = _finish_log(log_path, limits)
        return ExecutionRecord(code, log_path, duration, [], truncated, _violations(log_path), subject)

    with ThreadPoolExecutor(max_workers=spec.max_parallel) as pool:
        records = list(pool.map(job, enumerate(subjects, start=1)))
    after = _snapshot(root)
    logs = {Path(r.stdout_log).resolve() for r in records}
    changed = [p for p in _changed(before, after) if (root / p).resolve() not in logs]
    for rec in records:
        token = re.compile(rf"(?<![A-Za-z0-9]){re.escape(rec.subject)}(?![A-Za-z0-9])")
        rec.produced_paths = [p for p in changed if token.search(p)]
    return records


def _dispatch_slurm(spec, subjects, root, log_dir, limits, options):
    sbatch = shutil.which("sbatch")
    if sbatch is None:
        raise ExecutorUnavailable("sbatch is not on PATH")
    out_dir = root / "slurm_outputs"
    out_dir.mkdir(parents=True, exist_ok=True)
    spec_abs = JobArraySpec(Path(spec.subjects_file).resolve(), spec.per_subject_command, spec.max_parallel, log_dir, spec.job_name)
    script = root / "scripts" / f"{spec.job_name}.sh"
    script.parent.mkdir(parents=True, exist_ok=True)
    script.write_text(render_sbatch(spec_abs, len(subjects), out_dir, options), encoding="utf-8")
    submit_log = out_dir / f"{spec.job_name}-submit.log"
    code, duration = _run([sbatch, "--wait", str(script)], root, submit_log, dict(os.environ), limits)
    records = []
    for subject in subjects:
        log_path = log_dir / f"{subject}.log"
        if not log_path.exists():
            log_path.write_text("", encoding="utf-8")
        records.append(ExecutionRecord(code, log_path, duration, [], False, _violations(log_path), subject))
    return records


def check_derivatives(expected_patterns: Sequence[str], subjects: Sequence[str], root: str | Path = ".") -> dict[str, list[str]]:
    """Subjects with missing expected files, mapped to the missing paths.

    Patterns are paths relative to ``root`` with a ``{subject}`` placeholder.
    Subjects with every file present are left out of the report.
    """
    root = Path(root)
    report = {}
    for subject in subjects:
        missing = [p.replace("{subject}", subject) for p in expected_patterns]
        missing = [p for p in missing if not (root / p).is_file()]
        if missing:
            report[subject] = missing
    return report


def sample_subjects(subjects: Sequence[str], n: int, seed: int) -> list[str]:
    """Seeded sample of ``n`` subjects, kept in their original order."""
    if n > len(subjects):
        raise SampleTooLarge(f"cannot sample {n} of {len(subjects)} subjects")
    if n < 0:
        raise ValueError("n must be non-negative")
    picks = sorted(random.Random(seed).sample(range(len(subjects)), n))
    return [subjects[i] for i in picks]
