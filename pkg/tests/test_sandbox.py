import os
import re
import shutil
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from neuroagent.errors import (
    EmptyProgram,
    ExecutorUnavailable,
    OutputOverflow,
    SampleTooLarge,
    SandboxTimeout,
    SubjectsFileMissing,
    UndeclaredPrimitive,
)
from neuroagent.jit import SelectionResult
from neuroagent.ledger import ErrorCategory, classify_error
from neuroagent.sandbox import (
    ConcurrencyProbe,
    JobArraySpec,
    Limits,
    Program,
    WorkspaceLayout,
    check_derivatives,
    dispatch_job_array,
    execute_program,
    read_subjects_file,
    render_sbatch,
    sample_subjects,
    validate_program,
    write_subjects_file,
)

FIXTURES = Path(__file__).parent / "fixtures"
KNOWN = ["fsl_bet_t1w", "fsl_fast", "run_mriqc"]


def selection(*names):
    return SelectionResult(tuple(names), "")


@pytest.fixture
def ws(tmp_path):
    return WorkspaceLayout(tmp_path / "ws").prepare()


def test_layout_subdirs(ws):
    assert sorted(p.name for p in ws.root.iterdir() if p.name != "tmp") == sorted(["scripts", "logs", "slurm_outputs", "derivatives", "models"])


def test_validate_selected_only():
    prog = Program("from neuroagent.mocklib import fsl_bet_t1w\nfsl_bet_t1w('a', 'b', 'c')\n", {"fsl_bet_t1w"})
    out = validate_program(prog, selection("fsl_bet_t1w", "fsl_fast"), KNOWN)
    assert out.declared_primitives == {"fsl_bet_t1w"}


def test_validate_unselected_card():
    prog = Program("x = 1\n", {"fsl_fast"})
    with pytest.raises(UndeclaredPrimitive):
        validate_program(prog, selection("fsl_bet_t1w"), KNOWN)


def test_validate_catches_undeclared_use_in_source():
    prog = Program("from neuroagent.mocklib import fsl_fast\n", set())
    with pytest.raises(UndeclaredPrimitive) as exc:
        validate_program(prog, selection("fsl_bet_t1w"), KNOWN)
    assert "fsl_fast" in str(exc.value)


def test_validate_no_primitives_ablation():
    # registry hidden: the selection is empty, so any declared primitive is refused
    with pytest.raises(UndeclaredPrimitive):
        validate_program(Program("pass\n", {"fsl_bet_t1w"}), selection(), KNOWN)
    assert validate_program(Program("print(1)\n"), selection(), KNOWN).declared_primitives == frozenset()


def test_validate_empty_source():
    with pytest.raises(EmptyProgram):
        validate_program(Program("   \n"), selection())


def test_program_rejects_bad_entry_kind():
    with pytest.raises(ValueError):
        Program("pass", entry_kind="batch")


def test_step_completed_line(ws):
    rec = execute_program(Program("print('step 01 has completed')\n", name="step01"), ws)
    assert rec.exit_status == 0
    assert "step 01 has completed" in rec.read_log()
    assert rec.stdout_log.exists() and rec.duration >= 0


def test_nonzero_exit_is_data(ws):
    src = "import definitely_not_a_module\n"
    rec = execute_program(Program(src, name="broken"), ws)
    assert rec.exit_status == 1
    log = rec.read_log()
    assert "Traceback" in log and "ModuleNotFoundError" in log
    assert "_confine" not in log and "runpy" not in log
    assert classify_error(log) is ErrorCategory.CODEGEN_EXECUTION


def test_sys_exit_code_passes_through(ws):
    rec = execute_program(Program("import sys\nsys.exit(3)\n", name="ex"), ws)
    assert rec.exit_status == 3


def test_produced_paths(ws):
    src = "from pathlib import Path\nPath('derivatives/a.txt').write_text('x')\nPath('models/m.json').write_text('{}')\n"
    rec = execute_program(Program(src, name="writer"), ws)
    assert rec.produced_paths == ["derivatives/a.txt", "models/m.json"]


def test_write_outside_workspace_blocked(ws, tmp_path):
    outside = tmp_path / "outside.txt"
    src = f"try:\n    open({str(outside)!r}, 'w').write('x')\nexcept PermissionError as e:\n    print('blocked', e)\nopen('derivatives/ok.txt', 'w').write('y')\n"
    rec = execute_program(Program(src, name="escape"), ws)
    assert not outside.exists()
    assert rec.violations == [str(outside)]
    assert rec.produced_paths == ["derivatives/ok.txt"]
    assert "WorkspaceViolation" in rec.read_log()


def test_relative_escape_blocked(ws):
    src = "import os\nos.makedirs('../elsewhere', exist_ok=True)\n"
    rec = execute_program(Program(src, name="rel"), ws)
    assert rec.exit_status == 1
    assert not (ws.root.parent / "elsewhere").exists()
    assert rec.violations


def _tree(root):
    return {p.relative_to(root).as_posix() for p in Path(root).rglob("*")}


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(targets=st.lists(st.sampled_from(["../a.txt", "../../b.txt", "/tmp/neuroagent_probe_c.txt", "derivatives/d.txt", "e.txt", "models/../f.txt", "derivatives/../../g.txt"]), min_size=1, max_size=4))
def test_confinement_property(tmp_path, targets):
    root = tmp_path / "prop" / "ws"
    if root.parent.exists():
        shutil.rmtree(root.parent)
    ws = WorkspaceLayout(root).prepare()
    before = {p for p in _tree(tmp_path) if not p.startswith("prop/ws")}
    tmp_probe = Path("/tmp/neuroagent_probe_c.txt")
    tmp_probe.unlink(missing_ok=True)
    lines = [f"try:\n    open({t!r}, 'w').write('x')\nexcept PermissionError:\n    pass" for t in targets]
    execute_program(Program("\n".join(lines) + "\n", name="prop"), ws)
    after = {p for p in _tree(tmp_path) if not p.startswith("prop/ws")}
    assert after == before
    assert not tmp_probe.exists()


def test_timeout(ws):
    with pytest.raises(SandboxTimeout):
        execute_program(Program("import time\ntime.sleep(5)\n", name="slow"), ws, Limits(wall_seconds=0.5))
    assert "SandboxTimeout" in (ws.root / "logs" / "slow.log").read_text()


def test_output_truncated(ws):
    rec = execute_program(Program("print('x' * 5000)\n", name="loud"), ws, Limits(output_bytes=100))
    assert rec.truncated
    text = rec.read_log()
    assert text.startswith("x" * 100)
    assert "[output truncated at 100 bytes]" in text


def test_output_overflow_raises(ws):
    with pytest.raises(OutputOverflow):
        execute_program(Program("print('x' * 5000)\n", name="loud"), ws, Limits(output_bytes=100, on_overflow="raise"))


# -- job arrays -----------------------------------------------------------------------

PER_SUBJECT = """\
import sys, time
from pathlib import Path
sid = sys.argv[1]
print('start', time.time())
time.sleep(%s)
Path('derivatives', sid).mkdir(parents=True, exist_ok=True)
Path('derivatives', sid, 'out.txt').write_text(sid)
print('end', time.time())
print('step 01 has completed')
"""


def _array(ws, subjects, sleep=0.0, max_parallel=4, probe=None):
    execute_program(Program("pass\n", name="noop"), ws)
    (ws.root / "scripts" / "job.py").write_text(PER_SUBJECT % sleep)
    subj = write_subjects_file(ws.root / "subjects.txt", subjects)
    spec = JobArraySpec(subj, "python scripts/job.py {subject}", max_parallel, Path("logs/array"))
    return dispatch_job_array(spec, "local_pool", ws, probe=probe)


def test_three_subject_logs(ws):
    recs = _array(ws, ["sub-01", "sub-02", "sub-03"])
    assert sorted(p.name for p in (ws.root / "logs" / "array").iterdir()) == ["sub-01.log", "sub-02.log", "sub-03.log"]
    assert [r.subject for r in recs] == ["sub-01", "sub-02", "sub-03"]
    assert all(r.exit_status == 0 for r in recs)
    assert recs[1].produced_paths == ["derivatives/sub-02/out.txt"]


def test_max_parallel_respected(ws):
    probe = ConcurrencyProbe()
    subjects = [f"sub-{i:02d}" for i in range(1, 11)]
    recs = _array(ws, subjects, sleep=0.3, max_parallel=4, probe=probe)
    assert probe.high_water <= 4
    # independent check from the timestamps each job logged
    spans = []
    for r in recs:
        text = r.read_log()
        spans.append((float(re.search(r"start (\S+)", text).group(1)), float(re.search(r"end (\S+)", text).group(1))))
    events = sorted([(s, 1) for s, _ in spans] + [(e, -1) for _, e in spans], key=lambda x: (x[0], x[1]))
    live = peak = 0
    for _, d in events:
        live += d
        peak = max(peak, live)
    assert 1 <= peak <= 4


def test_wait_semantics(ws):
    recs = _array(ws, ["sub-01", "sub-02"], sleep=0.2)
    for r in recs:
        assert "step 01 has completed" in r.read_log()
        assert (ws.root / "derivatives" / r.subject / "out.txt").exists()


def test_empty_subjects_file(ws):
    path = ws.root / "subjects.txt"
    path.write_text("\n")
    with pytest.raises(SubjectsFileMissing):
        dispatch_job_array(JobArraySpec(path, "python x.py {subject}"), "local_pool", ws)


def test_missing_subjects_file(tmp_path):
    with pytest.raises(SubjectsFileMissing):
        read_subjects_file(tmp_path / "none.txt")


def test_duplicate_subject_ids(tmp_path):
    path = write_subjects_file(tmp_path / "s.txt", ["a", "b", "a"])
    with pytest.raises(ValueError):
        read_subjects_file(path)


def test_subjects_file_roundtrip(tmp_path):
    path = write_subjects_file(tmp_path / "s.txt", ["sub-01", "sub-02"])
    assert path.read_bytes() == b"sub-01\nsub-02\n"
    assert read_subjects_file(path) == ["sub-01", "sub-02"]


def test_slurm_unavailable(ws, monkeypatch):
    monkeypatch.setenv("PATH", str(ws.root))
    path = write_subjects_file(ws.root / "s.txt", ["sub-01"])
    with pytest.raises(ExecutorUnavailable):
        dispatch_job_array(JobArraySpec(path, "python x.py {subject}"), "slurm", ws)


def test_unknown_executor(ws):
    path = write_subjects_file(ws.root / "s.txt", ["sub-01"])
    with pytest.raises(ExecutorUnavailable):
        dispatch_job_array(JobArraySpec(path, "python x.py {subject}"), "pbs", ws)


def test_sbatch_template():
    spec = JobArraySpec(Path("/w/subjects.txt"), "python scripts/job.py {subject}", 4, Path("/w/logs"), "bet")
    text = render_sbatch(spec, 12, Path("/w/slurm_outputs"), {"cpus-per-task": "2"})
    lines = text.splitlines()
    assert lines[0] == "#!/bin/bash"
    assert "#SBATCH --job-name=bet" in lines
    assert "#SBATCH --array=1-12" in lines
    assert "#SBATCH --output=/w/slurm_outputs/bet-%A_%a.out" in lines
    assert "#SBATCH --cpus-per-task=2" in lines
    assert 'exec >"${LOG_DIR}/${SUB_ID}.log" 2>&1' in lines
    assert "python scripts/job.py ${SUB_ID}" in lines
    assert not any("--mem" in l for l in render_sbatch(spec, 12, Path("/o")).splitlines())


def test_slurm_submits_with_wait(ws, monkeypatch):
    fake = ws.root / "bin"
    fake.mkdir()
    sbatch = fake / "sbatch"
    sbatch.write_text(f"#!/bin/sh\necho \"$@\" > {ws.root}/sbatch_args.txt\n")
    sbatch.chmod(0o755)
    monkeypatch.setenv("PATH", f"{fake}{os.pathsep}{os.environ['PATH']}")
    path = write_subjects_file(ws.root / "s.txt", ["sub-01", "sub-02"])
    recs = dispatch_job_array(JobArraySpec(path, "python x.py {subject}", job_name="arr"), "slurm", ws)
    assert (ws.root / "sbatch_args.txt").read_text().split()[0] == "--wait"
    assert [r.subject for r in recs] == ["sub-01", "sub-02"]
    assert (ws.root / "scripts" / "arr.sh").exists()


# -- derivatives and sampling --------------------------------------------------------------

def test_check_derivatives_complete(tmp_path):
    for s in ("sub-01", "sub-02", "sub-03"):
        (tmp_path / "derivatives" / s).mkdir(parents=True)
        (tmp_path / "derivatives" / s / "anat_mni.nii").write_text("")
    assert check_derivatives(["derivatives/{subject}/anat_mni.nii"], ["sub-01", "sub-02", "sub-03"], tmp_path) == {}


def test_check_derivatives_one_missing(tmp_path):
    for s in ("sub-01", "sub-03"):
        (tmp_path / "derivatives" / s).mkdir(parents=True)
        (tmp_path / "derivatives" / s / "anat_mni.nii").write_text("")
    report = check_derivatives(["derivatives/{subject}/anat_mni.nii"], ["sub-01", "sub-02", "sub-03"], tmp_path)
    assert report == {"sub-02": ["derivatives/sub-02/anat_mni.nii"]}


def test_check_derivatives_no_subjects(tmp_path):
    assert check_derivatives(["x/{subject}"], [], tmp_path) == {}


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(present=st.sets(st.tuples(st.sampled_from(["s1", "s2", "s3", "s4"]), st.sampled_from(["a.nii", "b/c.tsv", "d.json"]))))
def test_check_derivatives_brute_force(tmp_path, present):
    root = tmp_path / "tree"
    if root.exists():
        shutil.rmtree(root)
    root.mkdir()
    for s, f in present:
        p = root / s / f
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("")
    patterns = ["{subject}/a.nii", "{subject}/b/c.tsv", "{subject}/d.json"]
    subjects = ["s1", "s2", "s3", "s4"]
    on_disk = {p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file()}
    oracle = {}
    for s in subjects:
        miss = [p.format(subject=s) for p in patterns if p.format(subject=s) not in on_disk]
        if miss:
            oracle[s] = miss
    assert check_derivatives(patterns, subjects, root) == oracle


def test_sample_full_list():
    ids = [f"s{i}" for i in range(6)]
    assert sample_subjects(ids, 6, seed=1) == ids


def test_sample_deterministic_and_ordered():
    ids = [f"sub-{i:03d}" for i in range(1, 161)]
    a, b = sample_subjects(ids, 10, 3), sample_subjects(ids, 10, 3)
    assert a == b
    assert a == sorted(a, key=ids.index)


def test_sample_golden():
    ids = [f"sub-{i:03d}" for i in range(1, 161)]
    golden = (FIXTURES / "sample_160_seed7.txt").read_text().split()
    assert sample_subjects(ids, 10, 7) == golden


def test_sample_too_large():
    with pytest.raises(SampleTooLarge):
        sample_subjects(["a", "b"], 3, 0)
