"""Test-case execution, Soft-EX result comparison and success-rate scoring."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from . import sqltext
from .domain import CaseKind, Category, SRReport, TaskInstance, TestCase, validate_task
from .sandbox import IsolationMode, Limits, Sandbox, SandboxError, Session, Status

log = logging.getLogger(__name__)


class RaggedRowsError(ValueError):
    pass


@dataclass(frozen=True)
class EvalOptions:
    abs_tol: float = 1e-6
    rel_tol: float = 1e-9
    mode: IsolationMode | None = None
    timeout_ms: int = 30000


@dataclass(frozen=True)
class MatchResult:
    matched: bool
    detail: str = ""

    def __bool__(self) -> bool:
        return self.matched


@dataclass(frozen=True)
class CaseOutcome:
    kind: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "passed": self.passed, "detail": self.detail}


@dataclass(frozen=True)
class TaskOutcome:
    task_id: str
    per_case: tuple[CaseOutcome, ...]
    category: Category | None = None

    @property
    def passed(self) -> bool:
        return bool(self.per_case) and all(c.passed for c in self.per_case)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "category": self.category.value if self.category else None,
            "passed": self.passed,
            "per_case": [c.to_dict() for c in self.per_case],
        }


# -- Soft EX --------------------------------------------------------------------

def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def cells_equal(a: Any, b: Any, abs_tol: float = 1e-6, rel_tol: float = 1e-9) -> bool:
    if a is None or b is None:
        return a is None and b is None
    if _is_num(a) and _is_num(b):
        if a == b:
            return True
        fa, fb = float(a), float(b)
        if math.isnan(fa) or math.isnan(fb):
            return math.isnan(fa) and math.isnan(fb)
        diff = abs(fa - fb)
        return diff <= abs_tol or diff <= rel_tol * max(abs(fa), abs(fb))
    if isinstance(a, bool) != isinstance(b, bool) or _is_num(a) != _is_num(b):
        return False
    return a == b


def _width(rows: Sequence[Sequence], name: str) -> int | None:
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise RaggedRowsError(f"{name} rows have differing lengths {sorted(widths)}")
    return widths.pop() if widths else None


def _rows_equal(p, r, abs_tol, rel_tol) -> bool:
    return all(cells_equal(a, b, abs_tol, rel_tol) for a, b in zip(p, r))


def _exact_key(row) -> tuple:
    # type tag keeps 1 and '1' (and True and 1) apart
    return tuple((type(v).__name__ if not _is_num(v) else "num", v) for v in row)


def _bucket_key(row) -> tuple:
    return tuple(("num",) if _is_num(v) else (type(v).__name__, v) for v in row)


def _bipartite_match(pred: list, ref: list, abs_tol: float, rel_tol: float) -> int | None:
    """Index of a predicted row left unmatched by a maximum matching, or None."""
    adj = [[j for j, r in enumerate(ref) if _rows_equal(p, r, abs_tol, rel_tol)] for p in pred]
    owner: list[int | None] = [None] * len(ref)

    def augment(i: int, seen: set[int]) -> bool:
        for j in adj[i]:
            if j in seen:
                continue
            seen.add(j)
            if owner[j] is None or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    for i in sorted(range(len(pred)), key=lambda k: len(adj[k])):
        if not augment(i, set()):
            return i
    return None


def soft_result_match(
    pred_rows: Sequence[Sequence],
    ref_rows: Sequence[Sequence],
    ordered: bool = False,
    abs_tol: float = 1e-6,
    rel_tol: float = 1e-9,
) -> MatchResult:
    """Compare two result sets as multisets (or positionally when ``ordered``).

    Numbers match within ``abs_tol`` or ``rel_tol``, text must match exactly
    and NULL only equals NULL.
    """
    wp = _width(pred_rows, "predicted")
    wr = _width(ref_rows, "reference")
    if len(pred_rows) != len(ref_rows):
        return MatchResult(False, f"row count {len(pred_rows)} != {len(ref_rows)}")
    if not pred_rows:
        return MatchResult(True)
    if wp != wr:
        return MatchResult(False, f"column count {wp} != {wr}")
    if ordered:
        for i, (p, r) in enumerate(zip(pred_rows, ref_rows)):
            if not _rows_equal(p, r, abs_tol, rel_tol):
                return MatchResult(False, f"row {i} differs: {list(p)!r} vs {list(r)!r}")
        return MatchResult(True)
    if Counter(map(_exact_key, pred_rows)) == Counter(map(_exact_key, ref_rows)):
        return MatchResult(True)
    pb: dict[tuple, list] = defaultdict(list)
    rb: dict[tuple, list] = defaultdict(list)
    for row in pred_rows:
        pb[_bucket_key(row)].append(row)
    for row in ref_rows:
        rb[_bucket_key(row)].append(row)
    for key, prows in pb.items():
        rrows = rb.get(key, [])
        if len(prows) != len(rrows):
            return MatchResult(False, f"unmatched predicted row {list(prows[0])!r}")
        miss = _bipartite_match(prows, rrows, abs_tol, rel_tol)
        if miss is not None:
            return MatchResult(False, f"unmatched predicted row {list(prows[miss])!r}")
    if any(len(rrows) and key not in pb for key, rrows in rb.items()):
        return MatchResult(False, "reference rows missing from prediction")
    return MatchResult(True)


# -- test cases -----------------------------------------------------------------

def _pattern_regex(pattern: str) -> re.Pattern:
    body = re.escape(pattern)
    if re.match(r"\w", pattern):
        body = r"(?<![\w])" + body
    if re.search(r"\w$", pattern):
        body += r"(?![\w])"
    return re.compile(body)


def contains_pattern(sql_text: str, pattern: str) -> bool:
    """Whole-token containment of ``pattern`` in comment-stripped, case-folded SQL."""
    norm = sqltext.normalize(pattern)
    return bool(norm) and _pattern_regex(norm).search(sqltext.normalize(sql_text)) is not None


def _run_all(session: Session, stmts: Sequence[str], timeout_ms: int):
    """Execute statements in order. Returns (error_detail, last_rows)."""
    last_rows = None
    limits = Limits(row_cap=None, char_cap=None, timeout_ms=timeout_ms)
    for i, stmt in enumerate(stmts, 1):
        obs = session.execute(stmt, limits)
        if not obs.ok:
            if session.poisoned:
                return "environment", None
            return f"statement {i}: {obs.status.value}: {obs.error_text}", None
        if obs.status is Status.ROWS:
            last_rows = obs.rows
    return None, last_rows


def run_test_case(
    session: Session,
    case: TestCase,
    predicted_sql: Sequence[str],
    requires_order: bool = False,
    options: EvalOptions = EvalOptions(),
) -> CaseOutcome:
    kind = case.kind.value
    if case.kind in (CaseKind.MUST_CONTAIN, CaseKind.MUST_NOT_CONTAIN):
        text = "\n".join(predicted_sql)
        hits = [p for p in case.patterns or () if contains_pattern(text, p)]
        if case.kind is CaseKind.MUST_CONTAIN:
            missing = [p for p in case.patterns or () if p not in hits]
            return CaseOutcome(kind, not missing, f"missing {missing}" if missing else "")
        return CaseOutcome(kind, not hits, f"forbidden {hits}" if hits else "")

    if session.poisoned:
        return CaseOutcome(kind, False, "environment")
    err, pred_rows = _run_all(session, predicted_sql, options.timeout_ms)
    if err is not None:
        return CaseOutcome(kind, False, err if err == "environment" else f"predicted {err}")

    if case.kind is CaseKind.EXEC_OK:
        return CaseOutcome(kind, True)

    if case.kind is CaseKind.RESULT_MATCH:
        if pred_rows is None:
            return CaseOutcome(kind, False, "predicted SQL produced no result set")
        session.reset()
        err, ref_rows = _run_all(session, case.reference_sql or (), options.timeout_ms)
        if err is not None or ref_rows is None:
            return CaseOutcome(kind, False, f"reference {err or 'produced no result set'}")
        try:
            m = soft_result_match(pred_rows, ref_rows, requires_order, options.abs_tol, options.rel_tol)
        except RaggedRowsError as exc:
            return CaseOutcome(kind, False, str(exc))
        return CaseOutcome(kind, m.matched, m.detail)

    # StateProbe
    err, probe_rows = _run_all(session, [case.probe_sql], options.timeout_ms)
    if err is not None or probe_rows is None:
        return CaseOutcome(kind, False, f"probe {err or 'produced no result set'}")
    if case.expected_rows is not None:
        m = soft_result_match(probe_rows, case.expected_rows, case.ordered, options.abs_tol, options.rel_tol)
        return CaseOutcome(kind, m.matched, m.detail)
    if not probe_rows or not probe_rows[0]:
        return CaseOutcome(kind, False, "probe returned no scalar")
    got = probe_rows[0][0]
    ok = cells_equal(got, case.expected_scalar, options.abs_tol, options.rel_tol)
    return CaseOutcome(kind, ok, "" if ok else f"probe scalar {got!r} != {case.expected_scalar!r}")


def _as_statements(predicted_sql: str | Sequence[str]) -> list[str]:
    if isinstance(predicted_sql, str):
        return sqltext.split_statements(predicted_sql)
    return [s for s in predicted_sql if s.strip()]


def evaluate_task(
    sandbox: Sandbox,
    task: TaskInstance,
    predicted_sql: str | Sequence[str],
    options: EvalOptions = EvalOptions(),
    session: Session | None = None,
) -> TaskOutcome:
    """Run every test case of ``task`` against ``predicted_sql``.

    A fresh session is opened unless ``session`` is given; in that case the
    first case sees whatever state the caller left behind (the session is
    not closed here).
    """
    stmts = _as_statements(predicted_sql)
    if not stmts:
        raise ValueError("predicted_sql must contain at least one statement")
    own = session is None
    if own:
        try:
            session = sandbox.open_session(task, options.mode)
        except (SandboxError, OSError) as exc:
            return TaskOutcome(task.task_id, (CaseOutcome("Setup", False, f"setup: {exc}"),), task.category)
    outcomes = []
    dirty = False
    try:
        for case in task.eval_script.test_cases:
            if case.executes_sql:
                if dirty:
                    session.reset()
                dirty = True
            outcomes.append(run_test_case(session, case, stmts, task.eval_script.requires_order, options))
    except SandboxError as exc:
        outcomes.append(CaseOutcome("Setup", False, f"environment: {exc}"))
    finally:
        if own:
            session.close()
    return TaskOutcome(task.task_id, tuple(outcomes), task.category)


@dataclass(frozen=True)
class RedTeamResult:
    task_id: str
    solution_passes: bool
    issue_fails: bool
    reason: str = ""

    @property
    def valid(self) -> bool:
        return self.solution_passes and self.issue_fails and not self.reason

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "solution_passes": self.solution_passes,
                "issue_fails": self.issue_fails, "valid": self.valid, "reason": self.reason}


def red_team_check(sandbox: Sandbox, task: TaskInstance, options: EvalOptions = EvalOptions()) -> RedTeamResult:
    """Check that the eval script accepts the solution and rejects the issue SQL."""
    problems = validate_task(task)
    if problems:
        return RedTeamResult(task.task_id, False, False, "invalid task: " + "; ".join(problems))
    sol = evaluate_task(sandbox, task, task.solution_sql, options)
    iss = evaluate_task(sandbox, task, task.issue_sql, options)
    setup = [c.detail for o in (sol, iss) for c in o.per_case if c.kind == "Setup"]
    if setup:
        return RedTeamResult(task.task_id, sol.passed, not iss.passed, setup[0])
    reason = ""
    if not sol.passed:
        reason = "solution rejected"
    elif iss.passed:
        reason = "issue not caught"
    return RedTeamResult(task.task_id, sol.passed, not iss.passed, reason)


@dataclass
class DatasetEvaluation:
    report: SRReport
    outcomes: list[TaskOutcome] = field(default_factory=list)


def evaluate_dataset(
    sandbox: Sandbox,
    tasks: Sequence[TaskInstance],
    predictions: Mapping[str, str | Sequence[str]],
    options: EvalOptions = EvalOptions(),
    workers: int = 1,
) -> DatasetEvaluation:
    """Score predictions keyed by task id; missing predictions count as failures."""
    ids = [t.task_id for t in tasks]
    dupes = sorted(k for k, n in Counter(ids).items() if n > 1)
    if dupes:
        raise ValueError(f"duplicate task_id(s): {', '.join(dupes)}")
    if not tasks:
        raise ValueError("no tasks to evaluate")

    def one(task: TaskInstance) -> TaskOutcome:
        pred = predictions.get(task.task_id)
        if pred is None or not _as_statements(pred):
            return TaskOutcome(task.task_id, (CaseOutcome("Prediction", False, "missing prediction"),),
                               task.category)
        return evaluate_task(sandbox, task, pred, options)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, tasks))
    else:
        outcomes = [one(t) for t in tasks]
    per_cat: dict[Category, list[int]] = {}
    for o in outcomes:
        tot = per_cat.setdefault(o.category, [0, 0])
        tot[0] += 1
        tot[1] += int(o.passed)
    report = SRReport(
        n_total=len(outcomes),
        n_passed=sum(o.passed for o in outcomes),
        per_category={c: (t, p) for c, (t, p) in per_cat.items()},
    )
    return DatasetEvaluation(report, outcomes)
