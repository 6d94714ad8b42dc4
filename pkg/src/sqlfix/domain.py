"""Shared data model: tasks, evaluation scripts, trajectories and reports.

All types are frozen dataclasses built from tuples so they can be handed
to worker threads without copying. ``to_dict``/``from_dict`` define the
on-disk JSON schema; field names match the attribute names exactly.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any

from . import sqltext


class TaskFormatError(ValueError):
    """A task file could not be parsed into a TaskInstance."""


class Category(str, Enum):
    QUERY_LIKE = "QueryLike"
    MANAGEMENT = "Management"
    PERSONALIZATION = "Personalization"


class Dialect(str, Enum):
    EMBEDDED_REF = "EmbeddedRef"
    POSTGRES_LIKE = "PostgresLike"
    MYSQL_LIKE = "MySQLLike"
    SERVER_LIKE = "ServerLike"
    ORACLE_LIKE = "OracleLike"


class CaseKind(str, Enum):
    RESULT_MATCH = "ResultMatch"
    STATE_PROBE = "StateProbe"
    MUST_CONTAIN = "MustContain"
    MUST_NOT_CONTAIN = "MustNotContain"
    EXEC_OK = "ExecOk"


# Action sentinels. DONE ends an episode; MALFORMED marks a turn consumed
# by unparseable model output (never executed).
DONE = "[DONE]"
MALFORMED = "[MALFORMED]"


def _rows(value) -> tuple[tuple, ...] | None:
    if value is None:
        return None
    return tuple(tuple(r) for r in value)


@dataclass(frozen=True)
class TestCase:
    kind: CaseKind
    reference_sql: tuple[str, ...] | None = None
    probe_sql: str | None = None
    expected_rows: tuple[tuple, ...] | None = None
    expected_scalar: Any = None
    ordered: bool = False
    patterns: tuple[str, ...] | None = None

    __test__ = False  # keep pytest from collecting this class

    def payload_fields(self) -> set[str]:
        populated = set()
        if self.reference_sql is not None:
            populated.add("reference_sql")
        if self.probe_sql is not None:
            populated.add("probe_sql")
        if self.expected_rows is not None:
            populated.add("expected_rows")
        if self.expected_scalar is not None:
            populated.add("expected_scalar")
        if self.patterns is not None:
            populated.add("patterns")
        return populated

    @property
    def executes_sql(self) -> bool:
        return self.kind not in (CaseKind.MUST_CONTAIN, CaseKind.MUST_NOT_CONTAIN)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.reference_sql is not None:
            d["reference_sql"] = list(self.reference_sql)
        if self.probe_sql is not None:
            d["probe_sql"] = self.probe_sql
        if self.expected_rows is not None:
            d["expected_rows"] = [list(r) for r in self.expected_rows]
        if self.expected_scalar is not None:
            d["expected_scalar"] = self.expected_scalar
        if self.ordered:
            d["ordered"] = True
        if self.patterns is not None:
            d["patterns"] = list(self.patterns)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TestCase":
        try:
            kind = CaseKind(d["kind"])
        except (KeyError, ValueError) as exc:
            raise TaskFormatError(f"test case kind: {exc}") from None
        ref = d.get("reference_sql")
        if ref is not None:
            ref = tuple(_statement_list("reference_sql", ref))
        probe = d.get("probe_sql")
        if probe is not None:
            _single_statement("probe_sql", probe)
        patterns = d.get("patterns")
        return cls(
            kind=kind,
            reference_sql=ref,
            probe_sql=probe,
            expected_rows=_rows(d.get("expected_rows")),
            expected_scalar=d.get("expected_scalar"),
            ordered=bool(d.get("ordered", False)),
            patterns=tuple(patterns) if patterns is not None else None,
        )


@dataclass(frozen=True)
class EvalScript:
    test_cases: tuple[TestCase, ...]
    requires_order: bool = False

    def to_dict(self) -> dict:
        return {
            "test_cases": [c.to_dict() for c in self.test_cases],
            "requires_order": self.requires_order,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalScript":
        cases = d.get("test_cases")
        if not isinstance(cases, list):
            raise TaskFormatError("eval_script.test_cases must be a list")
        return cls(
            test_cases=tuple(TestCase.from_dict(c) for c in cases),
            requires_order=bool(d.get("requires_order", False)),
        )


def _single_statement(name: str, sql: Any) -> str:
    if not isinstance(sql, str):
        raise TaskFormatError(f"{name}: expected SQL text, got {type(sql).__name__}")
    if sqltext.count_statements(sql) > 1:
        raise TaskFormatError(f"{name}: one statement per entry; split multi-statement text into a list")
    return sql


def _statement_list(name: str, value: Any) -> list[str]:
    if isinstance(value, str) or not isinstance(value, list):
        raise TaskFormatError(f"{name}: expected a list of SQL statements")
    return [_single_statement(f"{name}[{i}]", s) for i, s in enumerate(value)]


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    dialect: Dialect
    db_ref: str
    category: Category
    user_query: str
    issue_sql: tuple[str, ...]
    solution_sql: tuple[str, ...]
    eval_script: EvalScript
    preprocess_sql: tuple[str, ...] = ()
    cleanup_sql: tuple[str, ...] = ()
    issue_reason: str | None = None
    knowledge_tags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "dialect": self.dialect.value,
            "db_ref": self.db_ref,
            "category": self.category.value,
            "user_query": self.user_query,
            "issue_sql": list(self.issue_sql),
            "solution_sql": list(self.solution_sql),
            "preprocess_sql": list(self.preprocess_sql),
            "cleanup_sql": list(self.cleanup_sql),
            "eval_script": self.eval_script.to_dict(),
            "issue_reason": self.issue_reason,
            "knowledge_tags": list(self.knowledge_tags),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskInstance":
        missing = [k for k in ("task_id", "dialect", "db_ref", "category", "user_query",
                               "issue_sql", "solution_sql", "eval_script") if k not in d]
        if missing:
            raise TaskFormatError(f"missing fields: {', '.join(missing)}")
        try:
            dialect = Dialect(d["dialect"])
            category = Category(d["category"])
        except ValueError as exc:
            raise TaskFormatError(str(exc)) from None
        return cls(
            task_id=str(d["task_id"]),
            dialect=dialect,
            db_ref=str(d["db_ref"]),
            category=category,
            user_query=d["user_query"],
            issue_sql=tuple(_statement_list("issue_sql", d["issue_sql"])),
            solution_sql=tuple(_statement_list("solution_sql", d["solution_sql"])),
            preprocess_sql=tuple(_statement_list("preprocess_sql", d.get("preprocess_sql", []))),
            cleanup_sql=tuple(_statement_list("cleanup_sql", d.get("cleanup_sql", []))),
            eval_script=EvalScript.from_dict(d["eval_script"]),
            issue_reason=d.get("issue_reason"),
            knowledge_tags=tuple(d.get("knowledge_tags", [])),
        )


@dataclass(frozen=True)
class Step:
    thought: str
    action: str
    observation: str = ""

    def __post_init__(self):
        if not self.thought or not self.action:
            raise ValueError("step thought and action must be non-empty")
        if not self.observation and self.action != DONE:
            raise ValueError("only a DONE step may have an empty observation")

    @property
    def is_done(self) -> bool:
        return self.action == DONE

    def to_dict(self) -> dict:
        return {"thought": self.thought, "action": self.action, "observation": self.observation}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Step":
        return cls(d["thought"], d["action"], d.get("observation", ""))


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    steps: tuple[Step, ...] = ()
    final_sql: str | None = None
    passed: bool | None = None
    strategy: str = "Episode"
    tries_used: int = 1
    tokens_in: int = 0
    tokens_out: int = 0
    wall_ms: int = 0
    failure: str | None = None

    def __post_init__(self):
        for s in self.steps[:-1]:
            if s.is_done:
                raise ValueError("a DONE step may only appear last")
        if self.passed is not None and self.final_sql is None:
            raise ValueError("passed may only be set together with final_sql")
        if self.tries_used < 1:
            raise ValueError("tries_used must be positive")
        if min(self.tokens_in, self.tokens_out, self.wall_ms) < 0:
            raise ValueError("counts must be nonnegative")

    def to_dict(self) -> dict:
        d = {
            "task_id": self.task_id,
            "strategy": self.strategy,
            "tries_used": self.tries_used,
            "steps": [s.to_dict() for s in self.steps],
            "final_sql": self.final_sql,
            "passed": self.passed,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "wall_ms": self.wall_ms,
        }
        if self.failure is not None:
            d["failure"] = self.failure
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trajectory":
        return cls(
            task_id=d["task_id"],
            steps=tuple(Step.from_dict(s) for s in d.get("steps", [])),
            final_sql=d.get("final_sql"),
            passed=d.get("passed"),
            strategy=d.get("strategy", "Episode"),
            tries_used=int(d.get("tries_used", 1)),
            tokens_in=int(d.get("tokens_in", 0)),
            tokens_out=int(d.get("tokens_out", 0)),
            wall_ms=int(d.get("wall_ms", 0)),
            failure=d.get("failure"),
        )


@dataclass(frozen=True)
class FunctionalPlan:
    steps: tuple[str, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a plan needs at least one step")
        if any(not s.strip() for s in self.steps):
            raise ValueError("plan steps must be non-empty")

    def render(self) -> str:
        return "\n".join(f"{i}. {s}" for i, s in enumerate(self.steps, 1))


@dataclass(frozen=True)
class SRReport:
    n_total: int
    n_passed: int
    per_category: Mapping[Category, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_total < 1 or not 0 <= self.n_passed <= self.n_total:
            raise ValueError("need 0 <= n_passed <= n_total and n_total >= 1")
        if self.per_category and sum(t for t, _ in self.per_category.values()) != self.n_total:
            raise ValueError("per-category totals must sum to n_total")

    @property
    def sr(self) -> Fraction:
        return Fraction(self.n_passed, self.n_total)

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_passed": self.n_passed,
            "sr": float(self.sr),
            "sr_percent": format_percent(self.sr),
            "per_category": {
                c.value: {"n_total": t, "n_passed": p, "sr_percent": format_percent(Fraction(p, t))}
                for c, (t, p) in sorted(self.per_category.items(), key=lambda kv: kv[0].value)
            },
        }


def success_rate(outcomes: Sequence[bool]) -> Fraction:
    """Exact fraction of passing outcomes."""
    if len(outcomes) == 0:
        raise ValueError("success_rate of an empty outcome list is undefined")
    return Fraction(sum(1 for o in outcomes if o), len(outcomes))


def format_percent(fraction: Fraction) -> str:
    """Percent with two decimals, rounding half up: 206/530 -> '38.87'."""
    value = Decimal(fraction.numerator * 100) / Decimal(fraction.denominator)
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


_KIND_PAYLOAD = {
    CaseKind.RESULT_MATCH: {"reference_sql"},
    CaseKind.STATE_PROBE: {"probe_sql"},
    CaseKind.MUST_CONTAIN: {"patterns"},
    CaseKind.MUST_NOT_CONTAIN: {"patterns"},
    CaseKind.EXEC_OK: set(),
}


def validate_task(task: TaskInstance) -> list[str]:
    """Return one message per violated invariant; empty means valid."""
    problems = []
    for name in ("issue_sql", "solution_sql"):
        stmts = getattr(task, name)
        if not stmts:
            problems.append(f"{name}: must be non-empty")
        elif any(not s.strip() for s in stmts):
            problems.append(f"{name}: statements must be non-blank")
    for name in ("preprocess_sql", "cleanup_sql"):
        if any(not s.strip() for s in getattr(task, name)):
            problems.append(f"{name}: statements must be non-blank")
    if not task.task_id:
        problems.append("task_id: must be non-empty")
    if not task.user_query.strip():
        problems.append("user_query: must be non-empty")
    script = task.eval_script
    if not script.test_cases:
        problems.append("eval_script: needs ≥1 test case")
    for i, case in enumerate(script.test_cases):
        where = f"eval_script.test_cases[{i}]"
        required = _KIND_PAYLOAD[case.kind]
        populated = case.payload_fields()
        if case.kind is CaseKind.STATE_PROBE:
            outcome = populated & {"expected_rows", "expected_scalar"}
            if len(outcome) != 1:
                problems.append(f"{where}: StateProbe needs exactly one of expected_rows/expected_scalar")
            populated -= outcome
        if populated != required:
            problems.append(f"{where}: {case.kind.value} payload must be exactly {sorted(required) or 'empty'}")
        if case.patterns is not None and (not case.patterns or any(not p.strip() for p in case.patterns)):
            problems.append(f"{where}: patterns must be non-empty")
        if case.reference_sql is not None and (not case.reference_sql or any(not s.strip() for s in case.reference_sql)):
            problems.append(f"{where}: reference_sql must be non-empty")
        if case.ordered and case.kind is not CaseKind.STATE_PROBE:
            problems.append(f"{where}: 'ordered' only applies to StateProbe")
    if script.requires_order:
        refs = [s for c in script.test_cases if c.kind is CaseKind.RESULT_MATCH
                for s in (c.reference_sql or ())[-1:]]
        if not any(sqltext.has_top_level_order_by(s) for s in refs):
            problems.append("eval_script: requires_order needs a reference query with a top-level ORDER BY")
    return problems


def validate_dataset(tasks: Iterable[TaskInstance]) -> dict[str, list[str]]:
    """Per-task violations plus duplicate-id detection (keyed by task_id)."""
    seen: set[str] = set()
    report: dict[str, list[str]] = {}
    for t in tasks:
        problems = validate_task(t)
        if t.task_id in seen:
            problems.append("task_id: must be unique within a dataset")
        seen.add(t.task_id)
        if problems:
            report.setdefault(t.task_id, []).extend(problems)
    return report


def infer_category(issue_sql: Sequence[str], solution_sql: Sequence[str], script: EvalScript) -> Category:
    if any(c.kind in (CaseKind.MUST_CONTAIN, CaseKind.MUST_NOT_CONTAIN) for c in script.test_cases):
        return Category.PERSONALIZATION
    read_only = {"select", "with", "values", "explain", "show", "pragma"}
    if all(sqltext.first_keyword(s) in read_only for s in (*issue_sql, *solution_sql)):
        return Category.QUERY_LIKE
    return Category.MANAGEMENT


# -- file IO -----------------------------------------------------------------

def load_tasks(path: str | Path) -> list[TaskInstance]:
    """Load tasks from a task file, a manifest, a JSONL file, or a directory.

    A directory contributes every ``*.json``/``*.jsonl`` file directly inside
    it, in name order. A JSON file holds a single task object, a list of
    tasks, or a manifest ``{"tasks": [...]}`` whose entries are task objects
    or paths relative to the manifest.
    """
    path = Path(path)
    if path.is_dir():
        tasks = []
        for p in sorted(path.iterdir()):
            if p.suffix in (".json", ".jsonl") and p.is_file():
                tasks.extend(load_tasks(p))
        return tasks
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        return [_parse(json.loads(line), path) for line in text.splitlines() if line.strip()]
    data = json.loads(text)
    if isinstance(data, dict) and "tasks" in data:
        out = []
        for entry in data["tasks"]:
            if isinstance(entry, str):
                out.extend(load_tasks(path.parent / entry))
            else:
                out.append(_parse(entry, path))
        return out
    if isinstance(data, list):
        return [_parse(d, path) for d in data]
    return [_parse(data, path)]


def _parse(d: Any, source: Path) -> TaskInstance:
    if not isinstance(d, dict):
        raise TaskFormatError(f"{source}: task entries must be JSON objects")
    try:
        return TaskInstance.from_dict(d)
    except TaskFormatError as exc:
        raise TaskFormatError(f"{source}: {d.get('task_id', '?')}: {exc}") from None


def dump_task(task: TaskInstance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(task.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def write_jsonl(path: str | Path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
