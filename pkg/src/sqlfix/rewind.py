"""Gym-instance generation by running the debugging process backwards.

Starting from SQL found in forum posts, each candidate is adapted to a
training database and kept only if it runs and returns something. A
generation backend then breaks it (issue SQL, reason, eval script), writes
the user's question, and every instance is admitted only after the
mechanical red-team check passes.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import sqltext
from .domain import (
    Dialect,
    EvalScript,
    TaskFormatError,
    TaskInstance,
    infer_category,
    read_jsonl,
    write_jsonl,
)
from .evaluator import EvalOptions, red_team_check
from .gateway import Backend, CompletionRequest, GatewayError, ParseError, extract_sql_fence
from .prompts import prompt_set, render_sql_list
from .sandbox import DEFAULT_LIMITS, Sandbox, Status

log = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 3
GENERATION_TEMPERATURE = 0.2


class GenerationRejected(Exception):
    def __init__(self, stage: str, reason: str, iterations: int = 0):
        super().__init__(f"{stage}: {reason}")
        self.stage = stage
        self.reason = reason
        self.iterations = iterations


@dataclass(frozen=True)
class CorpusPost:
    source_id: str
    title: str
    body: str

    @classmethod
    def from_dict(cls, d) -> "CorpusPost":
        return cls(str(d["source_id"]), d.get("title", ""), d.get("body", ""))


def load_corpus(path: str | Path) -> list[CorpusPost]:
    return [CorpusPost.from_dict(r) for r in read_jsonl(path)]


@dataclass(frozen=True)
class ExclusionList:
    """Identifiers barred from generation; matching is exact.

    In a list file, one identifier per line; ``db:<name>`` marks a database,
    anything else a source post. ``#`` starts a comment.
    """

    sources: frozenset[str] = frozenset()
    databases: frozenset[str] = frozenset()

    @classmethod
    def from_file(cls, path: str | Path) -> "ExclusionList":
        sources, dbs = set(), set()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            item = line.split("#", 1)[0].strip()
            if not item:
                continue
            if item.startswith("db:"):
                dbs.add(item[3:])
            else:
                sources.add(item)
        return cls(frozenset(sources), frozenset(dbs))

    def excludes_source(self, source_id: str) -> bool:
        return source_id in self.sources

    def excludes_db(self, db_ref: str) -> bool:
        return db_ref in self.databases


# -- extraction -----------------------------------------------------------------------

_FENCED = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[^\n]*\n(.*?)```", re.DOTALL)
_SQL_START = re.compile(
    r"^\s*(select|with|insert|update|delete|create|alter|drop|merge|replace|truncate)\b", re.IGNORECASE
)
_SQL_LANGS = {"", "sql", "postgresql", "postgres", "psql", "plpgsql", "mysql", "sqlite", "tsql", "plsql"}


def extract_sql(text: str) -> list[str]:
    """SQL spans from fenced blocks and four-space indented blocks.

    A span is kept when it starts with a SQL keyword; duplicates are dropped
    keeping first appearance.
    """
    found: list[str] = []
    for m in _FENCED.finditer(text):
        if m.group(1).lower() in _SQL_LANGS:
            found.append(m.group(2))
    rest = _FENCED.sub("", text)
    block: list[str] = []
    for line in rest.splitlines() + ["end"]:
        if line.startswith("    ") or line.startswith("\t") or (block and not line.strip()):
            block.append(line[4:] if line.startswith("    ") else line.lstrip("\t"))
            continue
        if block:
            found.append("\n".join(block))
        block = []
    out = []
    for span in found:
        span = span.strip()
        if span and _SQL_START.match(span) and span not in out:
            out.append(span)
    return out


# -- stage helpers --------------------------------------------------------------------

def _ask(backend: Backend, prompt: str, role: str, **meta) -> str:
    req = CompletionRequest.user(prompt, temperature=GENERATION_TEMPERATURE,
                                 backend_id=backend.backend_id, metadata={"role": role, **meta})
    return backend.complete(req).text


def _verdict(text: str) -> tuple[bool, str]:
    lines = text.strip().splitlines() or [""]
    head = lines[0].strip().upper()
    ok = head.startswith("YES")
    explanation = " ".join(l.strip() for l in lines[1:]).strip() or head
    return ok, explanation


def _statements(value, name: str) -> tuple[str, ...]:
    if isinstance(value, str):
        stmts = sqltext.split_statements(value)
    elif isinstance(value, list) and all(isinstance(s, str) for s in value):
        stmts = [s for v in value for s in sqltext.split_statements(v)]
    else:
        raise TaskFormatError(f"{name}: expected SQL text or a list of statements")
    if not stmts:
        raise TaskFormatError(f"{name}: empty")
    return tuple(stmts)


_JSON_FENCE = re.compile(r"```[ \t]*json[^\n]*\n(.*?)```", re.DOTALL | re.IGNORECASE)


def _parse_issue(text: str) -> tuple[tuple[str, ...], str, EvalScript]:
    m = _JSON_FENCE.search(text)
    body = m.group(1) if m else text
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ParseError(f"issue proposal is not JSON: {exc}", text) from None
    if not isinstance(data, dict):
        raise ParseError("issue proposal must be a JSON object", text)
    try:
        issue_sql = _statements(data.get("issue_sql"), "issue_sql")
        reason = str(data.get("issue_reason") or "").strip()
        script = EvalScript.from_dict(data.get("eval_script") or {})
    except (TaskFormatError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"issue proposal malformed: {exc}", text) from None
    if not reason:
        raise ParseError("issue proposal lacks issue_reason", text)
    return issue_sql, reason, script


@dataclass(frozen=True)
class MinedSolution:
    source_id: str
    db_ref: str
    raw_sql: str
    solution_sql: tuple[str, ...]


@dataclass(frozen=True)
class Reject:
    stage: str
    source_id: str
    db_ref: str
    reason: str


def _non_null_result(sandbox: Sandbox, dialect: Dialect, db_ref: str, stmts: Sequence[str]) -> str:
    """Empty string when the statements pass the execution gate, else a reason.

    Queries must return at least one row with a non-null cell in the first
    row; data changes must touch at least one row; DDL only has to succeed.
    """
    with sandbox.open_database(dialect, db_ref, task_id="mine") as session:
        obs = None
        for s in stmts:
            obs = session.execute(s, DEFAULT_LIMITS)
            if not obs.ok:
                return f"exec error: {obs.error_text}"
    if obs.status is Status.ROWS:
        if not obs.rows or all(v is None for v in obs.rows[0]):
            return "null result"
    elif obs.affected_count == 0:
        return "null result"
    return ""


def verify_candidate(
    raw_sql: str,
    source_id: str,
    db_ref: str,
    sandbox: Sandbox,
    backend: Backend,
    dialect: Dialect = Dialect.EMBEDDED_REF,
    bundle: str = "default",
) -> MinedSolution | Reject:
    """Adapt one extracted span to ``db_ref`` and apply the execution gate."""
    with sandbox.open_database(dialect, db_ref, task_id="adapt") as session:
        schema = session.schema_ddl()
    prompt = prompt_set(bundle).render("adapt", db_id=db_ref, SCHEMA=schema, SQL=raw_sql)
    try:
        adapted = extract_sql_fence(_ask(backend, prompt, "adapt", source_id=source_id, db=db_ref))
    except ParseError:
        return Reject("mine", source_id, db_ref, "adaptation had no fenced SQL")
    stmts = tuple(sqltext.split_statements(adapted))
    if not stmts:
        return Reject("mine", source_id, db_ref, "adaptation was empty")
    reason = _non_null_result(sandbox, dialect, db_ref, stmts)
    if reason:
        return Reject("mine", source_id, db_ref, reason)
    return MinedSolution(source_id, db_ref, raw_sql, stmts)


@dataclass
class MiningResult:
    accepted: list[MinedSolution] = field(default_factory=list)
    rejected: list[Reject] = field(default_factory=list)


def mine_solution_sql(
    corpus: Iterable[CorpusPost],
    db_ref: str,
    sandbox: Sandbox,
    backend: Backend,
    dialect: Dialect = Dialect.EMBEDDED_REF,
    bundle: str = "default",
) -> MiningResult:
    result = MiningResult()
    for post in corpus:
        for raw in extract_sql(post.body):
            got = verify_candidate(raw, post.source_id, db_ref, sandbox, backend, dialect, bundle)
            (result.rejected if isinstance(got, Reject) else result.accepted).append(got)
    return result


@dataclass(frozen=True)
class IssueProposal:
    issue_sql: tuple[str, ...]
    issue_reason: str
    eval_script: EvalScript
    iterations: int


def _draft_task(task_id: str, dialect: Dialect, db_ref: str, solution: Sequence[str],
                issue_sql, reason, script, user_query="(pending)") -> TaskInstance:
    return TaskInstance(
        task_id=task_id, dialect=dialect, db_ref=db_ref,
        category=infer_category(issue_sql, solution, script),
        user_query=user_query, issue_sql=tuple(issue_sql), solution_sql=tuple(solution),
        eval_script=script, issue_reason=reason,
    )


def synthesize_issue(
    solution_sql: Sequence[str],
    db_ref: str,
    sandbox: Sandbox,
    backend: Backend,
    max_iter: int = DEFAULT_MAX_ITER,
    dialect: Dialect = Dialect.EMBEDDED_REF,
    bundle: str = "default",
    options: EvalOptions = EvalOptions(),
) -> IssueProposal:
    """Ask for a broken variant plus tests until one is coherent and red-team valid.

    The backend's coherence verdict is advisory and checked first; the
    mechanical red-team check decides.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be positive")
    prompts = prompt_set(bundle)
    with sandbox.open_database(dialect, db_ref, task_id="issue") as session:
        schema = session.schema_ddl()
    feedback = ""
    reason = "no proposal"
    for i in range(1, max_iter + 1):
        text = _ask(backend, prompts.render("issue", db_id=db_ref, SCHEMA=schema,
                                            SOLUTION_SQL=render_sql_list(solution_sql), feedback=feedback),
                    "issue", db=db_ref, iteration=i)
        try:
            issue_sql, issue_reason, script = _parse_issue(text)
        except ParseError as exc:
            reason = str(exc)
        else:
            draft = _draft_task(f"draft-{db_ref}", dialect, db_ref, solution_sql, issue_sql, issue_reason, script)
            verdict, why = _verdict(_ask(backend, prompts.render(
                "coherence", ISSUE_REASON=issue_reason, ISSUE_SQL=render_sql_list(issue_sql),
                SOLUTION_SQL=render_sql_list(solution_sql), EVAL_SCRIPT=json.dumps(script.to_dict()),
            ), "coherence", db=db_ref, iteration=i))
            if not verdict:
                reason = f"incoherent: {why}"
            else:
                check = red_team_check(sandbox, draft, options)
                if check.valid:
                    return IssueProposal(tuple(issue_sql), issue_reason, script, i)
                reason = check.reason
        feedback = f"\n## Feedback on the previous attempt\n{reason}\n"
    raise GenerationRejected("issue", reason, max_iter)


def generate_user_query(
    task: TaskInstance,
    sandbox: Sandbox,
    backend: Backend,
    max_iter: int = DEFAULT_MAX_ITER,
    bundle: str = "default",
) -> tuple[str, int]:
    """Draft the user's question until the consistency check affirms one.

    Returns the question and the number of rounds used.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be positive")
    prompts = prompt_set(bundle)
    with sandbox.open_database(task.dialect, task.db_ref, task_id="query") as session:
        schema = session.schema_ddl()
    common = dict(SCHEMA=schema, ISSUE_SQL=render_sql_list(task.issue_sql),
                  EVAL_SCRIPT=json.dumps(task.eval_script.to_dict()))
    feedback = ""
    reason = "no draft"
    for j in range(1, max_iter + 1):
        draft = _ask(backend, prompts.render("user_query", **common, ISSUE_REASON=task.issue_reason or "",
                                             feedback=feedback), "user_query", db=task.db_ref, iteration=j).strip()
        if not draft:
            reason = "empty draft"
        else:
            ok, why = _verdict(_ask(backend, prompts.render(
                "consistency", **common, USER_ISSUE=draft, SOLUTION_SQL=render_sql_list(task.solution_sql),
            ), "consistency", db=task.db_ref, iteration=j))
            if ok:
                return draft, j
            reason = f"inconsistent: {why}"
        feedback = f"\n## Feedback on the previous draft\n{reason}\n"
    raise GenerationRejected("user_query", reason, max_iter)


# -- end-to-end -------------------------------------------------------------------------

@dataclass(frozen=True)
class Provenance:
    source_id: str
    db_ref: str
    raw_sql: str
    issue_iterations: int
    query_rounds: int


@dataclass(frozen=True)
class GymInstance:
    task: TaskInstance
    provenance: Provenance


@dataclass
class RewindReport:
    posts_seen: int = 0
    posts_excluded: int = 0
    candidates: int = 0
    emitted: int = 0
    stopped_early: bool = False
    rejects: list[Reject] = field(default_factory=list)

    def rejects_by_stage(self) -> dict[str, int]:
        return dict(sorted(Counter(r.stage for r in self.rejects).items()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rejects_by_stage"] = self.rejects_by_stage()
        return d


@dataclass
class RewindResult:
    instances: list[GymInstance]
    report: RewindReport


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower() or "x"


def build_instances(
    corpus: Iterable[CorpusPost],
    db_refs: Sequence[str],
    sandbox: Sandbox,
    backend: Backend,
    exclusion: ExclusionList = ExclusionList(),
    target_size: int = 1,
    max_iter: int = DEFAULT_MAX_ITER,
    reserved_dbs: Iterable[str] = (),
    dialect: Dialect = Dialect.EMBEDDED_REF,
    bundle: str = "default",
    options: EvalOptions = EvalOptions(),
) -> RewindResult:
    """Walk posts, extracted SQL spans and databases in that nesting order.

    A (post, span) pair yields at most one instance: the first database on
    which every stage succeeds. Generation stops once ``target_size``
    instances exist.
    """
    if target_size < 1:
        raise ValueError("target_size must be at least 1")
    reserved = set(reserved_dbs)
    usable = [d for d in db_refs if d not in reserved and not exclusion.excludes_db(d)]
    report = RewindReport()
    out: list[GymInstance] = []
    for post in corpus:
        report.posts_seen += 1
        if exclusion.excludes_source(post.source_id):
            report.posts_excluded += 1
            continue
        for k, raw in enumerate(extract_sql(post.body), 1):
            report.candidates += 1
            for db_ref in usable:
                try:
                    inst = _one_instance(post, k, raw, db_ref, sandbox, backend, max_iter, dialect, bundle, options)
                except GenerationRejected as exc:
                    report.rejects.append(Reject(exc.stage, post.source_id, db_ref, exc.reason))
                    continue
                except GatewayError as exc:
                    report.rejects.append(Reject("backend", post.source_id, db_ref, str(exc)))
                    continue
                out.append(inst)
                report.emitted += 1
                break
            if len(out) >= target_size:
                report.stopped_early = True
                return RewindResult(out, report)
    return RewindResult(out, report)


def _one_instance(post, k, raw, db_ref, sandbox, backend, max_iter, dialect, bundle, options) -> GymInstance:
    mined = verify_candidate(raw, post.source_id, db_ref, sandbox, backend, dialect, bundle)
    if isinstance(mined, Reject):
        raise GenerationRejected("mine", mined.reason)
    issue = synthesize_issue(mined.solution_sql, db_ref, sandbox, backend, max_iter, dialect, bundle, options)
    task_id = f"gym-{_slug(post.source_id)}-{k}-{_slug(db_ref)}"
    draft = _draft_task(task_id, dialect, db_ref, mined.solution_sql, issue.issue_sql,
                        issue.issue_reason, issue.eval_script)
    query, rounds = generate_user_query(draft, sandbox, backend, max_iter, bundle)
    task = _draft_task(task_id, dialect, db_ref, mined.solution_sql, issue.issue_sql,
                       issue.issue_reason, issue.eval_script, user_query=query)
    # independent re-check of the final artefact
    check = red_team_check(sandbox, task, options)
    if not check.valid:
        raise GenerationRejected("final", check.reason)
    return GymInstance(task, Provenance(post.source_id, db_ref, raw, issue.iterations, rounds))


def write_dataset(result: RewindResult, out_dir: str | Path) -> dict[str, Path]:
    """Write ``tasks.jsonl``, ``provenance.jsonl`` and ``rejects.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "tasks": out_dir / "tasks.jsonl",
        "provenance": out_dir / "provenance.jsonl",
        "rejects": out_dir / "rejects.json",
    }
    write_jsonl(paths["tasks"], [g.task.to_dict() for g in result.instances])
    write_jsonl(paths["provenance"], [{"task_id": g.task.task_id, **asdict(g.provenance)} for g in result.instances])
    paths["rejects"].write_text(json.dumps(result.report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


__all__ = [
    "CorpusPost", "ExclusionList", "GenerationRejected", "GymInstance", "IssueProposal", "MinedSolution",
    "MiningResult", "Provenance", "Reject", "RewindReport", "RewindResult", "build_instances",
    "extract_sql", "generate_user_query", "load_corpus", "mine_solution_sql", "synthesize_issue",
    "verify_candidate", "write_dataset",
]
