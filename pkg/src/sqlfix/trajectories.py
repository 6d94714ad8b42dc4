"""Successful-trajectory collection over a gym dataset.

Four strategies are supported: one greedy rollout (Baseline), rejection
sampling with early stop (Rejection), a backward-inferred functional plan
guiding one greedy rollout (FPlan), and the plan followed by sampled
retries (RejectFPlan). At most one passing trajectory is kept per instance.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

from . import sqltext
from .agent import BACKEND_FAILURE, AgentConfig, run_episode
from .domain import FunctionalPlan, TaskInstance, Trajectory, read_jsonl, write_jsonl
from .evaluator import EvalOptions, evaluate_task
from .gateway import Backend, CompletionRequest, GatewayError, Message, ParseError
from .prompts import DIALECT_NAMES, prompt_set, render_sql_list
from .sandbox import Sandbox

log = logging.getLogger(__name__)

EXPORT_FORMAT = "sqlfix-chat"
EXPORT_VERSION = 1
MAX_PLAN_STEP_CHARS = 300


class StrategyKind(str, Enum):
    BASELINE = "Baseline"
    FPLAN = "FPlan"
    REJECTION = "Rejection"
    REJECT_FPLAN = "RejectFPlan"

    @property
    def uses_plan(self) -> bool:
        return self in (StrategyKind.FPLAN, StrategyKind.REJECT_FPLAN)

    @property
    def samples(self) -> bool:
        return self in (StrategyKind.REJECTION, StrategyKind.REJECT_FPLAN)


_DEFAULTS = {
    # (max_tries, temperature, early_stop)
    StrategyKind.BASELINE: (1, 0.0, True),
    StrategyKind.FPLAN: (1, 0.0, True),
    StrategyKind.REJECTION: (5, 0.8, True),
    StrategyKind.REJECT_FPLAN: (5, 0.8, True),
}


@dataclass(frozen=True)
class StrategyConfig:
    """Unset fields take the per-strategy defaults."""

    kind: StrategyKind = StrategyKind.BASELINE
    max_tries: int | None = None
    temperature: float | None = None
    early_stop: bool | None = None

    def __post_init__(self):
        kind = StrategyKind(self.kind)
        object.__setattr__(self, "kind", kind)
        tries, temp, stop = _DEFAULTS[kind]
        for name, default in (("max_tries", tries), ("temperature", temp), ("early_stop", stop)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        if self.max_tries < 1:
            raise ValueError("max_tries must be positive")
        if not kind.samples and self.max_tries != 1:
            raise ValueError(f"{kind.value} runs exactly one try")

    def temperature_for(self, try_index: int) -> float:
        # the plan-guided first attempt of RejectFPlan is greedy
        if self.kind is StrategyKind.REJECT_FPLAN and try_index == 1:
            return 0.0
        return self.temperature


@dataclass(frozen=True)
class CostModel:
    """Prices per 1,000 tokens."""

    input_per_1k: float = 0.0
    output_per_1k: float = 0.0

    def cost(self, tokens_in: int, tokens_out: int) -> float:
        return tokens_in / 1000 * self.input_per_1k + tokens_out / 1000 * self.output_per_1k


# -- plans ------------------------------------------------------------------------------

_NUMBERED = re.compile(r"^\s*(\d+)[.)]\s+(.+?)\s*$")


def parse_plan(text: str, solution_sql: Sequence[str] = ()) -> FunctionalPlan:
    """Numbered list to plan steps.

    Steps that reproduce a full solution statement are refused so the
    corrected SQL cannot reach the forward rollout.
    """
    steps = [m.group(2) for line in text.splitlines() if (m := _NUMBERED.match(line))]
    if not steps:
        raise ParseError("plan has no numbered steps", text)
    leaks = [sqltext.normalize(s) for s in solution_sql if len(s.strip()) > 20]
    for step in steps:
        norm = sqltext.normalize(step)
        if any(l in norm for l in leaks):
            raise ParseError("plan step repeats the corrected SQL", text)
    return FunctionalPlan(tuple(s[:MAX_PLAN_STEP_CHARS] for s in steps))


@dataclass
class _Usage:
    tokens_in: int = 0
    tokens_out: int = 0


def backward_infer_plan(
    task: TaskInstance,
    teacher: Backend,
    sandbox: Sandbox,
    bundle: str = "default",
    usage: _Usage | None = None,
    seed: int | None = None,
) -> FunctionalPlan:
    """Ask the teacher how to get from the issue SQL to the solution.

    Raises ParseError when neither the reply nor one re-ask parses.
    """
    with sandbox.open_session(task) as session:
        schema = session.schema_ddl()
    prompt = prompt_set(bundle).render(
        "plan", SCHEMA=schema, USER_ISSUE=task.user_query,
        ISSUE_SQL=render_sql_list(task.issue_sql), SOLUTION_SQL=render_sql_list(task.solution_sql),
    )
    usage = usage if usage is not None else _Usage()
    meta = {"role": "plan", "task_id": task.task_id}
    req = CompletionRequest.user(prompt, temperature=0.0, backend_id=teacher.backend_id, seed=seed, metadata=meta)
    reply = teacher.complete(req)
    usage.tokens_in += reply.tokens_in
    usage.tokens_out += reply.tokens_out
    try:
        return parse_plan(reply.text, task.solution_sql)
    except ParseError as first:
        retry = CompletionRequest(
            req.messages + (Message("assistant", reply.text),
                            Message("user", f"That could not be used ({first}). Reply with a numbered list only.")),
            temperature=0.0, backend_id=teacher.backend_id, seed=seed, metadata={**meta, "reask": True},
        )
        again = teacher.complete(retry)
        usage.tokens_in += again.tokens_in
        usage.tokens_out += again.tokens_out
        return parse_plan(again.text, task.solution_sql)


@dataclass(frozen=True)
class TryResult:
    trajectory: Trajectory
    passed: bool
    db_time_ms: float
    reason: str = ""


def forward_validate(
    task: TaskInstance,
    plan: FunctionalPlan | None,
    teacher: Backend,
    sandbox: Sandbox,
    agent: AgentConfig = AgentConfig(),
    options: EvalOptions = EvalOptions(),
) -> TryResult:
    """One rollout (optionally plan-guided) on a fresh session, then scoring.

    The episode only sees the user query, schema, issue SQL and plan. The
    returned trajectory never contains the plan.
    """
    agent = replace(agent, plan_hint=plan)
    with sandbox.open_session(task) as session:
        traj = run_episode(task, session, teacher, agent)
        db_ms = session.db_time_ms
    if traj.failure and traj.failure.startswith(BACKEND_FAILURE):
        raise GatewayError(traj.failure)
    if traj.final_sql is None:
        return TryResult(traj, False, db_ms, traj.failure or "no final SQL")
    outcome = evaluate_task(sandbox, task, traj.final_sql, options)
    traj = replace(traj, passed=outcome.passed)
    reason = "" if outcome.passed else "; ".join(c.detail for c in outcome.per_case if not c.passed)
    return TryResult(traj, outcome.passed, db_ms, reason)


# -- collection -------------------------------------------------------------------------

def try_seed(base: int | None, task_id: str, try_index: int) -> int | None:
    if base is None:
        return None
    digest = hashlib.sha256(f"{base}:{task_id}:{try_index}".encode()).hexdigest()
    return int(digest[:8], 16)


@dataclass
class InstanceOutcome:
    task_id: str
    tries: int = 0
    trajectory: Trajectory | None = None
    plan: tuple[str, ...] | None = None
    db_time_ms: float = 0.0
    episode_ms: float = 0.0
    tokens_in: int = 0
    tokens_out: int = 0
    skipped: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trajectory"] = self.trajectory.to_dict() if self.trajectory else None
        d["plan"] = list(self.plan) if self.plan is not None else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "InstanceOutcome":
        d = dict(d)
        if d.get("trajectory"):
            d["trajectory"] = Trajectory.from_dict(d["trajectory"])
        if d.get("plan") is not None:
            d["plan"] = tuple(d["plan"])
        return cls(**d)


@dataclass
class CollectionReport:
    strategy: str
    n_instances: int
    successful_traj: int
    total_tries: int
    db_time_ms: float
    episode_ms: float
    tokens_in: int
    tokens_out: int
    cost: float
    skipped: int = 0
    resumable: bool = False

    @property
    def avg_tries(self) -> float:
        return self.total_tries / self.n_instances if self.n_instances else 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        d["avg_tries"] = self.avg_tries
        if not timing:
            d.pop("db_time_ms")
            d.pop("episode_ms")
        return d


@dataclass
class CollectionResult:
    trajectories: list[Trajectory]
    report: CollectionReport
    outcomes: list[InstanceOutcome] = field(default_factory=list)

    @property
    def plans(self) -> dict[str, list[str]]:
        return {o.task_id: list(o.plan) for o in self.outcomes if o.plan is not None}


def _collect_one(
    task: TaskInstance,
    teacher: Backend,
    sandbox: Sandbox,
    strategy: StrategyConfig,
    agent: AgentConfig,
    options: EvalOptions,
    seed: int | None,
) -> InstanceOutcome:
    out = InstanceOutcome(task.task_id)
    start = time.perf_counter()
    plan = None
    if strategy.kind.uses_plan:
        usage = _Usage()
        try:
            plan = backward_infer_plan(task, teacher, sandbox, agent.prompt_set, usage,
                                       seed=try_seed(seed, task.task_id, 0))
        except ParseError as exc:
            out.skipped = f"plan: {exc}"
        out.tokens_in += usage.tokens_in
        out.tokens_out += usage.tokens_out
        out.plan = plan.steps if plan else None
        if plan is None:
            out.episode_ms = (time.perf_counter() - start) * 1000
            return out
    for i in range(1, strategy.max_tries + 1):
        cfg = replace(
            agent,
            temperature=strategy.temperature_for(i),
            seed=try_seed(seed, task.task_id, i),
            metadata={**agent.metadata, "task_id": task.task_id, "try": i, "strategy": strategy.kind.value},
        )
        result = forward_validate(task, plan, teacher, sandbox, cfg, options)
        out.tries += 1
        out.db_time_ms += result.db_time_ms
        out.tokens_in += result.trajectory.tokens_in
        out.tokens_out += result.trajectory.tokens_out
        if result.passed and out.trajectory is None:
            out.trajectory = replace(result.trajectory, tries_used=i)
            if strategy.early_stop:
                break
    out.episode_ms = (time.perf_counter() - start) * 1000
    return out


class Checkpoint:
    """Append-only JSONL of finished instances, keyed by task id."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def load(self) -> dict[str, InstanceOutcome]:
        if not self.path.exists():
            return {}
        return {r["task_id"]: InstanceOutcome.from_dict(r) for r in read_jsonl(self.path)}

    def append(self, outcome: InstanceOutcome) -> None:
        line = json.dumps(outcome.to_dict(), sort_keys=True, ensure_ascii=False)
        with self._lock, self.path.open("a", encoding="utf-8") as f:
            f.write(line + "\n")


def collect(
    dataset: Sequence[TaskInstance],
    teacher: Backend,
    sandbox: Sandbox,
    strategy: StrategyConfig = StrategyConfig(),
    agent: AgentConfig = AgentConfig(),
    options: EvalOptions = EvalOptions(),
    seed: int | None = None,
    workers: int = 1,
    checkpoint: str | Path | None = None,
    cost_model: CostModel = CostModel(),
) -> CollectionResult:
    """Collect at most one passing trajectory per instance.

    If the teacher becomes unavailable the run stops, the report is flagged
    ``resumable`` and a rerun with the same checkpoint skips finished
    instances.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    ids = [t.task_id for t in dataset]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate task ids in dataset")
    store = Checkpoint(checkpoint) if checkpoint else None
    done = store.load() if store else {}
    todo = [t for t in dataset if t.task_id not in done]
    stop = threading.Event()
    results: dict[str, InstanceOutcome] = dict(done)
    lock = threading.Lock()

    def work(task: TaskInstance) -> None:
        if stop.is_set():
            return
        try:
            outcome = _collect_one(task, teacher, sandbox, strategy, agent, options, seed)
        except GatewayError as exc:
            log.warning("teacher unavailable on %s: %s", task.task_id, exc)
            stop.set()
            return
        with lock:
            results[task.task_id] = outcome
        if store:
            store.append(outcome)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, todo))
    else:
        for t in todo:
            work(t)

    outcomes = [results[i] for i in ids if i in results]
    trajectories = [o.trajectory for o in outcomes if o.trajectory is not None]
    t_in = sum(o.tokens_in for o in outcomes)
    t_out = sum(o.tokens_out for o in outcomes)
    report = CollectionReport(
        strategy=strategy.kind.value,
        n_instances=len(dataset),
        successful_traj=len(trajectories),
        total_tries=sum(o.tries for o in outcomes),
        db_time_ms=sum(o.db_time_ms for o in outcomes),
        episode_ms=sum(o.episode_ms for o in outcomes),
        tokens_in=t_in,
        tokens_out=t_out,
        cost=cost_model.cost(t_in, t_out),
        skipped=sum(1 for o in outcomes if o.skipped),
        resumable=stop.is_set(),
    )
    return CollectionResult(trajectories, report, outcomes)


# -- storage and export -----------------------------------------------------------------

def write_trajectories(path: str | Path, trajectories: Sequence[Trajectory]) -> None:
    write_jsonl(path, [t.to_dict() for t in trajectories])


def read_trajectories(path: str | Path) -> list[Trajectory]:
    return [Trajectory.from_dict(r) for r in read_jsonl(path)]


def _task_prompt(task: TaskInstance, schema: str, bundle: str, max_turns: int) -> str:
    return prompt_set(bundle).render(
        "thought", db_id=task.db_ref, dialect=DIALECT_NAMES[task.dialect], SCHEMA=schema,
        USER_ISSUE=task.user_query, ISSUE_SQL=render_sql_list(task.issue_sql), plan="",
        turn=max_turns, history="",
    )


def training_record(
    trajectory: Trajectory,
    task: TaskInstance | None = None,
    schema: str = "",
    bundle: str = "default",
    max_turns: int = 5,
) -> dict:
    """Chat-format record for one passing trajectory.

    ``messages`` alternates an assistant turn (tagged thought and action) and
    a user turn carrying the observation; a DONE step has no observation
    turn. When the task is known the opening user prompt is included.
    ``final`` is the assistant's closing answer with the fixed SQL.
    """
    if trajectory.passed is not True:
        raise ValueError(f"{trajectory.task_id}: only passing trajectories can be exported")
    messages = []
    if task is not None:
        messages.append({"role": "user", "content": _task_prompt(task, schema, bundle, max_turns)})
    for step in trajectory.steps:
        messages.append({"role": "assistant",
                         "content": f"<thought>{step.thought}</thought><action>{step.action}</action>"})
        if step.observation:
            messages.append({"role": "user", "content": step.observation})
    return {
        "task_id": trajectory.task_id,
        "messages": messages,
        "final": {"role": "assistant", "content": f"```sql\n{trajectory.final_sql}\n```"},
        "final_sql": trajectory.final_sql,
    }


def export_training(
    trajectories: Sequence[Trajectory],
    path: str | Path,
    tasks: Mapping[str, TaskInstance] | None = None,
    schemas: Mapping[str, str] | None = None,
    bundle: str = "default",
) -> int:
    """Write a header record then one record per trajectory; returns the count.

    Any non-passing trajectory aborts the export before anything is written.
    """
    tasks = tasks or {}
    schemas = schemas or {}
    records = [training_record(t, tasks.get(t.task_id), schemas.get(t.task_id, ""), bundle)
               for t in trajectories]
    header = {"format": EXPORT_FORMAT, "version": EXPORT_VERSION, "records": len(records),
              "step_render": "<thought>...</thought><action>...</action>"}
    write_jsonl(path, [header, *records])
    return len(records)


__all__ = [
    "CollectionReport", "CollectionResult", "CostModel", "InstanceOutcome", "StrategyConfig",
    "StrategyKind", "TryResult", "backward_infer_plan", "collect", "export_training",
    "forward_validate", "parse_plan", "read_trajectories", "training_record", "try_seed",
    "write_trajectories",
]
