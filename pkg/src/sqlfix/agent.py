"""ReAct-style debugging episodes whose actions are SQL statements.

``run_episode`` drives the thought/action/observation loop against a
sandbox session and finishes with a final-answer synthesis call. With
``gtm=True`` the thought comes from one model and the SQL action from
another (see ``gtm_step``). ``run_toolact_episode`` is the tool-restricted
baseline.
"""

from __future__ import annotations

import logging
import re
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from .domain import DONE, MALFORMED, FunctionalPlan, Step, TaskInstance, Trajectory
from .gateway import (
    DEFAULT_TEMPERATURE,
    Backend,
    CompletionRequest,
    GatewayError,
    Message,
    ParseError,
    extract_sql_fence,
    parse_tagged,
)
from .prompts import DIALECT_NAMES, prompt_set, render_plan, render_sql_list
from .sandbox import DEFAULT_LIMITS, Limits, Session

log = logging.getLogger(__name__)

MALFORMED_OBSERVATION = "malformed output"
BACKEND_FAILURE = "backend failure"
REASK_TAGGED = (
    "Your reply could not be parsed. Answer again using exactly "
    "<thought>...</thought><action>...</action>, one round only."
)
REASK_ACTION = "Your reply could not be parsed. Answer again with exactly one <action>...</action>."
SAMPLE_ROWS = 5
REASK_FENCE = "Your reply had no ```sql fenced block. Answer again with the SQL inside a ```sql block."


class AgentMode(str, Enum):
    SQL_ACT = "SqlAct"
    TOOL_ACT = "ToolAct"


@dataclass(frozen=True)
class AgentConfig:
    max_turns: int = 5
    mode: AgentMode = AgentMode.SQL_ACT
    gtm: bool = False
    plan_hint: FunctionalPlan | None = None
    prompt_set: str = "default"
    limits: Limits = DEFAULT_LIMITS
    temperature: float = DEFAULT_TEMPERATURE
    seed: int | None = None
    history_chars: int = 12000
    # copied into every request's metadata (e.g. task id, try index)
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be positive")
        if self.plan_hint is not None and self.mode is not AgentMode.SQL_ACT:
            raise ValueError("plan hints only apply to SqlAct episodes")


@dataclass(frozen=True)
class AgentBackends:
    """``primary`` answers every call unless ``gtm`` is on, in which case it
    supplies thoughts and ``base`` supplies actions and the final SQL."""

    primary: Backend
    base: Backend | None = None


@dataclass(frozen=True)
class HistoryWindow:
    """Renders past (thought, action, observation) rounds for prompts.

    When the text exceeds ``char_budget`` the oldest rounds are dropped first
    and replaced by a marker; the latest round is always kept.
    """

    char_budget: int = 12000

    @staticmethod
    def render_step(step: Step) -> str:
        text = f"Thought: {step.thought}\nAction: {step.action}"
        if step.observation:
            text += f"\nObservation: {step.observation}"
        return text

    def render(self, steps: Sequence[Step]) -> str:
        blocks = [self.render_step(s) for s in steps]
        dropped = 0
        while len(blocks) > 1 and len("\n\n".join(blocks)) > self.char_budget:
            blocks.pop(0)
            dropped += 1
        if dropped:
            blocks.insert(0, f"[... {dropped} earlier round(s) omitted ...]")
        return "\n\n".join(blocks)


class _Meter:
    def __init__(self):
        self.tokens_in = 0
        self.tokens_out = 0

    def call(self, backend: Backend, request: CompletionRequest) -> str:
        c = backend.complete(request)
        self.tokens_in += c.tokens_in
        self.tokens_out += c.tokens_out
        return c.text


def _tagged(config: AgentConfig, task: TaskInstance) -> AgentConfig:
    return replace(config, metadata={"task_id": task.task_id, **config.metadata})


def _context(task: TaskInstance, session: Session, config: AgentConfig) -> dict:
    plan = config.plan_hint.steps if config.plan_hint else None
    return {
        "db_id": task.db_ref,
        "dialect": DIALECT_NAMES[task.dialect],
        "SCHEMA": session.schema_ddl(),
        "USER_ISSUE": task.user_query,
        "ISSUE_SQL": render_sql_list(task.issue_sql),
        "plan": render_plan(plan),
    }


def _request(prompt: str, config: AgentConfig, backend: Backend, role: str, **meta) -> CompletionRequest:
    return CompletionRequest(
        messages=(Message("user", prompt),),
        temperature=config.temperature,
        backend_id=backend.backend_id,
        seed=config.seed,
        metadata={**config.metadata, **meta, "role": role, "plan": config.plan_hint is not None},
    )


def _reask(request: CompletionRequest, reply: str, instruction: str) -> CompletionRequest:
    msgs = request.messages + (Message("assistant", reply), Message("user", instruction))
    return CompletionRequest(msgs, request.temperature, request.top_p, request.max_tokens,
                             request.stop_sequences, request.backend_id, request.seed,
                             {**request.metadata, "reask": True})


def _with_prefill(text: str, tag: str) -> str:
    # prompts end with an opened tag that the model continues
    if re.search(rf"<{tag}>", text, re.IGNORECASE):
        return text
    return f"<{tag}>" + text


def _ask(meter: _Meter, backend: Backend, request: CompletionRequest, parse, instruction: str):
    """One call plus at most one corrective re-ask. Returns parsed value or None."""
    reply = meter.call(backend, request)
    try:
        return parse(reply)
    except ParseError:
        pass
    reply2 = meter.call(backend, _reask(request, reply, instruction))
    try:
        return parse(reply2)
    except ParseError:
        return None


def _parse_joint(text: str) -> tuple[str, str]:
    text = _with_prefill(text, "thought")
    return parse_tagged(text, "thought"), parse_tagged(text, "action")


def _joint_step(history: str, ctx: dict, turn: int, backend: Backend, config: AgentConfig,
                meter: _Meter, role: str = "thought", template: str = "thought") -> tuple[str, str]:
    prompt = prompt_set(config.prompt_set).render(template, **ctx, history=history, turn=turn)
    req = _request(prompt, config, backend, role, turn=turn)
    parsed = _ask(meter, backend, req, _parse_joint, REASK_TAGGED)
    if parsed is None:
        return MALFORMED_OBSERVATION, MALFORMED
    return parsed


def gtm_step(
    history: str,
    ctx: dict,
    turn: int,
    thought_model: Backend,
    action_model: Backend,
    config: AgentConfig,
    meter: _Meter | None = None,
) -> tuple[str, str]:
    """Thought from ``thought_model``; the SQL action from ``action_model``.

    The action proposed alongside the thought is discarded.
    """
    meter = meter or _Meter()
    prompts = prompt_set(config.prompt_set)
    req = _request(prompts.render("thought", **ctx, history=history, turn=turn),
                   config, thought_model, "thought", turn=turn)
    thought = _ask(meter, thought_model, req,
                   lambda t: parse_tagged(_with_prefill(t, "thought"), "thought"), REASK_TAGGED)
    if thought is None:
        return MALFORMED_OBSERVATION, MALFORMED
    with_thought = (history + "\n\n" if history else "") + f"Thought: {thought}"
    req = _request(prompts.render("action", **ctx, history=with_thought, turn=turn),
                   config, action_model, "action", turn=turn)
    action = _ask(meter, action_model, req,
                  lambda t: parse_tagged(_with_prefill(t, "action"), "action"), REASK_ACTION)
    if action is None:
        return thought, MALFORMED
    return thought, action


def synthesize_final(
    task: TaskInstance,
    trajectory: Trajectory | Sequence[Step],
    backend: Backend,
    config: AgentConfig = AgentConfig(),
    ctx: dict | None = None,
    meter: _Meter | None = None,
) -> str | None:
    """Ask for the final fixed SQL given the whole react log; None if no
    fenced SQL comes back after one re-ask."""
    steps = trajectory.steps if isinstance(trajectory, Trajectory) else trajectory
    config = _tagged(config, task)
    meter = meter or _Meter()
    ctx = ctx if ctx is not None else {
        "db_id": task.db_ref, "dialect": DIALECT_NAMES[task.dialect], "SCHEMA": "",
        "USER_ISSUE": task.user_query, "ISSUE_SQL": render_sql_list(task.issue_sql),
    }
    history = "\n\n".join(HistoryWindow.render_step(s) for s in steps)
    prompt = prompt_set(config.prompt_set).render("final", **ctx, HISTORY=history)
    return _ask(meter, backend, _request(prompt, config, backend, "final"), extract_sql_fence, REASK_FENCE)


def run_episode(
    task: TaskInstance,
    session: Session,
    backends: AgentBackends | Backend,
    config: AgentConfig = AgentConfig(),
) -> Trajectory:
    """Run one debugging episode and return its trajectory.

    The trajectory's ``passed`` flag is left unset; scoring is the
    evaluator's job.
    """
    if not isinstance(backends, AgentBackends):
        backends = AgentBackends(backends)
    if config.mode is AgentMode.TOOL_ACT:
        return run_toolact_episode(task, session, backends.primary, config)
    if config.gtm and backends.base is None:
        raise ValueError("GTM needs both a thought model and a base model")
    config = _tagged(config, task)
    start = time.perf_counter()
    meter = _Meter()
    window = HistoryWindow(config.history_chars)
    steps: list[Step] = []
    final_sql = failure = None
    try:
        ctx = _context(task, session, config)
        for i in range(1, config.max_turns + 1):
            turn = config.max_turns - i + 1
            history = window.render(steps)
            if config.gtm:
                thought, action = gtm_step(history, ctx, turn, backends.primary, backends.base, config, meter)
            else:
                thought, action = _joint_step(history, ctx, turn, backends.primary, config, meter)
            if action == MALFORMED:
                steps.append(Step(thought, MALFORMED, MALFORMED_OBSERVATION))
                continue
            if action == DONE:
                steps.append(Step(thought, DONE, ""))
                break
            obs = session.execute(action, config.limits)
            steps.append(Step(thought, action, obs.render(config.limits.char_cap)))
        synth = backends.base if config.gtm else backends.primary
        final_sql = synthesize_final(task, steps, synth, config, ctx, meter)
        if final_sql is None:
            failure = "final answer had no fenced SQL"
    except GatewayError as exc:
        log.warning("episode %s aborted: %s", task.task_id, exc)
        failure = f"{BACKEND_FAILURE}: {exc}"
    return Trajectory(
        task_id=task.task_id,
        steps=tuple(steps),
        final_sql=final_sql,
        strategy=config.metadata.get("strategy", "Episode"),
        tries_used=int(config.metadata.get("try", 1)),
        tokens_in=meter.tokens_in,
        tokens_out=meter.tokens_out,
        wall_ms=int((time.perf_counter() - start) * 1000),
        failure=failure,
    )


# -- Tool-Act baseline ----------------------------------------------------------------

_SCHEMA_TOOL = re.compile(r"^schema\s*inspection\s*\(\s*[\"'`]?([^)\"'`]+?)[\"'`]?\s*\)\s*$", re.I)
_SAMPLE_TOOL = re.compile(r"^sample\s*data\s*\(\s*[\"'`]?([^)\"'`]+?)[\"'`]?\s*\)\s*$", re.I)
_SOLUTION_TOOL = re.compile(r"^solution\s*query\s*:\s*(.+)$", re.I | re.S)


def run_toolact_episode(
    task: TaskInstance,
    session: Session,
    backend: Backend,
    config: AgentConfig = AgentConfig(mode=AgentMode.TOOL_ACT),
) -> Trajectory:
    """Episode restricted to Schema Inspection, Sample Data and Solution Query."""
    config = _tagged(config, task)
    start = time.perf_counter()
    meter = _Meter()
    window = HistoryWindow(config.history_chars)
    steps: list[Step] = []
    final_sql = failure = None
    try:
        ctx = _context(task, session, config)
        ctx.pop("plan")
        ctx["TABLES"] = ", ".join(session.table_names())
        for i in range(1, config.max_turns + 1):
            turn = config.max_turns - i + 1
            thought, action = _joint_step(window.render(steps), ctx, turn, backend, config, meter,
                                          role="toolact", template="toolact")
            if action == MALFORMED:
                steps.append(Step(thought, MALFORMED, MALFORMED_OBSERVATION))
                continue
            if m := _SOLUTION_TOOL.match(action):
                final_sql = m.group(1).strip()
                steps.append(Step(thought, action, "solution submitted"))
                break
            if m := _SCHEMA_TOOL.match(action):
                ddl = session.table_ddl(m.group(1))
                obs = ddl or f"no such table: {m.group(1)}"
            elif m := _SAMPLE_TOOL.match(action):
                table = m.group(1)
                if session.table_ddl(table) is None:
                    obs = f"no such table: {table}"
                else:
                    res = session.execute(session.sample_sql(table, SAMPLE_ROWS), config.limits)
                    obs = res.render(config.limits.char_cap)
            else:
                obs = "unknown tool; available: Schema Inspection(<table>), Sample Data(<table>), Solution Query: <sql>"
            steps.append(Step(thought, action, obs))
        if final_sql is None:
            ctx["plan"] = ""
            final_sql = synthesize_final(task, steps, backend, config, ctx, meter)
            if final_sql is None:
                failure = "final answer had no fenced SQL"
    except GatewayError as exc:
        failure = f"{BACKEND_FAILURE}: {exc}"
    return Trajectory(
        task_id=task.task_id, steps=tuple(steps), final_sql=final_sql,
        strategy=config.metadata.get("strategy", "ToolAct"),
        tries_used=int(config.metadata.get("try", 1)),
        tokens_in=meter.tokens_in, tokens_out=meter.tokens_out,
        wall_ms=int((time.perf_counter() - start) * 1000), failure=failure,
    )


def baseline_fix(task: TaskInstance, session: Session, backend: Backend,
                 config: AgentConfig = AgentConfig()) -> Trajectory:
    """Single-shot repair without interaction."""
    config = _tagged(config, task)
    start = time.perf_counter()
    meter = _Meter()
    ctx = _context(task, session, config)
    prompt = prompt_set(config.prompt_set).render("baseline", **ctx)
    failure = None
    try:
        final_sql = _ask(meter, backend, _request(prompt, config, backend, "baseline"),
                         extract_sql_fence, REASK_FENCE)
    except GatewayError as exc:
        final_sql, failure = None, f"{BACKEND_FAILURE}: {exc}"
    return Trajectory(task_id=task.task_id, final_sql=final_sql, strategy="Baseline",
                      tokens_in=meter.tokens_in, tokens_out=meter.tokens_out,
                      wall_ms=int((time.perf_counter() - start) * 1000),
                      failure=failure or (None if final_sql else "no fenced SQL"))
