"""Scripted stand-ins for the generation and teacher models used in tests."""

import json
import re

from sqlfix.gateway import ScriptedBackend


def fenced(sql):
    return f"```sql\n{sql}\n```"


def _section(prompt, heading):
    m = re.search(rf"## {heading}\n(.*?)(?:\n## |\Z)", prompt, re.DOTALL)
    return m.group(1).strip() if m else ""


def break_query(sql):
    """A faulty variant of a SELECT: drop the WHERE clause, or empty the result."""
    m = re.search(r"\s+WHERE\s+.*?(?=\s+(GROUP|ORDER|LIMIT)\b|$)", sql, re.IGNORECASE | re.DOTALL)
    if m:
        return sql[: m.start()] + sql[m.end():]
    return f"{sql} LIMIT 0"


class GenBot:
    """Rule-based generation model.

    ``weak_issues`` proposals that the red-team check must reject come first
    (the faulty SQL equals the working SQL); ``rejected_queries`` question
    drafts mention a table that does not exist and are vetoed by a
    consistency check that really looks at the schema.
    """

    def __init__(self, weak_issues=0, rejected_queries=0, adapt=None):
        self.weak_issues = weak_issues
        self.rejected_queries = rejected_queries
        self.adapt = adapt or (lambda sql: sql)
        self.backend = ScriptedBackend(self, "gen")

    def __call__(self, req):
        role, prompt = req.metadata["role"], req.prompt_text
        it = req.metadata.get("iteration", 1)
        if role == "adapt":
            return fenced(self.adapt(_section(prompt, "SQL")))
        if role == "issue":
            solution = json.loads(_section(prompt, "Working SQL").split("\n")[0])
            issue = solution if it <= self.weak_issues else [break_query(s) for s in solution]
            return "```json\n" + json.dumps({
                "issue_reason": "the filter was lost",
                "issue_sql": issue,
                "eval_script": {"test_cases": [{"kind": "ResultMatch", "reference_sql": solution}]},
            }) + "\n```"
        if role == "coherence":
            return "YES"
        if role == "user_query":
            if it <= self.rejected_queries:
                return "Why does my report from the ghost_table table show too many rows?"
            return "My report lists too many rows; I only want the matching ones."
        if role == "consistency":
            schema = _section(prompt, "Database Schema").lower()
            question = _section(prompt, "User Question")
            for name in re.findall(r"(\w+) table", question):
                if f"create table {name.lower()}" not in schema:
                    return f"NO\nmentions unknown table {name}"
            return "YES"
        raise AssertionError(f"unexpected role {role}")


class Teacher:
    """Teacher model whose final answer is right or wrong by a per-task rule.

    Behaviours: ``"plan"`` fixes the task only when a plan is in the prompt,
    ``"always"`` and ``"never"`` ignore the plan, and an integer ``k`` fixes
    it from try ``k`` on. Each episode explores once, then says DONE.
    """

    PLAN = "1. inspect(customers.city) -> see which rows qualify\n2. add the missing condition"

    def __init__(self, tasks, behaviour, plan_reply=None):
        self.tasks = {t.task_id: t for t in tasks}
        self.behaviour = behaviour
        self.plan_reply = plan_reply or self.PLAN
        self.backend = ScriptedBackend(self, "teacher")

    def fixes(self, meta):
        rule = self.behaviour[meta["task_id"]]
        if rule == "plan":
            return bool(meta.get("plan"))
        if rule in ("always", "never"):
            return rule == "always"
        return meta.get("try", 1) >= rule

    def __call__(self, req):
        meta = req.metadata
        if meta["role"] == "plan":
            return self.plan_reply
        task = self.tasks[meta["task_id"]]
        if meta["role"] == "final":
            sql = task.solution_sql if self.fixes(meta) else task.issue_sql
            return fenced(";\n".join(sql))
        if "Observation:" not in req.prompt_text:
            return "look at the data</thought><action>SELECT count(*) FROM customers</action>"
        return "<thought>seen enough</thought><action>[DONE]</action>"
