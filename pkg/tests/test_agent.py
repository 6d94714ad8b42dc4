import pytest

from sqlfix.agent import (
    MALFORMED_OBSERVATION,
    AgentBackends,
    AgentConfig,
    AgentMode,
    HistoryWindow,
    baseline_fix,
    run_episode,
    run_toolact_episode,
    synthesize_final,
)
from sqlfix.domain import DONE, MALFORMED, FunctionalPlan, Step
from sqlfix.gateway import ScriptedBackend
from sqlfix.sandbox import Limits

TASK = "shop-q01-missing-where"


def fenced(sql):
    return f"```sql\n{sql}\n```"


@pytest.fixture
def task(tasks_by_id):
    return tasks_by_id[TASK]


def run(sandbox, task, backend, **cfg):
    with sandbox.open_session(task) as s:
        return run_episode(task, s, backend, AgentConfig(**cfg))


def test_loop_executes_actions_and_stops_on_done(sandbox, task):
    b = ScriptedBackend([
        "count first</thought><action>SELECT count(*) FROM customers</action>",
        "<thought>fixed</thought><action>[DONE]</action>",
        fenced(task.solution_sql[0]),
    ])
    traj = run(sandbox, task, b)
    assert [s.action for s in traj.steps] == ["SELECT count(*) FROM customers", DONE]
    assert traj.steps[0].observation.startswith("[Rows] 1 row(s)")
    assert traj.steps[1].observation == ""
    assert traj.final_sql == task.solution_sql[0]
    assert traj.passed is None and traj.failure is None
    assert traj.tokens_in > 0 and traj.tokens_out > 0


def test_turn_countdown_and_metadata(sandbox, task):
    b = ScriptedBackend(["<thought>x</thought><action>SELECT 1</action>"] * 3 + [fenced("SELECT 1")])
    run(sandbox, task, b, max_turns=3)
    thought_calls = [c for c in b.calls if c.metadata["role"] == "thought"]
    assert [c.metadata["turn"] for c in thought_calls] == [3, 2, 1]
    assert all("Turns left: %d" % c.metadata["turn"] in c.prompt_text for c in thought_calls)
    assert all(c.metadata["task_id"] == TASK for c in b.calls)


def test_history_is_fed_back(sandbox, task):
    b = ScriptedBackend([
        "<thought>look</thought><action>SELECT name FROM customers WHERE id = 2</action>",
        "<thought>ok</thought><action>[DONE]</action>",
        fenced("SELECT 1"),
    ])
    run(sandbox, task, b)
    second = b.calls[1].prompt_text
    assert "Action: SELECT name FROM customers WHERE id = 2" in second
    assert "Bruno" in second
    assert "Bruno" in b.calls[2].prompt_text  # final synthesis sees the log


def test_malformed_turn_is_consumed(sandbox, task):
    b = ScriptedBackend(["garbage", "more garbage", "<thought>t</thought><action>[DONE]</action>", fenced("SELECT 1")])
    traj = run(sandbox, task, b)
    assert traj.steps[0] == Step(MALFORMED_OBSERVATION, MALFORMED, MALFORMED_OBSERVATION)
    assert b.calls[1].metadata.get("reask") is True
    assert traj.steps[-1].action == DONE


def test_reask_recovers(sandbox, task):
    b = ScriptedBackend(["oops", "<thought>t</thought><action>[DONE]</action>", fenced("SELECT 1")])
    traj = run(sandbox, task, b)
    assert [s.action for s in traj.steps] == [DONE]


def test_max_turns_exhausted_still_synthesizes(sandbox, task):
    b = ScriptedBackend(["<thought>x</thought><action>SELECT 1</action>"] * 2 + [fenced("SELECT 2")])
    traj = run(sandbox, task, b, max_turns=2)
    assert len(traj.steps) == 2 and traj.final_sql == "SELECT 2"


def test_final_without_fence_is_unset(sandbox, task):
    b = ScriptedBackend(["<thought>x</thought><action>[DONE]</action>", "no fence", "still none"])
    traj = run(sandbox, task, b)
    assert traj.final_sql is None and "fenced" in traj.failure


def test_backend_failure_keeps_partial_trajectory(sandbox, task):
    b = ScriptedBackend(["<thought>x</thought><action>SELECT 1</action>"])
    traj = run(sandbox, task, b)
    assert len(traj.steps) == 1
    assert traj.failure.startswith("backend failure")


def test_observation_respects_limits(sandbox, task):
    b = ScriptedBackend(["<thought>x</thought><action>SELECT * FROM order_items</action>",
                         "<thought>y</thought><action>[DONE]</action>", fenced("SELECT 1")])
    traj = run(sandbox, task, b, limits=Limits(row_cap=2))
    assert traj.steps[0].observation.count("\n") == 4  # header line, columns, 2 rows, marker
    assert traj.steps[0].observation.endswith("truncated")


def test_exploration_changes_stay_in_the_session(sandbox, tasks_by_id):
    task = tasks_by_id["shop-m02-update-missing-where"]
    b = ScriptedBackend(["<thought>x</thought><action>DELETE FROM order_items</action>",
                         "<thought>y</thought><action>SELECT count(*) FROM order_items</action>",
                         "<thought>z</thought><action>[DONE]</action>", fenced("SELECT 1")])
    traj = run(sandbox, task, b)
    assert "\n0" in traj.steps[1].observation
    with sandbox.open_session(task) as s:
        assert s.execute("SELECT count(*) FROM order_items").rows == ((11,),)


def test_plan_hint_rendered(sandbox, task):
    b = ScriptedBackend(["<thought>x</thought><action>[DONE]</action>", fenced("SELECT 1")])
    run(sandbox, task, b, plan_hint=FunctionalPlan(("inspect(customers.city)", "add the filter")))
    prompt = b.calls[0].prompt_text
    assert "1. inspect(customers.city)\n2. add the filter" in prompt
    assert b.calls[0].metadata["plan"] is True


class TestGTM:
    @staticmethod
    def pair():
        thinker = ScriptedBackend(
            lambda r: "<thought>check rows</thought><action>SELECT 'from-thinker'</action>", "M_O")
        base = ScriptedBackend(
            lambda r: fenced("SELECT 'final-from-base'") if r.metadata["role"] == "final"
            else "<action>SELECT 'from-base'</action>", "M_B")
        return thinker, base

    def test_actions_come_from_base(self, sandbox, task):
        thinker, base = self.pair()
        traj = run(sandbox, task, AgentBackends(thinker, base), gtm=True, max_turns=3)
        assert [s.action for s in traj.steps] == ["SELECT 'from-base'"] * 3
        assert all(s.thought == "check rows" for s in traj.steps)
        assert traj.final_sql == "SELECT 'final-from-base'"
        assert {c.metadata["role"] for c in thinker.calls} == {"thought"}
        # the base model sees the thought it must implement
        assert "Thought: check rows" in base.calls[0].prompt_text

    def test_without_gtm_actions_come_from_thinker(self, sandbox, task):
        thinker, base = self.pair()
        thinker_final = ScriptedBackend(
            lambda r: fenced("SELECT 'final-from-thinker'") if r.metadata["role"] == "final"
            else "<thought>t</thought><action>SELECT 'from-thinker'</action>", "M_O")
        traj = run(sandbox, task, AgentBackends(thinker_final, base), gtm=False, max_turns=2)
        assert [s.action for s in traj.steps] == ["SELECT 'from-thinker'"] * 2
        assert not base.calls

    def test_gtm_needs_base(self, sandbox, task):
        with pytest.raises(ValueError):
            run(sandbox, task, ScriptedBackend([]), gtm=True)

    def test_base_done_ends_episode(self, sandbox, task):
        thinker = ScriptedBackend(lambda r: "<thought>all good</thought>", "M_O")
        base = ScriptedBackend(["<action>[DONE]</action>", fenced("SELECT 1")], "M_B")
        traj = run(sandbox, task, AgentBackends(thinker, base), gtm=True)
        assert [s.action for s in traj.steps] == [DONE]


def test_history_window_drops_oldest():
    steps = [Step(f"t{i}", f"SELECT {i}", "x" * 40) for i in range(10)]
    text = HistoryWindow(200).render(steps)
    assert text.startswith("[... ")
    assert "SELECT 9" in text and "SELECT 0" not in text
    assert HistoryWindow(10_000).render(steps).count("Thought:") == 10


def test_toolact_tools(sandbox, task):
    b = ScriptedBackend([
        "x</thought><action>Schema Inspection(customers)</action>",
        "x</thought><action>Sample Data(orders)</action>",
        "x</thought><action>Sample Data(nope)</action>",
        "x</thought><action>DROP TABLE customers</action>",
        "x</thought><action>Solution Query: SELECT name FROM customers WHERE city = 'Berlin'</action>",
    ])
    with sandbox.open_session(task) as s:
        traj = run_toolact_episode(task, s, b, AgentConfig(mode=AgentMode.TOOL_ACT))
    obs = [st.observation for st in traj.steps]
    assert obs[0].startswith("CREATE TABLE customers")
    assert obs[1].startswith("[Rows] 5 row(s)")
    assert obs[2] == "no such table: nope"
    assert obs[3].startswith("unknown tool")
    assert obs[4] == "solution submitted"
    assert traj.final_sql == "SELECT name FROM customers WHERE city = 'Berlin'"
    assert "customers, order_items, orders, products" in b.calls[0].prompt_text


def test_toolact_via_run_episode(sandbox, task):
    b = ScriptedBackend(["x</thought><action>Solution Query: SELECT 1</action>"])
    with sandbox.open_session(task) as s:
        traj = run_episode(task, s, b, AgentConfig(mode=AgentMode.TOOL_ACT))
    assert traj.final_sql == "SELECT 1"


def test_baseline_fix(sandbox, task):
    b = ScriptedBackend([fenced(task.solution_sql[0])])
    with sandbox.open_session(task) as s:
        traj = baseline_fix(task, s, b)
    assert traj.steps == () and traj.final_sql == task.solution_sql[0]


def test_synthesize_final_reasks_once(task):
    b = ScriptedBackend(["nothing", fenced("SELECT 9")])
    assert synthesize_final(task, [Step("t", DONE)], b) == "SELECT 9"
    assert len(b.calls) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(max_turns=0)
    with pytest.raises(ValueError):
        AgentConfig(mode=AgentMode.TOOL_ACT, plan_hint=FunctionalPlan(("a",)))
