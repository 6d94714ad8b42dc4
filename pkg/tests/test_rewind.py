import json

import pytest

from helpers import GenBot
from sqlfix.domain import TaskInstance
from sqlfix.evaluator import red_team_check
from sqlfix.rewind import (
    CorpusPost,
    ExclusionList,
    GenerationRejected,
    build_instances,
    extract_sql,
    generate_user_query,
    load_corpus,
    mine_solution_sql,
    synthesize_issue,
    write_dataset,
)

BERLIN = "SELECT name FROM customers WHERE city = 'Berlin'"


def post(i, sql, title="help"):
    return CorpusPost(f"p{i}", title, f"My query:\n\n```sql\n{sql}\n```\nwhat is wrong?")


class TestExtract:
    def test_fenced_and_indented(self):
        text = ("Try this\n```sql\nSELECT 1;\n```\nor\n\n    SELECT a\n    FROM t\n\n"
                "```python\nprint('x')\n```\n```\nupdate t set a = 1\n```")
        assert extract_sql(text) == ["SELECT 1;", "update t set a = 1", "SELECT a\nFROM t"]

    def test_prose_and_non_sql_blocks_ignored(self):
        assert extract_sql("select your answer below\n```\nnot sql\n```\n    echo hi\n") == []

    def test_duplicates_dropped(self):
        assert extract_sql("```sql\nSELECT 1\n```\n```sql\nSELECT 1\n```") == ["SELECT 1"]


class TestMining:
    def test_gate(self, sandbox):
        corpus = [
            post(1, BERLIN),
            post(2, "SELECT name FROM customers WHERE city = 'Atlantis'"),
            post(3, "SELECT shoe_size FROM customers"),
            post(4, "SELECT NULL FROM customers"),
            post(5, "DELETE FROM customers WHERE id = 99"),
            post(6, "UPDATE products SET price = price WHERE id = 1"),
        ]
        got = mine_solution_sql(corpus, "shop", sandbox, GenBot().backend)
        assert [m.source_id for m in got.accepted] == ["p1", "p6"]
        reasons = {r.source_id: r.reason for r in got.rejected}
        assert reasons["p2"] == reasons["p4"] == reasons["p5"] == "null result"
        assert reasons["p3"].startswith("exec error")

    def test_adaptation_is_what_gets_checked(self, sandbox):
        bot = GenBot(adapt=lambda sql: sql.replace("clients", "customers"))
        got = mine_solution_sql([post(1, "SELECT name FROM clients")], "shop", sandbox, bot.backend)
        assert got.accepted[0].solution_sql == ("SELECT name FROM customers",)
        assert got.accepted[0].raw_sql == "SELECT name FROM clients"


class TestIssue:
    def test_accepted_after_feedback(self, sandbox):
        bot = GenBot(weak_issues=1)
        prop = synthesize_issue([BERLIN], "shop", sandbox, bot.backend)
        assert prop.iterations == 2
        assert prop.issue_sql == ("SELECT name FROM customers",)
        second = [c for c in bot.backend.calls if c.metadata["role"] == "issue"][1]
        assert "issue not caught" in second.prompt_text

    def test_rejected_after_max_iter(self, sandbox):
        bot = GenBot(weak_issues=3)
        with pytest.raises(GenerationRejected) as err:
            synthesize_issue([BERLIN], "shop", sandbox, bot.backend, max_iter=3)
        assert (err.value.stage, err.value.reason, err.value.iterations) == ("issue", "issue not caught", 3)
        assert sum(c.metadata["role"] == "issue" for c in bot.backend.calls) == 3

    def test_unparseable_proposal(self, sandbox):
        from sqlfix.gateway import ScriptedBackend

        with pytest.raises(GenerationRejected, match="not JSON"):
            synthesize_issue([BERLIN], "shop", sandbox, ScriptedBackend(lambda r: "no idea"), max_iter=2)


class TestUserQuery:
    def draft(self, tasks_by_id):
        return tasks_by_id["shop-q01-missing-where"]

    def test_first_round(self, sandbox, tasks_by_id):
        q, rounds = generate_user_query(self.draft(tasks_by_id), sandbox, GenBot().backend)
        assert rounds == 1 and "too many rows" in q

    def test_consistency_vetoes_unknown_table(self, sandbox, tasks_by_id):
        bot = GenBot(rejected_queries=2)
        q, rounds = generate_user_query(self.draft(tasks_by_id), sandbox, bot.backend)
        assert rounds == 3 and "ghost_table" not in q

    def test_all_rounds_rejected(self, sandbox, tasks_by_id):
        with pytest.raises(GenerationRejected) as err:
            generate_user_query(self.draft(tasks_by_id), sandbox, GenBot(rejected_queries=3).backend)
        assert err.value.stage == "user_query" and "ghost_table" in err.value.reason


class TestBuild:
    CORPUS = [post(i, BERLIN.replace("Berlin", city)) for i, city in
              enumerate(["Berlin", "Paris", "Lisbon", "Madrid", "Rome"], 1)]

    def test_stops_at_target(self, sandbox):
        res = build_instances(self.CORPUS, ["shop"], sandbox, GenBot().backend, target_size=3)
        assert len(res.instances) == 3 and res.report.stopped_early
        assert res.report.posts_seen == 4

    def test_instances_pass_red_team_independently(self, sandbox):
        res = build_instances(self.CORPUS, ["shop"], sandbox, GenBot(weak_issues=1).backend, target_size=10)
        assert not res.report.stopped_early
        for inst in res.instances:
            assert red_team_check(sandbox, inst.task).valid
            assert 1 <= inst.provenance.issue_iterations <= 3
        # cities without customers fail the execution gate
        assert {r.reason for r in res.report.rejects} == {"null result"}
        assert [i.task.task_id for i in res.instances] == ["gym-p1-1-shop", "gym-p2-1-shop", "gym-p4-1-shop"]

    def test_exclusions(self, sandbox, tmp_path):
        path = tmp_path / "exclude.txt"
        path.write_text("p1  # leaked\n\ndb:other\np3\n")
        excl = ExclusionList.from_file(path)
        assert excl.sources == {"p1", "p3"} and excl.databases == {"other"}
        res = build_instances(self.CORPUS, ["shop"], sandbox, GenBot().backend, excl, target_size=10)
        assert {i.provenance.source_id for i in res.instances} == {"p2", "p4"}
        assert res.report.posts_excluded == 2

    def test_reserved_and_excluded_dbs_never_used(self, sandbox):
        bot = GenBot()
        res = build_instances(self.CORPUS, ["shop"], sandbox, bot.backend, ExclusionList(),
                              target_size=10, reserved_dbs=["shop"])
        assert res.instances == [] and not bot.backend.calls
        res = build_instances(self.CORPUS, ["shop"], sandbox, bot.backend,
                              ExclusionList(databases=frozenset({"shop"})), target_size=10)
        assert res.instances == []

    def test_rejections_are_reported(self, sandbox):
        res = build_instances(self.CORPUS[:1], ["shop"], sandbox, GenBot(weak_issues=5).backend, target_size=1)
        assert res.instances == []
        assert res.report.rejects_by_stage() == {"issue": 1}

    def test_write_dataset(self, sandbox, tmp_path):
        res = build_instances(self.CORPUS, ["shop"], sandbox, GenBot().backend, target_size=2)
        paths = write_dataset(res, tmp_path)
        rows = [json.loads(l) for l in paths["tasks"].read_text().splitlines()]
        assert [TaskInstance.from_dict(r).task_id for r in rows] == [i.task.task_id for i in res.instances]
        prov = [json.loads(l) for l in paths["provenance"].read_text().splitlines()]
        assert prov[0]["source_id"] == "p1" and prov[0]["query_rounds"] == 1
        assert json.loads(paths["rejects"].read_text())["emitted"] == 2


def test_load_corpus(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps({"source_id": 7, "title": "t", "body": "b"}) + "\n")
    assert load_corpus(path) == [CorpusPost("7", "t", "b")]
