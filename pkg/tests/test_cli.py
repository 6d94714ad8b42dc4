import argparse
import json

import pytest

from sqlfix import FIXTURE_TASKS
from sqlfix.cli import DEFAULTS, EXIT_OK, EXIT_SETUP, EXIT_USAGE, Settings, dispatch, main

TASKS = str(FIXTURE_TASKS)
BERLIN = "SELECT name FROM customers WHERE city = 'Berlin'"


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    rc = dispatch([*argv, "--out", str(out), "--workers", "2"])
    return rc, out


def payload(out):
    return json.loads((out / "report.json").read_text())["payload"]


def test_eval_oracle_predictions_score_full(tmp_path, fixture_tasks):
    pred = tmp_path / "pred.json"
    pred.write_text(json.dumps({t.task_id: list(t.solution_sql) for t in fixture_tasks}))
    rc, out = run(tmp_path, "eval", "--tasks", TASKS, "--pred", str(pred))
    assert rc == EXIT_OK
    p = payload(out)
    assert p["sr"]["sr"] == 1.0 and p["failed"] == []
    assert (out / "sr_by_category.png").stat().st_size > 0
    assert len((out / "outcomes.jsonl").read_text().splitlines()) == len(fixture_tasks)


def test_eval_jsonl_predictions_with_failures(tmp_path, fixture_tasks):
    pred = tmp_path / "pred.jsonl"
    pred.write_text("\n".join(json.dumps({"task_id": t.task_id, "pred_sql": list(t.issue_sql)})
                              for t in fixture_tasks[:3]))
    rc, out = run(tmp_path, "eval", "--tasks", TASKS, "--pred", str(pred))
    assert rc == EXIT_OK and payload(out)["sr"]["n_passed"] == 0


def test_redteam_all_valid(tmp_path, fixture_tasks):
    rc, out = run(tmp_path, "redteam", "--tasks", TASKS)
    assert rc == EXIT_OK
    assert payload(out)["n_valid"] == len(fixture_tasks)


@pytest.mark.parametrize("mode", ["SqlAct", "ToolAct", "Baseline"])
def test_agent_with_oracle(tmp_path, fixture_tasks, mode):
    rc, out = run(tmp_path, "agent", "--tasks", TASKS, "--backend", "oracle", "--mode", mode)
    assert rc == EXIT_OK
    p = payload(out)
    assert p["n_passed"] == len(fixture_tasks)
    preds = json.loads((out / "predictions.json").read_text())
    assert set(preds) == {t.task_id for t in fixture_tasks}


def test_agent_gtm_requires_base(tmp_path):
    rc, _ = run(tmp_path, "agent", "--tasks", TASKS, "--backend", "oracle", "--gtm")
    assert rc == EXIT_USAGE


def test_collect_and_export(tmp_path, fixture_tasks):
    rc, out = run(tmp_path, "collect", "--tasks", TASKS, "--backend", "oracle", "--strategy", "FPlan")
    assert rc == EXIT_OK
    rep = payload(out)["report"]
    assert rep["successful_traj"] == len(fixture_tasks) and rep["avg_tries"] == 1.0
    assert (out / "tries.png").exists()
    assert len((out / "plans.jsonl").read_text().splitlines()) == len(fixture_tasks)
    rc, exp = run(tmp_path, "export", "--trajectories", str(out / "trajectories.jsonl"), "--tasks", TASKS,
                  name="exp")
    assert rc == EXIT_OK and payload(exp)["records"] == len(fixture_tasks)
    header = json.loads((exp / "training.jsonl").read_text().splitlines()[0])
    assert header["records"] == len(fixture_tasks)


def test_rewind_with_rule_file(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text(json.dumps({"source_id": "q1", "title": "t", "body": f"```sql\n{BERLIN}\n```"}) + "\n")
    issue = {"issue_reason": "filter dropped", "issue_sql": ["SELECT name FROM customers"],
             "eval_script": {"test_cases": [{"kind": "ResultMatch", "reference_sql": [BERLIN]}]}}
    rules = tmp_path / "gen.json"
    rules.write_text(json.dumps({"rules": [
        {"role": "adapt", "reply": f"```sql\n{BERLIN}\n```"},
        {"role": "issue", "reply": "```json\n" + json.dumps(issue) + "\n```"},
        {"role": "user_query", "reply": "Why do I see customers from every city?"},
    ], "default": "YES"}))
    rc, out = run(tmp_path, "rewind", "--corpus", str(corpus), "--backend", f"scripted:{rules}",
                  "--target-size", "5")
    assert rc == EXIT_OK
    p = payload(out)
    assert p["task_ids"] == ["gym-q1-1-shop"] and p["emitted"] == 1
    assert (out / "tasks.jsonl").exists() and (out / "categories.png").exists()


def test_stats_with_correlation(tmp_path, fixture_tasks):
    success = tmp_path / "sr.json"
    half = tmp_path / "half.jsonl"
    repeated = [{**t.to_dict(), "user_query": "the totals in my report look wrong"} for t in fixture_tasks[:7]]
    half.write_text("\n".join(json.dumps(r) for r in repeated))
    success.write_text(json.dumps({"all": 0.4, "half": 0.6}))
    rc, out = run(tmp_path, "stats", "--tasks", f"all={TASKS}", "--tasks", str(half), "--success", str(success))
    assert rc == EXIT_OK
    p = payload(out)
    assert [c["name"] for c in p["corpora"]] == ["all", "half"]
    # the less diverse corpus has the higher rate, and two points always line up
    assert p["correlation"]["r"] == pytest.approx(-1.0)
    for png in ("categories.png", "query_lengths.png", "diversity_vs_success.png"):
        assert (out / png).exists()


def test_reports_are_reproducible(tmp_path):
    a = run(tmp_path, "collect", "--tasks", TASKS, "--backend", "oracle", "--seed", "3", name="a")[1]
    b = run(tmp_path, "collect", "--tasks", TASKS, "--backend", "oracle", "--seed", "3", name="b")[1]
    assert payload(a) == payload(b)
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["command"] == "collect"


class TestExitCodes:
    def test_unknown_subcommand(self, tmp_path):
        assert run(tmp_path, "frobnicate")[0] == EXIT_USAGE

    def test_missing_required_flag(self, tmp_path):
        assert run(tmp_path, "eval", "--tasks", TASKS)[0] == EXIT_USAGE

    def test_missing_tasks_file(self, tmp_path):
        assert run(tmp_path, "redteam", "--tasks", str(tmp_path / "nope"))[0] == EXIT_SETUP

    def test_missing_db_root(self, tmp_path):
        rc, _ = run(tmp_path, "redteam", "--tasks", TASKS, "--db-root", str(tmp_path / "nodb"))
        assert rc == EXIT_SETUP

    def test_bad_scripted_backend(self, tmp_path):
        rc, _ = run(tmp_path, "agent", "--tasks", TASKS, "--backend", f"scripted:{tmp_path / 'x.json'}")
        assert rc == EXIT_SETUP

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("- not a mapping\n")
        assert run(tmp_path, "redteam", "--tasks", TASKS, "--config", str(cfg))[0] == EXIT_SETUP

    def test_main_exits(self, tmp_path, monkeypatch):
        monkeypatch.setattr("sys.argv", ["sqlfix", "frobnicate"])
        with pytest.raises(SystemExit) as err:
            main()
        assert err.value.code == EXIT_USAGE


class TestPrecedence:
    def settings(self, tmp_path, **flags):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("max_turns: 7\nngram: 2\ntemperature: 0.3\n")
        return Settings(argparse.Namespace(config=str(cfg), **flags))

    def test_order(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SQLFIX_MAX_TURNS", "9")
        monkeypatch.setenv("SQLFIX_NGRAM", "4")
        s = self.settings(tmp_path, max_turns=2)
        assert s.get("max_turns") == 2          # flag
        assert s.get("ngram") == 4              # env over config
        assert s.get("temperature") == 0.3      # config over default
        assert s.get("max_iter") == DEFAULTS["max_iter"]

    def test_bad_env_value(self, tmp_path, monkeypatch):
        from sqlfix.cli import UsageError

        monkeypatch.setenv("SQLFIX_NGRAM", "three")
        with pytest.raises(UsageError):
            self.settings(tmp_path).get("ngram")
