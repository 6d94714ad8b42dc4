"""Command-line entry point: ``sqlfix <command> [options]``.

Every run writes ``manifest.json`` and ``report.json`` into ``--out``.
``report.json`` separates a deterministic ``payload`` from wall-clock
``timing`` so two runs with the same inputs and seed produce identical
payloads. Figures are written as PNG files beside the report.

Option values resolve in this order: command-line flag, then an
``SQLFIX_<OPTION>`` environment variable (e.g. ``SQLFIX_MAX_TURNS``), then
the ``--config`` file (YAML or JSON, keys spelled like the flags with
underscores), then built-in defaults.

Exit codes: 0 completed run, 1 usage error, 2 setup or environment failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import yaml

from . import FIXTURE_DATABASES, __version__, plotting
from .agent import AgentBackends, AgentConfig, AgentMode, baseline_fix, run_episode
from .domain import DONE, Category, TaskFormatError, TaskInstance, load_tasks, write_jsonl
from .evaluator import EvalOptions, evaluate_dataset, evaluate_task, red_team_check
from .gateway import Backend, CompletionRequest, GatewayError, RemoteBackend, ScriptedBackend
from .rewind import ExclusionList, build_instances, load_corpus, write_dataset
from .sandbox import IsolationMode, Limits, SandboxError, default_sandbox
from .stats import FIELDS, build_report, tokens
from .trajectories import (
    CostModel,
    StrategyConfig,
    StrategyKind,
    collect,
    export_training,
    read_trajectories,
    write_trajectories,
)

log = logging.getLogger("sqlfix")

EXIT_OK, EXIT_USAGE, EXIT_SETUP = 0, 1, 2
ENV_PREFIX = "SQLFIX_"

DEFAULTS: dict[str, Any] = {
    "out": "sqlfix-out",
    "seed": 0,
    "workers": os.cpu_count() or 1,
    "db_root": str(FIXTURE_DATABASES),
    "isolation": None,
    "pg_dsn": None,
    "max_turns": 5,
    "max_tries": None,
    "temperature": None,
    "strategy": "Baseline",
    "mode": "SqlAct",
    "endpoint": "http://localhost:8000/v1",
    "api_key_env": "SQLFIX_API_KEY",
    "timeout_ms": 30000,
    "max_iter": 3,
    "target_size": 100,
    "ngram": 3,
    "price_in": 0.0,
    "price_out": 0.0,
}
_TYPES = {"seed": int, "workers": int, "max_turns": int, "max_tries": int, "temperature": float,
          "timeout_ms": int, "max_iter": int, "target_size": int, "ngram": int,
          "price_in": float, "price_out": float}


class UsageError(Exception):
    pass


class SetupError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    datasets: list[str]
    backends: list[str]
    out_dir: str
    seed: int
    options: dict = field(default_factory=dict)
    version: str = __version__


class Settings:
    """Resolved option values (flag > env > config file > default)."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config: dict = {}
        if getattr(args, "config", None):
            try:
                loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, yaml.YAMLError) as exc:
                raise SetupError(f"cannot read config {args.config}: {exc}") from None
            if loaded is not None and not isinstance(loaded, dict):
                raise SetupError(f"config {args.config} must be a mapping")
            self.config = loaded or {}

    def get(self, key: str) -> Any:
        value = getattr(self.args, key, None)
        if value is None:
            env = os.environ.get(ENV_PREFIX + key.upper())
            if env is not None:
                value = env
            elif key in self.config:
                value = self.config[key]
            else:
                value = DEFAULTS.get(key)
        if value is not None and key in _TYPES:
            try:
                value = _TYPES[key](value)
            except (TypeError, ValueError):
                raise UsageError(f"option {key}: invalid value {value!r}") from None
        return value


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file of option defaults")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="parallel tasks (default: CPU count)")
    common.add_argument("--db-root", dest="db_root", help="directory of <db>.sql / <db>.sqlite files")
    common.add_argument("--isolation", choices=[m.value for m in IsolationMode])
    common.add_argument("--pg-dsn", dest="pg_dsn", help="libpq DSN enabling the PostgreSQL executor")
    common.add_argument("--timeout-ms", dest="timeout_ms", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--backend", help="scripted:<file>, remote:<model> or oracle")
    backend.add_argument("--endpoint", help="chat-completions base URL for remote backends")
    backend.add_argument("--api-key-env", dest="api_key_env")

    p = _Parser(prog="sqlfix", description="SQL issue debugging toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("eval", parents=[common], help="score predictions against tasks")
    e.add_argument("--tasks", required=True)
    e.add_argument("--pred", required=True, help="JSON {task_id: sql} or JSONL {task_id, pred_sql}")

    a = sub.add_parser("agent", parents=[common, backend], help="run agent episodes and score them")
    a.add_argument("--tasks", required=True)
    a.add_argument("--mode", choices=[m.value for m in AgentMode] + ["Baseline"])
    a.add_argument("--max-turns", dest="max_turns", type=int)
    a.add_argument("--temperature", type=float)
    a.add_argument("--gtm", action="store_true", help="thoughts from --backend, actions from --base-backend")
    a.add_argument("--base-backend", dest="base_backend")

    r = sub.add_parser("rewind", parents=[common, backend], help="generate gym instances from a post corpus")
    r.add_argument("--corpus", required=True, help="JSONL of {source_id, title, body}")
    r.add_argument("--db", action="append", dest="dbs", help="training database (repeatable; default: all)")
    r.add_argument("--reserved-db", action="append", dest="reserved", default=[])
    r.add_argument("--exclude", help="exclusion list file")
    r.add_argument("--target-size", dest="target_size", type=int)
    r.add_argument("--max-iter", dest="max_iter", type=int)

    c = sub.add_parser("collect", parents=[common, backend], help="collect successful trajectories")
    c.add_argument("--tasks", required=True)
    c.add_argument("--strategy", choices=[k.value for k in StrategyKind])
    c.add_argument("--max-tries", dest="max_tries", type=int)
    c.add_argument("--temperature", type=float)
    c.add_argument("--max-turns", dest="max_turns", type=int)
    c.add_argument("--checkpoint", help="resumable JSONL checkpoint")
    c.add_argument("--price-in", dest="price_in", type=float, help="cost per 1k input tokens")
    c.add_argument("--price-out", dest="price_out", type=float, help="cost per 1k output tokens")

    t = sub.add_parser("redteam", parents=[common], help="check solution passes and issue fails")
    t.add_argument("--tasks", required=True)

    s = sub.add_parser("stats", parents=[common], help="dataset statistics and figures")
    s.add_argument("--tasks", required=True, action="append", help="[name=]path, repeatable")
    s.add_argument("--success", help="JSON {corpus name: success rate} for the correlation")
    s.add_argument("--ngram", type=int)

    x = sub.add_parser("export", parents=[common], help="export passing trajectories as chat records")
    x.add_argument("--trajectories", required=True)
    x.add_argument("--tasks", help="task file; adds the opening prompt to each record")
    return p


# -- helpers ----------------------------------------------------------------------------

def _load_tasks(path: str) -> list[TaskInstance]:
    try:
        tasks = load_tasks(path)
    except FileNotFoundError:
        raise SetupError(f"tasks not found: {path}") from None
    except (TaskFormatError, json.JSONDecodeError) as exc:
        raise SetupError(f"cannot load tasks from {path}: {exc}") from None
    if not tasks:
        raise SetupError(f"no tasks in {path}")
    return tasks


def _load_predictions(path: str) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise SetupError(f"predictions not found: {path}")
    text = p.read_text(encoding="utf-8")
    try:
        if p.suffix == ".jsonl":
            out = {}
            for line in text.splitlines():
                if line.strip():
                    rec = json.loads(line)
                    out[rec["task_id"]] = rec.get("pred_sql", rec.get("final_sql"))
            return out
        data = json.loads(text)
    except (json.JSONDecodeError, KeyError) as exc:
        raise SetupError(f"cannot parse predictions {path}: {exc}") from None
    if not isinstance(data, dict):
        raise SetupError("predictions JSON must map task_id to SQL")
    return data


def oracle_backend(tasks: Sequence[TaskInstance]) -> ScriptedBackend:
    """Replies DONE at once and then gives each task's solution as the final answer."""
    by_id = {t.task_id: t for t in tasks}

    def respond(req: CompletionRequest) -> str:
        role = req.metadata.get("role")
        task = by_id.get(req.metadata.get("task_id"))
        if role in ("final", "baseline") and task:
            return "```sql\n" + ";\n".join(task.solution_sql) + "\n```"
        if role == "plan" and task:
            return "1. compare the faulty statements with the expected behaviour\n2. apply the fix"
        if role == "toolact" and task:
            return "<thought>submit</thought><action>Solution Query: " + "; ".join(task.solution_sql) + "</action>"
        if role == "action":
            return f"<action>{DONE}</action>"
        return f"<thought>Nothing left to check.</thought><action>{DONE}</action>"

    return ScriptedBackend(respond, "oracle")


def _backend(spec: str | None, settings: Settings, tasks: Sequence[TaskInstance] = ()) -> Backend:
    if not spec:
        raise UsageError("--backend is required for this command")
    kind, _, arg = spec.partition(":")
    if kind == "oracle":
        return oracle_backend(tasks)
    if kind == "scripted":
        try:
            return ScriptedBackend.from_file(arg)
        except (OSError, ValueError) as exc:
            raise SetupError(f"cannot load scripted backend {arg}: {exc}") from None
    if kind == "remote":
        if not arg:
            raise UsageError("remote backend needs a model: remote:<model>")
        return RemoteBackend(f"remote-{arg}", arg, settings.get("endpoint"), settings.get("api_key_env"))
    raise UsageError(f"unknown backend spec {spec!r}")


def _sandbox(settings: Settings):
    root = Path(settings.get("db_root"))
    if not root.is_dir():
        raise SetupError(f"database root not found: {root}")
    return default_sandbox(root, settings.get("pg_dsn"))


def _mode(settings: Settings) -> IsolationMode | None:
    v = settings.get("isolation")
    return IsolationMode(v) if v else None


def _pmap(fn, items, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _per_category_plot(per_category: Mapping[str, Mapping[str, int]], out: Path) -> Path:
    data = {c: (v["n_passed"], v["n_total"]) for c, v in per_category.items()}
    return plotting.plot_success_by_category(data, out / "sr_by_category.png")


def _write_outputs(out: Path, manifest: RunManifest, payload: dict, started: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    report = {
        "payload": payload,
        "timing": {
            "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "elapsed_s": round(time.perf_counter() - started, 3),
        },
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                                     encoding="utf-8")


def _manifest(args, settings: Settings, datasets: list[str], backends: list[str], options: dict) -> RunManifest:
    return RunManifest(args.command, getattr(args, "config", None), datasets, backends,
                       str(settings.get("out")), settings.get("seed"), options)


# -- commands ---------------------------------------------------------------------------

def cmd_eval(args, settings: Settings, out: Path) -> tuple[dict, list[str], str]:
    tasks = _load_tasks(args.tasks)
    preds = _load_predictions(args.pred)
    sandbox = _sandbox(settings)
    options = EvalOptions(mode=_mode(settings), timeout_ms=settings.get("timeout_ms"))
    result = evaluate_dataset(sandbox, tasks, preds, options, workers=settings.get("workers"))
    report = result.report.to_dict()
    write_jsonl(out / "outcomes.jsonl", [o.to_dict() for o in result.outcomes])
    _per_category_plot(report["per_category"], out)
    payload = {"command": "eval", "sr": report, "failed": [o.task_id for o in result.outcomes if not o.passed]}
    summary = f"SR {report['sr_percent']}% ({report['n_passed']}/{report['n_total']})"
    return payload, [args.tasks, args.pred], summary


def cmd_agent(args, settings: Settings, out: Path):
    tasks = _load_tasks(args.tasks)
    sandbox = _sandbox(settings)
    primary = _backend(args.backend, settings, tasks)
    base = _backend(args.base_backend, settings, tasks) if args.base_backend else None
    if args.gtm and base is None:
        raise UsageError("--gtm needs --base-backend")
    mode = settings.get("mode")
    temperature = settings.get("temperature")
    cfg = AgentConfig(
        max_turns=settings.get("max_turns"),
        mode=AgentMode.SQL_ACT if mode == "Baseline" else AgentMode(mode),
        gtm=args.gtm,
        limits=Limits(timeout_ms=settings.get("timeout_ms")),
        seed=settings.get("seed"),
        **({"temperature": temperature} if temperature is not None else {}),
    )
    isolation = _mode(settings)
    options = EvalOptions(mode=isolation, timeout_ms=settings.get("timeout_ms"))

    def one(task: TaskInstance):
        with sandbox.open_session(task, isolation) as session:
            if mode == "Baseline":
                traj = baseline_fix(task, session, primary, cfg)
            else:
                traj = run_episode(task, session, AgentBackends(primary, base), cfg)
        passed = bool(traj.final_sql) and evaluate_task(sandbox, task, traj.final_sql, options).passed
        return traj, passed

    results = _pmap(one, tasks, settings.get("workers"))
    preds = {t.task_id: tr.final_sql for t, (tr, _) in zip(tasks, results) if tr.final_sql}
    (out / "predictions.json").write_text(json.dumps(preds, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    trajs = [tr for tr, _ in results]
    write_trajectories(out / "trajectories.jsonl",
                       [replace(tr, passed=p) if tr.final_sql else tr for tr, p in results])
    per_cat: dict[str, dict[str, int]] = {}
    for task, (_, p) in zip(tasks, results):
        d = per_cat.setdefault(task.category.value, {"n_total": 0, "n_passed": 0})
        d["n_total"] += 1
        d["n_passed"] += int(p)
    _per_category_plot(per_cat, out)
    n_pass = sum(p for _, p in results)
    payload = {
        "command": "agent", "mode": mode, "gtm": args.gtm, "n_tasks": len(tasks), "n_passed": n_pass,
        "sr": n_pass / len(tasks), "per_category": dict(sorted(per_cat.items())),
        "tokens_in": sum(t.tokens_in for t in trajs), "tokens_out": sum(t.tokens_out for t in trajs),
        "failures": {t.task_id: t.failure for t in trajs if t.failure},
        "turns": {t.task_id: len(t.steps) for t in trajs},
    }
    backends = [primary.backend_id] + ([base.backend_id] if base else [])
    return payload, [args.tasks], f"{n_pass}/{len(tasks)} tasks solved", backends


def cmd_rewind(args, settings: Settings, out: Path):
    try:
        corpus = load_corpus(args.corpus)
        exclusion = ExclusionList.from_file(args.exclude) if args.exclude else ExclusionList()
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise SetupError(f"cannot load rewind inputs: {exc}") from None
    sandbox = _sandbox(settings)
    backend = _backend(args.backend, settings)
    dbs = args.dbs or DatabaseNames(settings).all()
    result = build_instances(corpus, dbs, sandbox, backend, exclusion, settings.get("target_size"),
                             settings.get("max_iter"), args.reserved)
    write_dataset(result, out)
    payload = {"command": "rewind", "databases": dbs, **result.report.to_dict(),
               "task_ids": [g.task.task_id for g in result.instances]}
    hist: dict[str, int] = {c.value: 0 for c in Category}
    for g in result.instances:
        hist[g.task.category.value] += 1
    payload["categories"] = hist
    if result.instances:
        plotting.plot_category_histogram({"generated": hist}, out / "categories.png")
    return payload, [args.corpus], f"{len(result.instances)} instance(s) emitted", [backend.backend_id]


class DatabaseNames:
    def __init__(self, settings: Settings):
        self.root = Path(settings.get("db_root"))

    def all(self) -> list[str]:
        names = {p.stem for p in self.root.iterdir() if p.suffix in (".sql", ".sqlite", ".db")}
        return sorted(names)


def cmd_collect(args, settings: Settings, out: Path):
    tasks = _load_tasks(args.tasks)
    sandbox = _sandbox(settings)
    teacher = _backend(args.backend, settings, tasks)
    strategy = StrategyConfig(StrategyKind(settings.get("strategy")), settings.get("max_tries"),
                              settings.get("temperature"))
    agent = AgentConfig(max_turns=settings.get("max_turns"), limits=Limits(timeout_ms=settings.get("timeout_ms")))
    options = EvalOptions(mode=_mode(settings), timeout_ms=settings.get("timeout_ms"))
    result = collect(tasks, teacher, sandbox, strategy, agent, options, seed=settings.get("seed"),
                     workers=settings.get("workers"), checkpoint=args.checkpoint,
                     cost_model=CostModel(settings.get("price_in"), settings.get("price_out")))
    write_trajectories(out / "trajectories.jsonl", result.trajectories)
    write_jsonl(out / "plans.jsonl", [{"task_id": k, "plan": v} for k, v in result.plans.items()])
    plotting.plot_tries([o.tries for o in result.outcomes], out / "tries.png")
    payload = {
        "command": "collect",
        "strategy": asdict(strategy) | {"kind": strategy.kind.value},
        "report": result.report.to_dict(timing=False),
        "retained": [t.task_id for t in result.trajectories],
    }
    r = result.report
    summary = f"{r.strategy}: {r.successful_traj}/{r.n_instances} trajectories, avg tries {r.avg_tries:.2f}"
    if r.resumable:
        summary += " (incomplete: teacher unavailable, rerun with --checkpoint to resume)"
    return payload, [args.tasks], summary, [teacher.backend_id]


def cmd_redteam(args, settings: Settings, out: Path):
    tasks = _load_tasks(args.tasks)
    sandbox = _sandbox(settings)
    options = EvalOptions(mode=_mode(settings), timeout_ms=settings.get("timeout_ms"))
    checks = _pmap(lambda t: red_team_check(sandbox, t, options), tasks, settings.get("workers"))
    rows = [{"task_id": c.task_id, "valid": c.valid, "solution_passes": c.solution_passes,
             "issue_fails": c.issue_fails, "reason": c.reason} for c in checks]
    n_valid = sum(c.valid for c in checks)
    payload = {"command": "redteam", "n_tasks": len(tasks), "n_valid": n_valid, "tasks": rows}
    return payload, [args.tasks], f"{n_valid}/{len(tasks)} tasks valid"


def cmd_stats(args, settings: Settings, out: Path):
    corpora = {}
    for item in args.tasks:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        corpora[name] = _load_tasks(path)
    success = None
    if args.success:
        try:
            success = json.loads(Path(args.success).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SetupError(f"cannot read success rates: {exc}") from None
    report = build_report(corpora, success, n=settings.get("ngram"))
    payload = {"command": "stats", **report.to_dict()}
    plotting.plot_category_histogram({c.name: c.categories for c in report.corpora}, out / "categories.png")
    plotting.plot_length_histogram(
        {name: [len(tokens(FIELDS["user_query"](t))) for t in ts] for name, ts in corpora.items()},
        out / "query_lengths.png")
    if report.correlation:
        c = report.correlation
        (out / "correlation_series.json").write_text(json.dumps(c, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        plotting.plot_diversity_vs_success(c["names"], c["diversity"], c["success"], c["r"],
                                           out / "diversity_vs_success.png")
    summary = "; ".join(f"{c.name}: {c.n_tasks} tasks, query mean {c.lengths['user_query'].mean:.2f} tokens"
                        for c in report.corpora)
    return payload, [p for p in args.tasks], summary


def cmd_export(args, settings: Settings, out: Path):
    try:
        trajs = read_trajectories(args.trajectories)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise SetupError(f"cannot read trajectories: {exc}") from None
    tasks = {t.task_id: t for t in _load_tasks(args.tasks)} if args.tasks else {}
    schemas = {}
    if tasks:
        sandbox = _sandbox(settings)
        for tid, task in tasks.items():
            with sandbox.open_session(task) as session:
                schemas[tid] = session.schema_ddl()
    passing = [t for t in trajs if t.passed is True]
    n = export_training(passing, out / "training.jsonl", tasks, schemas)
    payload = {"command": "export", "records": n, "skipped_not_passing": len(trajs) - len(passing)}
    return payload, [args.trajectories] + ([args.tasks] if args.tasks else []), f"{n} record(s) exported"


COMMANDS = {
    "eval": cmd_eval, "agent": cmd_agent, "rewind": cmd_rewind, "collect": cmd_collect,
    "redteam": cmd_redteam, "stats": cmd_stats, "export": cmd_export,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        settings = Settings(args)
        out = Path(settings.get("out"))
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, settings, out)
        payload, datasets, summary = result[:3]
        backends = result[3] if len(result) > 3 else []
        options = {k: settings.get(k) for k in sorted(DEFAULTS) if k not in ("out", "workers")}
        _write_outputs(out, _manifest(args, settings, datasets, backends, options), payload, started)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sqlfix: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SetupError, SandboxError, GatewayError, FileNotFoundError) as exc:
        print(f"sqlfix: setup failure: {exc}", file=sys.stderr)
        return EXIT_SETUP
    print(f"{args.command}: {summary}")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
