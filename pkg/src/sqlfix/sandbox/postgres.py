"""PostgreSQL executor (psycopg 3).

TransactionRollback keeps the whole episode in one transaction and wraps
every statement in its own savepoint so an engine error does not abort the
episode. TemplateCopy clones the database with ``CREATE DATABASE ...
TEMPLATE`` and drops the clone on reset/close.
"""

from __future__ import annotations

import threading
import time
import uuid
from typing import Sequence

from ..domain import Dialect
from .base import ExecObservation, IsolationMode, PreprocessError, Status, normalize_value
from .sqlite import DatabaseCatalog

try:
    import psycopg
    from psycopg import errors as pg_errors, sql as pg_sql
    from psycopg.conninfo import make_conninfo
except ImportError:  # optional dependency
    psycopg = None

_EPISODE = "sqlfix_episode"
_STMT = "sqlfix_stmt"

_SCHEMA_QUERY = """
SELECT c.table_name, c.column_name, c.data_type, c.is_nullable, c.column_default
FROM information_schema.columns c
JOIN information_schema.tables t
  ON t.table_schema = c.table_schema AND t.table_name = c.table_name
WHERE c.table_schema = 'public' AND t.table_type IN ('BASE TABLE', 'VIEW')
  AND (%(table)s::text IS NULL OR lower(c.table_name) = lower(%(table)s::text))
ORDER BY c.table_name, c.ordinal_position
"""


def _require_driver():
    if psycopg is None:
        raise RuntimeError("PostgresLike dialect needs the 'psycopg' package (pip install 'psycopg[binary]')")


class _PgHandle:
    cancel_supported = True

    def __init__(self, executor: "PostgresExecutor", db_ref: str, mode: IsolationMode, preprocess: Sequence[str]):
        self.ex = executor
        self.db_ref = db_ref
        self.mode = mode
        self.preprocess = tuple(preprocess)
        self.clone: str | None = None
        self.conn = None

    def prepare(self) -> None:
        if self.mode is IsolationMode.TEMPLATE_COPY:
            self.clone = f"sqlfix_{uuid.uuid4().hex[:12]}"
            self.ex._create_clone(self.clone, self.db_ref)
            self.conn = psycopg.connect(self.ex._conninfo(self.clone), autocommit=True)
        else:
            self.conn = psycopg.connect(self.ex._conninfo(self.db_ref), autocommit=False)
        for i, stmt in enumerate(self.preprocess, 1):
            obs = self.run(stmt, None, 0)
            if not obs.ok:
                raise PreprocessError(i, stmt, obs.error_text or "")
        if self.mode is IsolationMode.TRANSACTION_ROLLBACK:
            self.conn.execute(f"SAVEPOINT {_EPISODE}")

    def restore(self) -> None:
        if self.mode is IsolationMode.TRANSACTION_ROLLBACK:
            self.conn.execute(f"ROLLBACK TO SAVEPOINT {_EPISODE}")
        else:
            self._drop()
            self.prepare()

    def _drop(self) -> None:
        if self.conn is not None:
            self.conn.close()
            self.conn = None
        if self.clone is not None:
            self.ex._drop_clone(self.clone)
            self.clone = None

    def release(self) -> None:
        if self.mode is IsolationMode.TRANSACTION_ROLLBACK:
            if self.conn is not None:
                try:
                    self.conn.rollback()
                finally:
                    self.conn.close()
                    self.conn = None
        else:
            self._drop()

    def run(self, sql: str, timeout_ms: int | None, row_cap: int | None) -> ExecObservation:
        start = time.perf_counter()
        txn = self.mode is IsolationMode.TRANSACTION_ROLLBACK
        conn = self.conn
        with conn.cursor() as cur:
            if txn:
                cur.execute(f"SAVEPOINT {_STMT}")
                cur.execute(f"SET LOCAL statement_timeout = {int(timeout_ms or 0)}")
            else:
                cur.execute(f"SET statement_timeout = {int(timeout_ms or 0)}")
            try:
                cur.execute(sql)
                if cur.description:
                    cols = tuple(d.name for d in cur.description)
                    if row_cap is None:
                        raw = cur.fetchall()
                        truncated = False
                    else:
                        raw = cur.fetchmany(row_cap + 1)
                        truncated = len(raw) > row_cap
                        raw = raw[:row_cap]
                    rows = tuple(tuple(normalize_value(v) for v in r) for r in raw)
                    obs = ExecObservation(Status.ROWS, cols, rows, truncated=truncated)
                else:
                    obs = ExecObservation(Status.AFFECTED,
                                          affected_count=cur.rowcount if cur.rowcount >= 0 else None)
                if txn:
                    cur.execute(f"RELEASE SAVEPOINT {_STMT}")
            except pg_errors.QueryCanceled:
                if txn:
                    cur.execute(f"ROLLBACK TO SAVEPOINT {_STMT}")
                obs = ExecObservation(Status.TIMEOUT, error_text=f"statement cancelled after {timeout_ms} ms")
            except psycopg.Error as exc:
                if txn:
                    cur.execute(f"ROLLBACK TO SAVEPOINT {_STMT}")
                obs = ExecObservation(Status.ERROR, error_text=str(exc).strip() or type(exc).__name__)
        elapsed = (time.perf_counter() - start) * 1000
        return ExecObservation(obs.status, obs.columns, obs.rows, obs.affected_count,
                               obs.error_text, obs.truncated, elapsed)

    def _describe(self, table: str | None) -> str:
        with self.conn.cursor() as cur:
            if self.mode is IsolationMode.TRANSACTION_ROLLBACK:
                cur.execute(f"SAVEPOINT {_STMT}")
            cur.execute(_SCHEMA_QUERY, {"table": table})
            rows = cur.fetchall()
            if self.mode is IsolationMode.TRANSACTION_ROLLBACK:
                cur.execute(f"RELEASE SAVEPOINT {_STMT}")
        tables: dict[str, list[str]] = {}
        for tname, col, dtype, nullable, default in rows:
            line = f"    {col} {dtype}"
            if default is not None:
                line += f" DEFAULT {default}"
            if nullable == "NO":
                line += " NOT NULL"
            tables.setdefault(tname, []).append(line)
        return "\n\n".join(f"CREATE TABLE {t} (\n" + ",\n".join(cols) + "\n);" for t, cols in tables.items())

    def schema_ddl(self) -> str:
        return self._describe(None)

    def table_ddl(self, table: str) -> str | None:
        return self._describe(table) or None

    def table_names(self) -> list[str]:
        with self.conn.cursor() as cur:
            cur.execute("SELECT table_name FROM information_schema.tables "
                        "WHERE table_schema = 'public' AND table_type = 'BASE TABLE' ORDER BY table_name")
            return [r[0] for r in cur.fetchall()]

    def sample_sql(self, table: str, n: int) -> str:
        return 'SELECT * FROM "{}" LIMIT {}'.format(table.replace('"', '""'), int(n))


class PostgresExecutor:
    """Executor for a reachable PostgreSQL server.

    ``dsn`` is a libpq connection string without a database name; each
    session connects to the database named by the task's ``db_ref``. When a
    catalog is given, missing databases are created from ``<db_ref>.sql``.
    """

    dialect = Dialect.POSTGRES_LIKE
    default_mode = IsolationMode.TRANSACTION_ROLLBACK
    supported_modes = (IsolationMode.TRANSACTION_ROLLBACK, IsolationMode.TEMPLATE_COPY)

    def __init__(self, dsn: str, catalog: DatabaseCatalog | None = None, admin_db: str = "postgres"):
        _require_driver()
        self.dsn = dsn
        self.catalog = catalog
        self.admin_db = admin_db
        self._admin_lock = threading.Lock()
        self._provisioned: set[str] = set()

    def shares_database(self, mode: IsolationMode) -> bool:
        return False

    def _conninfo(self, dbname: str) -> str:
        return make_conninfo(self.dsn, dbname=dbname)

    def _admin(self):
        return psycopg.connect(self._conninfo(self.admin_db), autocommit=True)

    def ensure_database(self, db_ref: str) -> None:
        with self._admin_lock:
            if db_ref in self._provisioned:
                return
            with self._admin() as conn:
                exists = conn.execute("SELECT 1 FROM pg_database WHERE datname = %s", (db_ref,)).fetchone()
                if not exists:
                    script = self.catalog.script(db_ref) if self.catalog else None
                    if script is None:
                        raise FileNotFoundError(f"database {db_ref!r} does not exist and no script is available")
                    conn.execute(pg_sql.SQL("CREATE DATABASE {}").format(pg_sql.Identifier(db_ref)))
                    with psycopg.connect(self._conninfo(db_ref), autocommit=True) as db:
                        db.execute(script.read_text(encoding="utf-8"))
            self._provisioned.add(db_ref)

    def _create_clone(self, clone: str, template: str) -> None:
        # the template must have no other connections while it is copied
        with self._admin_lock, self._admin() as conn:
            for attempt in range(20):
                try:
                    conn.execute(pg_sql.SQL("CREATE DATABASE {} TEMPLATE {}").format(
                        pg_sql.Identifier(clone), pg_sql.Identifier(template)))
                    return
                except pg_errors.ObjectInUse:
                    time.sleep(0.05 * (attempt + 1))
            raise RuntimeError(f"template database {template!r} stayed busy")

    def _drop_clone(self, clone: str) -> None:
        with self._admin_lock, self._admin() as conn:
            conn.execute(pg_sql.SQL("DROP DATABASE IF EXISTS {} WITH (FORCE)").format(pg_sql.Identifier(clone)))

    def open(self, db_ref: str, mode: IsolationMode, preprocess: Sequence[str]) -> _PgHandle:
        self.ensure_database(db_ref)
        handle = _PgHandle(self, db_ref, mode, preprocess)
        try:
            handle.prepare()
        except BaseException:
            handle.release()
            raise
        return handle
