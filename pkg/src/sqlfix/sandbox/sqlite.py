"""Embedded reference executor backed by the stdlib sqlite3 module."""

from __future__ import annotations

import os
import shutil
import sqlite3
import tempfile
import threading
import time
from pathlib import Path
from typing import Sequence

from ..domain import Dialect
from .base import ExecObservation, IsolationMode, PreprocessError, Status

_SAVEPOINT = "sqlfix_episode"


class DatabaseCatalog:
    """Resolves database identifiers to SQLite files under ``root``.

    ``<db_ref>.sqlite`` / ``<db_ref>.db`` files are used as-is; a
    ``<db_ref>.sql`` script is materialised once into a private cache file.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self._cache: dict[str, Path] = {}
        self._cache_dir: Path | None = None
        self._lock = threading.Lock()

    def names(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted({p.stem for p in self.root.iterdir() if p.suffix in (".sql", ".sqlite", ".db")})

    def script(self, db_ref: str) -> Path | None:
        p = self.root / f"{db_ref}.sql"
        return p if p.is_file() else None

    def resolve(self, db_ref: str) -> Path:
        with self._lock:
            if db_ref in self._cache:
                return self._cache[db_ref]
            for ext in (".sqlite", ".db"):
                p = self.root / f"{db_ref}{ext}"
                if p.is_file():
                    self._cache[db_ref] = p
                    return p
            script = self.script(db_ref)
            if script is None:
                raise FileNotFoundError(f"unknown database {db_ref!r} under {self.root}")
            if self._cache_dir is None:
                self._cache_dir = Path(tempfile.mkdtemp(prefix="sqlfix-db-"))
            target = self._cache_dir / f"{db_ref}.sqlite"
            conn = sqlite3.connect(target)
            try:
                conn.executescript(script.read_text(encoding="utf-8"))
                conn.commit()
            finally:
                conn.close()
            self._cache[db_ref] = target
            return target

    def close(self) -> None:
        if self._cache_dir is not None:
            shutil.rmtree(self._cache_dir, ignore_errors=True)
            self._cache_dir = None
            self._cache.clear()


def _connect(target) -> sqlite3.Connection:
    conn = sqlite3.connect(target, isolation_level=None, check_same_thread=False)
    conn.execute("PRAGMA foreign_keys = ON")
    return conn


class _SqliteHandle:
    cancel_supported = True

    def __init__(self, conn: sqlite3.Connection, mode: IsolationMode, preprocess: Sequence[str], path: Path):
        self.conn = conn
        self.mode = mode
        self.preprocess = tuple(preprocess)
        self.path = path
        self.snapshot: sqlite3.Connection | None = None

    # -- lifecycle --------------------------------------------------------

    def prepare(self) -> None:
        if self.mode is IsolationMode.TRANSACTION_ROLLBACK:
            self.conn.execute("BEGIN")
        for i, stmt in enumerate(self.preprocess, 1):
            obs = self.run(stmt, None, 0, heal=False)
            if not obs.ok:
                raise PreprocessError(i, stmt, obs.error_text or "")
        if self.mode is IsolationMode.TRANSACTION_ROLLBACK:
            self.conn.execute(f"SAVEPOINT {_SAVEPOINT}")
        else:
            self.snapshot = sqlite3.connect(":memory:", check_same_thread=False)
            self.conn.backup(self.snapshot)

    def restore(self) -> None:
        if self.mode is IsolationMode.TRANSACTION_ROLLBACK:
            if self.conn.in_transaction:
                self.conn.execute(f"ROLLBACK TO {_SAVEPOINT}")
            else:
                self.prepare()
        else:
            if self.conn.in_transaction:
                self.conn.execute("ROLLBACK")
            self.snapshot.backup(self.conn)

    def release(self) -> None:
        try:
            if self.conn.in_transaction:
                self.conn.execute("ROLLBACK")
        finally:
            self.conn.close()
            if self.snapshot is not None:
                self.snapshot.close()

    # -- execution ----------------------------------------------------------

    def run(self, sql: str, timeout_ms: int | None, row_cap: int | None, heal: bool = True) -> ExecObservation:
        start = time.perf_counter()
        timed_out = False
        if timeout_ms is not None:
            deadline = start + timeout_ms / 1000

            def _check():
                nonlocal timed_out
                if time.perf_counter() > deadline:
                    timed_out = True
                    return 1
                return 0

            self.conn.set_progress_handler(_check, 1000)
        cur = None
        try:
            cur = self.conn.execute(sql)
            if cur.description:
                cols = tuple(d[0] for d in cur.description)
                if row_cap is None:
                    rows = cur.fetchall()
                    truncated = False
                else:
                    rows = cur.fetchmany(row_cap + 1)
                    truncated = len(rows) > row_cap
                    rows = rows[:row_cap]
                obs = ExecObservation(Status.ROWS, cols, tuple(tuple(r) for r in rows), truncated=truncated)
            else:
                obs = ExecObservation(Status.AFFECTED, affected_count=cur.rowcount if cur.rowcount >= 0 else None)
        except (sqlite3.Error, sqlite3.Warning) as exc:
            if timed_out:
                obs = ExecObservation(Status.TIMEOUT, error_text=f"statement cancelled after {timeout_ms} ms")
            else:
                obs = ExecObservation(Status.ERROR, error_text=str(exc) or type(exc).__name__)
        finally:
            if cur is not None:
                cur.close()
            self.conn.set_progress_handler(None, 0)
        if (heal and self.mode is IsolationMode.TRANSACTION_ROLLBACK
                and not self.conn.in_transaction):
            # a conflict clause such as OR ROLLBACK ended the episode
            # transaction; nothing was committed, so rebuild from scratch
            self.prepare()
        elapsed = (time.perf_counter() - start) * 1000
        return ExecObservation(obs.status, obs.columns, obs.rows, obs.affected_count,
                               obs.error_text, obs.truncated, elapsed)

    # -- introspection ------------------------------------------------------

    def schema_ddl(self) -> str:
        rows = self.conn.execute(
            "SELECT sql FROM sqlite_master WHERE type IN ('table', 'view') "
            "AND name NOT LIKE 'sqlite_%' AND sql IS NOT NULL ORDER BY type, name"
        ).fetchall()
        return ";\n\n".join(r[0] for r in rows) + (";" if rows else "")

    def table_ddl(self, table: str) -> str | None:
        row = self.conn.execute(
            "SELECT sql FROM sqlite_master WHERE type IN ('table', 'view') AND name = ? COLLATE NOCASE",
            (table,),
        ).fetchone()
        return row[0] + ";" if row else None

    def table_names(self) -> list[str]:
        rows = self.conn.execute(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name"
        ).fetchall()
        return [r[0] for r in rows]

    def sample_sql(self, table: str, n: int) -> str:
        return 'SELECT * FROM "{}" LIMIT {}'.format(table.replace('"', '""'), int(n))


class SqliteExecutor:
    dialect = Dialect.EMBEDDED_REF
    default_mode = IsolationMode.TEMPLATE_COPY
    supported_modes = (IsolationMode.TEMPLATE_COPY, IsolationMode.TRANSACTION_ROLLBACK)

    def __init__(self, catalog: DatabaseCatalog):
        self.catalog = catalog

    def shares_database(self, mode: IsolationMode) -> bool:
        # one write transaction per SQLite file at a time
        return mode is IsolationMode.TRANSACTION_ROLLBACK

    def open(self, db_ref: str, mode: IsolationMode, preprocess: Sequence[str]) -> _SqliteHandle:
        path = self.catalog.resolve(db_ref)
        if mode is IsolationMode.TEMPLATE_COPY:
            src = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
            conn = _connect(":memory:")
            try:
                src.backup(conn)
            finally:
                src.close()
        else:
            conn = _connect(path)
        handle = _SqliteHandle(conn, mode, preprocess, path)
        try:
            handle.prepare()
        except BaseException:
            handle.release()
            raise
        return handle
