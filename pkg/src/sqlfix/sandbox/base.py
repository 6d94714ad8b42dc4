from __future__ import annotations

import datetime as _dt
import decimal
import itertools
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Protocol, Sequence

from ..domain import Dialect, TaskInstance
from .. import sqltext

log = logging.getLogger(__name__)


class SandboxError(RuntimeError):
    """Base class for sandbox failures."""


class UnsupportedDialect(SandboxError):
    pass


class PreprocessError(SandboxError):
    def __init__(self, index: int, statement: str, message: str):
        super().__init__(f"preprocess statement {index} failed: {message}")
        self.index = index
        self.statement = statement
        self.message = message


class SessionClosed(SandboxError):
    pass


class ResetError(SandboxError):
    pass


class IsolationMode(str, Enum):
    TRANSACTION_ROLLBACK = "TransactionRollback"
    TEMPLATE_COPY = "TemplateCopy"


class Status(str, Enum):
    ROWS = "Rows"
    AFFECTED = "Affected"
    ERROR = "Error"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class Limits:
    row_cap: int | None = 50
    char_cap: int | None = 4000
    timeout_ms: int | None = 30000


DEFAULT_LIMITS = Limits()
# Used by the evaluator: complete result sets, no rendering cap.
UNLIMITED = Limits(row_cap=None, char_cap=None, timeout_ms=30000)

TRUNCATED_MARKER = "… truncated"


@dataclass(frozen=True)
class ExecObservation:
    status: Status
    columns: tuple[str, ...] = ()
    rows: tuple[tuple, ...] = ()
    affected_count: int | None = None
    error_text: str | None = None
    truncated: bool = False
    elapsed_ms: float = 0.0

    def __post_init__(self):
        if self.status is Status.ROWS and not self.columns:
            raise ValueError("Rows observation needs column names")
        if self.status in (Status.ERROR, Status.TIMEOUT) and not self.error_text:
            raise ValueError("Error observation needs error text")

    @property
    def ok(self) -> bool:
        return self.status in (Status.ROWS, Status.AFFECTED)

    def render(self, char_cap: int | None = DEFAULT_LIMITS.char_cap) -> str:
        if self.status is Status.ROWS:
            lines = [f"[Rows] {len(self.rows)} row(s)", "\t".join(self.columns)]
            lines += ["\t".join(_cell(v) for v in row) for row in self.rows]
        elif self.status is Status.AFFECTED:
            n = "unknown" if self.affected_count is None else self.affected_count
            lines = [f"[Affected] {n} row(s)"]
        else:
            lines = [f"[{self.status.value}]", self.error_text or ""]
        text = "\n".join(lines)
        cut = char_cap is not None and len(text) > char_cap
        if cut:
            text = text[:char_cap]
        if self.truncated or cut:
            text += "\n" + TRUNCATED_MARKER
        return text


def _cell(v: Any) -> str:
    if v is None:
        return "NULL"
    if isinstance(v, bytes):
        return "x'" + v.hex() + "'"
    return str(v)


def normalize_value(v: Any) -> Any:
    """Map driver-specific values onto int/float/str/bytes/None."""
    if v is None or isinstance(v, (bool, int, float, str, bytes)):
        return v
    if isinstance(v, decimal.Decimal):
        return int(v) if v == v.to_integral_value() and v.as_tuple().exponent >= 0 else float(v)
    if isinstance(v, (_dt.date, _dt.time, _dt.datetime)):
        return v.isoformat()
    if isinstance(v, memoryview):
        return v.tobytes()
    return str(v)


class Handle(Protocol):
    """Engine-side state of one open session."""

    cancel_supported: bool

    def run(self, sql: str, timeout_ms: int | None, row_cap: int | None) -> ExecObservation: ...
    def restore(self) -> None: ...
    def release(self) -> None: ...
    def schema_ddl(self) -> str: ...
    def table_ddl(self, table: str) -> str | None: ...
    def table_names(self) -> list[str]: ...
    def sample_sql(self, table: str, n: int) -> str: ...


class Executor(Protocol):
    dialect: Dialect
    default_mode: IsolationMode
    supported_modes: tuple[IsolationMode, ...]

    def open(self, db_ref: str, mode: IsolationMode, preprocess: Sequence[str]) -> Handle: ...


_session_ids = itertools.count(1)


@dataclass(eq=False)
class Session:
    """One isolated view of a database, bound to one task.

    A session may be handed between threads but must not be used by two at
    once.
    """

    task_id: str
    dialect: Dialect
    isolation_mode: IsolationMode
    _handle: Handle = field(repr=False)
    _preprocess: tuple[str, ...] = field(default=(), repr=False)
    _cleanup: tuple[str, ...] = field(default=(), repr=False)
    _executor: Any = field(default=None, repr=False)
    _db_ref: str = ""
    _release_lock: Any = field(default=None, repr=False)
    session_id: str = field(default_factory=lambda: f"s{next(_session_ids)}-{uuid.uuid4().hex[:8]}")
    open_at: float = field(default_factory=time.time)
    statement_count: int = 0
    poisoned: bool = False
    closed: bool = False
    db_time_ms: float = 0.0
    cleanup_failures: list[tuple[int, str]] = field(default_factory=list)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _check_open(self):
        if self.closed:
            raise SessionClosed(f"session {self.session_id} is closed")

    def execute(self, sql: str, limits: Limits = DEFAULT_LIMITS) -> ExecObservation:
        self._check_open()
        self.statement_count += 1
        if self.poisoned:
            return ExecObservation(Status.ERROR, error_text="session is poisoned; reset required")
        if (self.isolation_mode is IsolationMode.TRANSACTION_ROLLBACK
                and sqltext.is_transaction_control(sql)):
            return ExecObservation(
                Status.ERROR,
                error_text="transaction control statements are not allowed in this sandbox",
            )
        start = time.perf_counter()
        try:
            obs = self._handle.run(sql, limits.timeout_ms, limits.row_cap)
        except Exception as exc:  # driver/connection failure, not a SQL error
            log.warning("session %s poisoned: %s", self.session_id, exc)
            self.poisoned = True
            obs = ExecObservation(Status.ERROR, error_text=f"environment failure: {exc}")
        if obs.status is Status.TIMEOUT and not self._handle.cancel_supported:
            self.poisoned = True
        self.db_time_ms += (time.perf_counter() - start) * 1000
        return obs

    def reset(self) -> "Session":
        """Return the database to its post-preprocess state."""
        self._check_open()
        start = time.perf_counter()
        if self.poisoned and self.isolation_mode is IsolationMode.TRANSACTION_ROLLBACK:
            raise ResetError("cannot reset a poisoned TransactionRollback session")
        try:
            if self.poisoned:
                self._handle.release()
                self._handle = self._executor.open(self._db_ref, self.isolation_mode, self._preprocess)
            else:
                self._handle.restore()
        except PreprocessError:
            raise
        except Exception as exc:
            self.poisoned = True
            raise ResetError(str(exc)) from exc
        self.poisoned = False
        self.statement_count = 0
        self.db_time_ms += (time.perf_counter() - start) * 1000
        return self

    def close(self) -> None:
        if self.closed:
            return
        for i, stmt in enumerate(self._cleanup, 1):
            try:
                obs = self._handle.run(stmt, DEFAULT_LIMITS.timeout_ms, 0)
                error = None if obs.ok else obs.error_text
            except Exception as exc:
                error = str(exc)
            if error is not None:
                self.cleanup_failures.append((i, error))
                log.warning("cleanup statement %d failed for %s: %s", i, self.task_id, error)
        try:
            self._handle.release()
        finally:
            self.closed = True
            if self._release_lock is not None:
                self._release_lock.release()

    def schema_ddl(self) -> str:
        self._check_open()
        return self._handle.schema_ddl()

    def table_ddl(self, table: str) -> str | None:
        self._check_open()
        return self._handle.table_ddl(table)

    def table_names(self) -> list[str]:
        self._check_open()
        return self._handle.table_names()

    def sample_sql(self, table: str, n: int) -> str:
        return self._handle.sample_sql(table, n)


class Sandbox:
    """Registry of executors keyed by dialect; opens and tracks sessions."""

    def __init__(self, executors: Sequence[Executor] = ()):
        self._executors: dict[Dialect, Executor] = {}
        self._locks: dict[tuple, threading.Lock] = {}
        self._guard = threading.Lock()
        for ex in executors:
            self.register(ex)

    def register(self, executor: Executor) -> None:
        self._executors[executor.dialect] = executor

    def executor(self, dialect: Dialect) -> Executor:
        try:
            return self._executors[dialect]
        except KeyError:
            raise UnsupportedDialect(f"no executor registered for dialect {dialect.value}") from None

    def open_session(self, task: TaskInstance, mode: IsolationMode | None = None) -> Session:
        return self.open_database(
            task.dialect, task.db_ref, mode=mode, task_id=task.task_id,
            preprocess=task.preprocess_sql, cleanup=task.cleanup_sql,
        )

    def open_database(
        self,
        dialect: Dialect,
        db_ref: str,
        *,
        mode: IsolationMode | None = None,
        task_id: str = "",
        preprocess: Sequence[str] = (),
        cleanup: Sequence[str] = (),
    ) -> Session:
        ex = self.executor(dialect)
        mode = mode or ex.default_mode
        if mode not in ex.supported_modes:
            raise SandboxError(f"{dialect.value} executor does not support {mode.value}")
        lock = None
        if getattr(ex, "shares_database", lambda m: False)(mode):
            # sessions on one shared database would see each other: serialize them
            with self._guard:
                lock = self._locks.setdefault((dialect, db_ref), threading.Lock())
            lock.acquire()
        try:
            handle = ex.open(db_ref, mode, tuple(preprocess))
        except BaseException:
            if lock is not None:
                lock.release()
            raise
        return Session(
            task_id=task_id, dialect=dialect, isolation_mode=mode, _handle=handle,
            _preprocess=tuple(preprocess), _cleanup=tuple(cleanup), _executor=ex,
            _db_ref=db_ref, _release_lock=lock,
        )


def open_session(sandbox: Sandbox, task: TaskInstance, mode: IsolationMode | None = None) -> Session:
    return sandbox.open_session(task, mode)
