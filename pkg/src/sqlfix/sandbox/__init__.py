"""Isolated database sessions for episodes and evaluation."""

from __future__ import annotations

import os

from .base import (
    DEFAULT_LIMITS,
    UNLIMITED,
    ExecObservation,
    Executor,
    IsolationMode,
    Limits,
    PreprocessError,
    ResetError,
    Sandbox,
    SandboxError,
    Session,
    SessionClosed,
    Status,
    UnsupportedDialect,
    open_session,
)
from .sqlite import DatabaseCatalog, SqliteExecutor

PG_DSN_ENV = "SQLFIX_PG_DSN"


def default_sandbox(db_root, pg_dsn: str | None = None) -> Sandbox:
    """Sandbox with the embedded executor over ``db_root`` and, when a DSN is
    given (or set in ``SQLFIX_PG_DSN``), a PostgreSQL executor."""
    catalog = DatabaseCatalog(db_root)
    sandbox = Sandbox([SqliteExecutor(catalog)])
    dsn = pg_dsn or os.environ.get(PG_DSN_ENV)
    if dsn:
        from .postgres import PostgresExecutor

        sandbox.register(PostgresExecutor(dsn, catalog))
    return sandbox


__all__ = [
    "DEFAULT_LIMITS", "UNLIMITED", "DatabaseCatalog", "ExecObservation", "Executor", "IsolationMode",
    "Limits", "PG_DSN_ENV", "PreprocessError", "ResetError", "Sandbox", "SandboxError", "Session",
    "SessionClosed", "SqliteExecutor", "Status", "UnsupportedDialect", "default_sandbox", "open_session",
]
