"""Small SQL text utilities shared by the parser, evaluator and agent.

Statement splitting and comment stripping are delegated to sqlparse, which
understands string literals, dollar quoting and BEGIN...END bodies.
"""

from __future__ import annotations

import re

import sqlparse
from sqlparse import tokens as T

_WS = re.compile(r"\s+")
_TXN_CONTROL = re.compile(
    r"^\s*(begin|commit|rollback|end|savepoint|release|start\s+transaction|abort)\b",
    re.IGNORECASE,
)


def split_statements(text: str) -> list[str]:
    """Split ``text`` into individual statements, dropping empty fragments
    and trailing semicolons."""
    out = []
    for stmt in sqlparse.split(text):
        stmt = stmt.strip()
        if stmt.endswith(";"):
            stmt = stmt[:-1].rstrip()
        if strip_comments(stmt).strip():
            out.append(stmt)
    return out


def count_statements(text: str) -> int:
    return len(split_statements(text))


def strip_comments(sql: str) -> str:
    return sqlparse.format(sql, strip_comments=True)


def normalize(sql: str) -> str:
    """Comment-free, case-folded, whitespace-collapsed form used for
    constraint matching."""
    return _WS.sub(" ", strip_comments(sql)).strip().casefold()


def is_transaction_control(sql: str) -> bool:
    return bool(_TXN_CONTROL.match(strip_comments(sql)))


def has_top_level_order_by(sql: str) -> bool:
    """True when ``ORDER BY`` appears outside any parenthesised group."""
    for stmt in sqlparse.parse(sql):
        for tok in stmt.tokens:
            if tok.ttype is T.Keyword and " ".join(tok.normalized.upper().split()) == "ORDER BY":
                return True
    return False


def first_keyword(sql: str) -> str:
    words = normalize(sql).split(" ", 1)
    return words[0] if words else ""
