"""Prompt template bundles.

A bundle is a directory of ``<name>.txt`` files. Placeholders are written
``{NAME}``; only identifier-shaped names are substituted, so literal JSON
braces in a template are left alone.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from pathlib import Path
from typing import Sequence

from .domain import Dialect

TEMPLATE_ROOT = Path(__file__).parent / "templates"
_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

DIALECT_NAMES = {
    Dialect.EMBEDDED_REF: "SQLite",
    Dialect.POSTGRES_LIKE: "PostgreSQL",
    Dialect.MYSQL_LIKE: "MySQL",
    Dialect.SERVER_LIKE: "SQL Server",
    Dialect.ORACLE_LIKE: "Oracle",
}


class PromptSet:
    def __init__(self, name: str, templates: dict[str, str]):
        self.name = name
        self.templates = templates

    @classmethod
    def load(cls, bundle: str | Path = "default") -> "PromptSet":
        path = Path(bundle)
        if not path.is_dir():
            path = TEMPLATE_ROOT / str(bundle)
        if not path.is_dir():
            raise FileNotFoundError(f"prompt bundle {bundle!r} not found")
        templates = {p.stem: p.read_text(encoding="utf-8") for p in sorted(path.glob("*.txt"))}
        return cls(path.name, templates)

    def placeholders(self, name: str) -> set[str]:
        return set(_PLACEHOLDER.findall(self.templates[name]))

    def render(self, name: str, **values) -> str:
        template = self.templates[name]

        def sub(m: re.Match) -> str:
            key = m.group(1)
            if key not in values:
                raise KeyError(f"template {self.name}/{name} needs a value for {{{key}}}")
            return str(values[key])

        return _PLACEHOLDER.sub(sub, template)


@lru_cache(maxsize=None)
def prompt_set(bundle: str = "default") -> PromptSet:
    return PromptSet.load(bundle)


def render_sql_list(statements: Sequence[str]) -> str:
    return json.dumps(list(statements), ensure_ascii=False)


def render_plan(steps: Sequence[str] | None) -> str:
    if not steps:
        return ""
    lines = "\n".join(f"{i}. {s}" for i, s in enumerate(steps, 1))
    return f"\n## Plan\nFollow these steps:\n{lines}\n"
