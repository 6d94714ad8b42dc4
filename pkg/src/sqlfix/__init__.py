"""Tooling for SQL issue debugging: sandboxed evaluation, ReAct-style SQL
agents, synthetic task generation and trajectory collection."""

from pathlib import Path

__version__ = "0.1.0"

FIXTURES = Path(__file__).parent / "fixtures"
FIXTURE_TASKS = FIXTURES / "tasks"
FIXTURE_DATABASES = FIXTURES / "databases"
