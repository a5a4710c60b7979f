# conftest.py - shared pytest setup for hazeforge
#
# src/ goes on sys.path so `import hazeforge` works without `pip install -e .`
# reference: https://docs.pytest.org/en/stable/reference/fixtures.html
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent / "src"))


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    # CLI tests must not pick up a thread count from the caller's shell
    monkeypatch.delenv("HAZEFORGE_THREADS", raising=False)
