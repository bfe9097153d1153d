from __future__ import annotations

from pathlib import Path

import pytest

GOLDEN = Path(__file__).parent / "golden"
ACCEPTANCE_LINES: list[str] = []


def load_golden(name: str) -> dict[str, bytes]:
    out = {}
    for line in (GOLDEN / name).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        key, value = line.split(":", 1)
        out[key.strip()] = bytes.fromhex(value.strip())
    return out


@pytest.fixture
def verdict():
    """Print and keep one pass/fail line per acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
