"""Plain ``key = value`` configuration files with dot-separated nested keys."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def parse_kv(text: str, allowed: set[str] | None = None) -> dict[str, str]:
    """Parse ``key = value`` lines. ``#`` starts a comment; blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno)
        if allowed is not None and key not in allowed:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        out[key] = value
    return out


def load_kv(path: str | Path, allowed: set[str] | None = None) -> dict[str, str]:
    return parse_kv(Path(path).read_text(), allowed)


def as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def as_list(value: str) -> list[str]:
    return [p.strip() for p in value.split(",") if p.strip()]


def as_ports(value: str) -> frozenset[int] | None:
    """``none``/``reject`` disables exiting; otherwise a comma-separated port list."""
    if value.strip().lower() in ("", "none", "reject"):
        return None
    ports = frozenset(int(p) for p in as_list(value))
    for p in ports:
        if not 1 <= p <= 65535:
            raise ValueError(f"port out of range: {p}")
    return ports
