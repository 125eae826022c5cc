"""Key/value config files: ``key = value`` per line, ``#`` starts a comment."""

from __future__ import annotations


def parse_kv(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else (":" if ":" in line else None)
        if sep is None:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split(sep, 1))
        values[key.replace("-", "_")] = value
    return values


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())
