"""Flat dotted-key config files and run.lock records.

Config files are plain text, one ``key=value`` per line, ``#`` comments
allowed. Run locks use the same syntax: every CLI run writes the fully
resolved configuration (plus ``run.*`` metadata: command, tool version,
seeds) into ``run.lock`` in its output directory, so any run can be
reproduced from that single file via ``--config run.lock``.
"""

from __future__ import annotations

import os

from .errors import FormatError


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise FormatError(f"{source}: line {lineno}: expected key=value, got {line!r}")
        mapping[key] = value.strip()
    return mapping


def load_kv_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), source=str(path))


def format_kv(mapping: dict[str, str]) -> str:
    return "".join(f"{key}={mapping[key]}\n" for key in sorted(mapping))


def write_run_lock(out_dir, command: str, mapping: dict[str, str], version: str) -> str:
    """Write the resolved config for a CLI run; returns the lock path."""
    os.makedirs(out_dir, exist_ok=True)
    record = dict(mapping)
    record["run.command"] = command
    record["run.version"] = version
    path = os.path.join(out_dir, "run.lock")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(record))
    return path
