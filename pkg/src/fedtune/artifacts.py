"""Deterministic artifact serialization.

Floats are written with repr() (shortest round-trip form) and JSON objects
with sorted keys, so identical runs produce byte-identical files. No
timestamps or environment data are ever embedded.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

__all__ = ["fmt_value", "write_csv", "write_json", "read_csv", "read_json"]


def fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_value(v) for v in row])


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
