"""CSV emission shared by the training loops and the experiment harness."""

from __future__ import annotations

import csv
from pathlib import Path


def write_csv(path, fieldnames, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in fieldnames})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value
