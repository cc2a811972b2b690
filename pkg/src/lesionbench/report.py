"""Provenance blocks and deterministic CSV/JSON writers.

CSV files start with a single ``# provenance: {...}`` comment line followed
by a header row.  Undefined values are written as empty cells, floats with
``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from lesionbench import __version__
from lesionbench.volgrid import atomic_write


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def provenance(command: str, config: dict, inputs: Iterable = ()) -> dict:
    """Everything needed to re-run ``command``: config, tool version, input checksums."""
    return {
        "tool": "lesionbench",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in inputs],
    }


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[dict], prov: dict | None = None) -> str:
    buf = io.StringIO()
    if prov is not None:
        buf.write("# provenance: " + json.dumps(prov, sort_keys=True, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, columns: Sequence[str], rows: Iterable[dict], prov: dict | None = None) -> Path:
    atomic_write(Path(path), csv_text(columns, rows, prov).encode("utf-8"))
    return Path(path)


def json_text(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, payload) -> Path:
    atomic_write(Path(path), json_text(payload).encode("utf-8"))
    return Path(path)


def read_csv(path) -> tuple[dict | None, list[dict]]:
    """Read a file written by :func:`write_csv`; returns (provenance, rows as strings)."""
    text = Path(path).read_text(encoding="utf-8")
    prov = None
    if text.startswith("# provenance: "):
        first, text = text.split("\n", 1)
        prov = json.loads(first[len("# provenance: ") :])
    return prov, list(csv.DictReader(io.StringIO(text)))
