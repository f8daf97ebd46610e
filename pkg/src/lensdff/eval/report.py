"""Ablation report serialization.

JSON document::

    {"schema": "lensdff-ablation", "version": 1, "config": {...},
     "rows": [{row fields}], "cells": [{cell fields}]}

CSV holds one line per row with the columns in ``CSV_COLUMNS``; an empty
``mean_e_feat`` means no seed of that mode produced an energy.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path

from ..errors import MalformedFile
from .ablation import AblationReport, AblationRow, CellResult

REPORT_SCHEMA = "lensdff-ablation"
REPORT_VERSION = 1
CSV_COLUMNS = ("group", "mode", "mean_e_feat", "success_rate", "successes",
               "grasp_count", "failed_cells")
FORMATS = ("json", "csv")


def report_to_dict(report: AblationReport) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "config": report.config,
        "rows": [asdict(r) for r in report.rows],
        "cells": [asdict(c) for c in report.cells],
    }


def report_from_dict(doc: dict) -> AblationReport:
    if doc.get("schema") != REPORT_SCHEMA:
        raise MalformedFile("not an ablation report")
    if doc.get("version") != REPORT_VERSION:
        raise MalformedFile(f"unsupported report version {doc.get('version')!r} "
                            f"(supported: {REPORT_VERSION})")
    try:
        rows = [AblationRow(**r) for r in doc["rows"]]
        cells = [CellResult(**c) for c in doc["cells"]]
    except (KeyError, TypeError) as exc:
        raise MalformedFile(f"bad report: {exc}") from exc
    return AblationReport(rows, cells, doc.get("config", {}))


def report_json(report: AblationReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"


def report_csv(report: AblationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        d = asdict(r)
        w.writerow(["" if d[c] is None else d[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def emit_report(report: AblationReport, path, fmt: str = "json") -> Path:
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    path = Path(path)
    text = report_json(report) if fmt == "json" else report_csv(report)
    path.write_text(text)
    return path


def load_report(path) -> AblationReport:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: not JSON: {exc}") from exc
    return report_from_dict(doc)

