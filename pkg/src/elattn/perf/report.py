"""Render result tables as CSV, Markdown or JSON."""

import csv
import io
import json
import logging
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

from elattn.config import get_version
from elattn.errors import ParameterError
from elattn.perf.accounting import CONVENTIONS
from elattn.perf.bench import COLUMNS, BenchReport

logger = logging.getLogger(__name__)

FORMATS = ("csv", "md", "json")


@dataclass
class Table:
    """A titled table with notes printed above it.

    Attributes:
        title: Heading of the report
        columns: Column names, in output order
        rows: One dict per row, keyed by column name
        notes: Lines printed before the table (conventions, settings)
    """

    title: str
    columns: Sequence[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    notes: Sequence[str] = ()


def format_value(value: Any) -> str:
    """Format a cell the same way for every output format."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(getattr(value, "value", value))


def provenance(seed: int, precision: str) -> Dict[str, Any]:
    """Metadata recorded with JSON reports."""
    return {
        "version": get_version(),
        "seed": seed,
        "precision": precision,
        "platform": platform.platform(),
        "python": platform.python_version(),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }


def bench_table(report: BenchReport, title: str = "Attention benchmark") -> Table:
    return Table(
        title=title,
        columns=COLUMNS,
        rows=[row.to_dict() for row in report.rows],
        notes=CONVENTIONS,
    )


def _render_csv(table: Table) -> str:
    out = io.StringIO()
    out.write(f"# {table.title}\n")
    for note in table.notes:
        out.write(f"# {note}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([format_value(row.get(c)) for c in table.columns])
    return out.getvalue()


def _render_markdown(table: Table) -> str:
    md = f"# {table.title}\n\n"
    if table.notes:
        md += "## Conventions\n\n"
        for note in table.notes:
            md += f"- {note}\n"
        md += "\n"
    if not table.rows:
        md += "*No rows.*\n"
        return md
    md += "| " + " | ".join(table.columns) + " |\n"
    md += "| " + " | ".join("---" for _ in table.columns) + " |\n"
    for row in table.rows:
        md += "| " + " | ".join(format_value(row.get(c)) for c in table.columns) + " |\n"
    return md


def _render_json(table: Table, meta: Optional[Dict[str, Any]]) -> str:
    document = {
        "title": table.title,
        "provenance": meta or {},
        "conventions": list(table.notes),
        "columns": list(table.columns),
        "rows": [
            {c: format_value(row.get(c)) for c in table.columns} for row in table.rows
        ],
    }
    return json.dumps(document, indent=2) + "\n"


def render(table: Table, fmt: str, meta: Optional[Dict[str, Any]] = None) -> str:
    """Render ``table`` as "csv", "md" or "json".

    Raises:
        ParameterError: For an unknown format.
    """
    if fmt == "csv":
        return _render_csv(table)
    if fmt == "md":
        return _render_markdown(table)
    if fmt == "json":
        return _render_json(table, meta)
    raise ParameterError(f"Unknown format '{fmt}', expected one of {FORMATS}")


def write_output(text: str, path: Optional[str], stream) -> None:
    """Write ``text`` to ``path``, or to ``stream`` when no path is given."""
    if path is None:
        stream.write(text)
        return
    with open(path, "w") as f:
        f.write(text)
    logger.info(f"Report written to {path}")
