"""Artifact writers: atomic files, CSV with JSON headers, manifests and SVG plots."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

__all__ = ["atomic_write", "format_value", "csv_text", "read_csv_header", "write_csv", "write_manifest", "write_svg"]

HEADER_PREFIX = "# "


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def format_value(v):
    """Deterministic text for one CSV cell (``repr`` for floats: round-trips exactly)."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if obj is None or isinstance(obj, (str, int, bool)):
        return obj
    return str(obj)


def csv_text(header, columns, rows):
    """CSV with a JSON header block: each header line is prefixed with ``# ``."""
    buf = io.StringIO()
    for line in json.dumps(_jsonable(header), sort_keys=True, indent=1).splitlines():
        buf.write(HEADER_PREFIX + line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def read_csv_header(path):
    """Parse the JSON header block and the CSV body of a file written by :func:`write_csv`."""
    text = Path(path).read_text(encoding="utf-8")
    head, body = [], []
    for line in text.splitlines():
        (head if line.startswith(HEADER_PREFIX) and not body else body).append(line)
    header = json.loads("\n".join(line[len(HEADER_PREFIX) :] for line in head)) if head else {}
    rows = list(csv.reader(body))
    return header, rows


def write_csv(path, header, columns, rows):
    return atomic_write(path, csv_text(header, columns, rows))


def write_manifest(path, manifest):
    return atomic_write(path, json.dumps(_jsonable(manifest), sort_keys=True, indent=2) + "\n")


def write_svg(path, series, xlabel, ylabel, title="", logy=False):
    """Line plot of ``series`` (a list of ``(label, x, y)``) as an SVG file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "rankone", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, x, y in series:
            ax.plot(x, y, label=label, linewidth=1.2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if logy:
            ax.set_yscale("log")
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return atomic_write(path, buf.getvalue())
