"""Learning-curve CSV and JSON-lines output.

CSV rows are written with ``'.17g'`` floats and LF line endings under the
fixed header ``iter,mean_cost,p20,p80,grad_norm,wall_time_s``. Aggregate
files may carry the extra labelled rows ``final`` and ``optimal``.
"""

import json
import math

from ..exceptions import ConfigError
from ..models import dumps_17g

CSV_HEADER = "iter,mean_cost,p20,p80,grad_norm,wall_time_s"
CSV_COLUMNS = CSV_HEADER.split(",")
ROW_LABELS = ("final", "optimal")


def fmt(v):
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def record_row(rec, label=None):
    it = label if label is not None else str(int(rec.k))
    return [it, rec.mean_cost, rec.p20, rec.p80, rec.grad_norm, rec.wall_time_s]


def write_csv(path, rows):
    """``rows``: sequences ``(iter, mean, p20, p80, grad_norm, wall_time_s)``."""
    lines = [CSV_HEADER]
    for r in rows:
        if len(r) != len(CSV_COLUMNS):
            raise ValueError(f"row has {len(r)} fields, expected {len(CSV_COLUMNS)}")
        lines.append(",".join([str(r[0])] + [fmt(v) for v in r[1:]]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path):
    """Parse a learning-curve CSV back into a list of dict rows.

    ``iter`` is an int, or one of the labels ``final``/``optimal``.
    """
    with open(path, newline="") as fh:
        text = fh.read()
    if "\r" in text:
        raise ConfigError(f"{path}: CRLF line endings")
    lines = text.split("\n")
    if lines[-1] != "":
        raise ConfigError(f"{path}: missing trailing newline")
    lines = lines[:-1]
    if not lines or lines[0] != CSV_HEADER:
        raise ConfigError(f"{path}: unexpected header")
    rows = []
    for ln in lines[1:]:
        f = ln.split(",")
        if len(f) != len(CSV_COLUMNS):
            raise ConfigError(f"{path}: bad row {ln!r}")
        it = f[0] if f[0] in ROW_LABELS else int(f[0])
        rows.append({"iter": it, **{c: float(v) for c, v in zip(CSV_COLUMNS[1:], f[1:])}})
    return rows


def write_jsonl(path, docs):
    with open(path, "w", newline="\n") as fh:
        for d in docs:
            fh.write(dumps_17g(d) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


def write_json(path, doc):
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_17g(doc) + "\n")
