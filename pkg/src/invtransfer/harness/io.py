"""Task-indexed CSV datasets and atomic file output."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from ..core import MultiTaskDataset, TaskSample, validate_dataset
from ..exceptions import InconsistentWidth, ParseError


def load_csv(path: str | os.PathLike, test_task_id: int | None = None) -> MultiTaskDataset:
    """Read a ``task,y,x1,...,xp`` file; an empty ``y`` marks an unlabeled row.

    Rows of a task keep their file order; labeled and unlabeled rows of the
    same task become two samples.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"file is not valid UTF-8: {exc}") from exc
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader, None)
    if header is None:
        raise ParseError("empty file", 1)
    header = [h.strip() for h in header]
    if len(header) < 3 or header[0] != "task" or header[1] != "y":
        raise ParseError("header must start with 'task,y' followed by feature columns", 1)
    names = header[2:]
    p = len(names)
    rows: dict[tuple[int, bool], tuple[list, list]] = {}
    order: list[tuple[int, bool]] = []
    for rec in reader:
        line = reader.line_num
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        if len(rec) != p + 2:
            raise InconsistentWidth(f"expected {p + 2} fields, found {len(rec)}", line)
        try:
            task = int(rec[0])
        except ValueError:
            raise ParseError(f"task id {rec[0]!r} is not an integer", line) from None
        if task < 1:
            raise ParseError(f"task id must be positive, got {task}", line)
        ytxt = rec[1].strip()
        try:
            x = [float(v) for v in rec[2:]]
            y = float(ytxt) if ytxt else None
        except ValueError as exc:
            raise ParseError(f"bad number ({exc})", line) from None
        key = (task, y is not None)
        if key not in rows:
            rows[key] = ([], [])
            order.append(key)
        rows[key][0].append(x)
        if y is not None:
            rows[key][1].append(y)
    tasks = []
    for key in sorted(order, key=lambda k: (k[0], not k[1])):
        xs, ys = rows[key]
        X = np.array(xs, dtype=float).reshape(len(xs), p)
        tasks.append(TaskSample(key[0], X, np.array(ys) if key[1] else None))
    ds = MultiTaskDataset(tasks, p, feature_names=names, test_task_id=test_task_id)
    validate_dataset(ds)
    return ds


def dataset_to_csv(dataset: MultiTaskDataset) -> str:
    names = dataset.feature_names or tuple(f"x{j}" for j in range(1, dataset.p + 1))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "y", *names])
    for t in dataset.tasks:
        for i in range(t.n):
            y = "" if t.targets is None else repr(float(t.targets[i]))
            w.writerow([t.task_id, y, *(repr(float(v)) for v in t.features[i])])
    return buf.getvalue()


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(dataset: MultiTaskDataset, path: str | os.PathLike) -> None:
    atomic_write_text(path, dataset_to_csv(dataset))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(obj, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_json(obj))
