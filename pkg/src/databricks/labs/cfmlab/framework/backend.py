import csv
import dataclasses
import io
import json
import logging
import os
import tempfile
from collections.abc import Sequence
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Protocol

import numpy as np

logger = logging.getLogger(__name__)


class DataclassInstance(Protocol):
    __dataclass_fields__: ClassVar[dict]


Dataclass = type[DataclassInstance]


def format_value(value: Any) -> str:
    """Text form of one CSV cell; reals keep 17 significant digits so they round-trip exactly."""
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool | np.bool_):
        return "true" if value else "false"
    if isinstance(value, int | np.integer):
        return str(int(value))
    if isinstance(value, float | np.floating):
        return f"{float(value):.17g}"
    return str(value)


def _is_sequence(value: Any) -> bool:
    return isinstance(value, list | tuple | np.ndarray)


def _columns(rows: Sequence[DataclassInstance], klass: Dataclass) -> list[str]:
    columns = []
    for field in dataclasses.fields(klass):
        sample = getattr(rows[0], field.name) if rows else None
        if _is_sequence(sample):
            columns.extend(f"{field.name}_{i}" for i in range(len(sample)))
            continue
        columns.append(field.name)
    return columns


def _cells(row: DataclassInstance, klass: Dataclass) -> list[str]:
    cells = []
    for field in dataclasses.fields(klass):
        value = getattr(row, field.name)
        if _is_sequence(value):
            cells.extend(format_value(v) for v in np.asarray(value).ravel())
            continue
        cells.append(format_value(value))
    return cells


def atomic_write(path: Path, text: str):
    """Writes ``text`` to a temporary sibling file and renames it over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class CsvBackend:
    """Persists dataclass rows as RFC-4180 CSV files under one directory.

    Sequence-valued fields expand into numbered columns, e.g. ``coord`` becomes
    ``coord_0, coord_1, ...``. Every file is replaced atomically.
    """

    def __init__(self, root: Path):
        self._root = root

    @property
    def root(self) -> Path:
        return self._root

    def path(self, name: str) -> Path:
        return self._root / name

    def save_table(self, name: str, rows: Sequence[DataclassInstance], klass: Dataclass):
        path = self.path(name)
        rows = list(rows)
        lines = io.StringIO()
        writer = csv.writer(lines)
        writer.writerow(_columns(rows, klass))
        writer.writerows(_cells(row, klass) for row in rows)
        atomic_write(path, lines.getvalue())
        logger.debug(f"[{path}] wrote {len(rows)} rows")

    def save_json(self, name: str, payload: dict[str, Any]):
        text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"
        atomic_write(self.path(name), text)

    def fetch(self, name: str) -> list[dict[str, str]]:
        with self.path(name).open(encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))


def _json_default(value: Any):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return value.as_posix()
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return dataclasses.asdict(value)
    msg = f"cannot serialize {type(value).__name__}"
    raise TypeError(msg)
