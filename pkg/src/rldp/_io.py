"""Small file helpers: atomic writes, CSV output and seed derivation."""
from __future__ import annotations

import csv
import hashlib
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return format_value(v.item())
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    atomic_write_bytes(path, buf.getvalue().encode())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def derive_seed(root: int, component: str) -> int:
    """Seed for ``component`` as the first 8 bytes of sha256("<root>:<component>")."""
    digest = hashlib.sha256(f"{int(root)}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
