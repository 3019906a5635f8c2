"""CSV and 16-bit PGM writers used by the CLI reports."""

from __future__ import annotations

import csv
import io
import os
from typing import Iterable, Sequence

import numpy as np

PGM_MAX = 65535


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        # repr gives the shortest string that round-trips to the same double
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def emit_csv(rows: Sequence[Sequence], path: str | os.PathLike | None = None) -> str:
    """Write rectangular ``rows`` as RFC-4180 CSV; returns the text."""
    rows = [list(r) for r in rows]
    if rows and any(len(r) != len(rows[0]) for r in rows):
        raise ValueError("ragged rows: every row must have the same number of fields")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    for r in rows:
        writer.writerow([_cell(v) for v in r])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path: str | os.PathLike) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh)]


def parse_number(s: str):
    """Inverse of the CSV cell formatting for numeric cells."""
    try:
        return int(s)
    except ValueError:
        return float(s)


def export_image(image: np.ndarray, path: str | os.PathLike) -> None:
    """Binary 16-bit PGM (P5); pixel = round(v * 65535), big-endian samples."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"export_image needs a 2-D slice, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    # floor(x + 0.5): halves round up, so 0.5 -> 32768
    pixels = np.floor(img * PGM_MAX + 0.5).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{PGM_MAX}\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM written by :func:`export_image` (raw integer pixels)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    emit_csv([list(header)] + [list(r) for r in rows], path)
