"""Readers and writers for dense matrix files and parcellation tables.

Two matrix containers are supported:

* CSV: header-free rows of comma-separated decimals, written with 17
  significant digits so every float64 survives the round trip.
* SBPM binary: a 16-byte little-endian header (magic ``b"SBPM"``, u32 rows,
  u32 cols, u32 reserved = 0) followed by the float64 payload in row-major
  order.
"""
import csv
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"SBPM"
_HEADER = struct.Struct("<4sIII")


def write_matrix_csv(path, matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w") as fh:
        for row in matrix:
            fh.write(",".join(repr(float(x)) for x in row))
            fh.write("\n")


def read_matrix_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: empty matrix file")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ParseError(f"{path}: ragged rows")
    return np.array(rows, dtype=np.float64)


def write_matrix_binary(path, matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols, 0))
        fh.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


def read_matrix_binary(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, rows, cols, _ = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    payload = data[_HEADER.size:]
    if len(payload) != 8 * rows * cols:
        raise ParseError(f"{path}: expected {rows}x{cols} float64 payload, got {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def read_matrix(path):
    """Read either container, dispatching on the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_matrix_binary(path)
    return read_matrix_csv(path)


def write_matrix(path, matrix):
    if str(path).endswith(".csv"):
        write_matrix_csv(path, matrix)
    else:
        write_matrix_binary(path, matrix)


def write_parcellation_csv(path, labels, voxel_ids=None):
    labels = np.asarray(labels)
    if voxel_ids is None:
        voxel_ids = [str(j) for j in range(len(labels))]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["voxel_id", "label"])
        for vid, lab in zip(voxel_ids, labels):
            writer.writerow([vid, int(lab)])


def read_parcellation_csv(path):
    """Return ``(voxel_ids, labels)``."""
    ids, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"voxel_id", "label"} <= set(reader.fieldnames):
            raise ParseError(f"{path}: expected columns voxel_id,label")
        for row in reader:
            ids.append(row["voxel_id"])
            try:
                labels.append(int(row["label"]))
            except ValueError:
                raise ParseError(f"{path}: bad label {row['label']!r}") from None
    return ids, np.array(labels, dtype=np.int64)
