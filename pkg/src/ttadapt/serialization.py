"""Checkpoint container and metrics CSV.

Checkpoints use a small self-describing binary layout ("MTTC"):

    magic   4 bytes  b"MTTC"
    version u32 LE
    count   u32 LE   number of tensors
    per tensor:
        name_len u32 LE, name bytes (utf-8)
        rank     u32 LE, then rank extents as u64 LE
        dtype    u32 LE  (0 = float64)
        payload  raw little-endian row-major values
    checksum 8 bytes  blake2b(digest_size=8) over all preceding bytes

Round trips are bit-exact; the checksum is verified before any tensor is
returned. Metrics go to CSV with LF endings and shortest round-trip
float formatting so a parse of the written file reproduces the report
values exactly.
"""

from __future__ import annotations

import csv
import hashlib
import struct

import numpy as np

from .training import MetricsRow, TrainReport

MAGIC = b"MTTC"
VERSION = 1
DTYPE_F64 = 0
_CHECKSUM_BYTES = 8


class CheckpointError(RuntimeError):
    """Base for checkpoint container problems."""


class TruncatedFileError(CheckpointError):
    """File ended before the declared content did."""


class ChecksumMismatchError(CheckpointError):
    """Stored checksum does not match the file bytes."""


class UnsupportedVersionError(CheckpointError):
    """Container version or dtype tag this reader does not know."""


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=_CHECKSUM_BYTES).digest()


def save_checkpoint(tensors, path) -> None:
    """Write named tensors; ``tensors`` is a dict or (name, array) pairs."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise ValueError(f"tensor names must be unique, got {names}")
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        # asarray, not ascontiguousarray: the latter would silently turn
        # rank-0 tensors into rank-1, and tobytes() is C-ordered anyway
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(struct.pack("<I", DTYPE_F64))
        parts.append(arr.astype("<f8", copy=False).tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_digest(payload))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> dict:
    """Read a checkpoint back; returns name -> float64 array, file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 + _CHECKSUM_BYTES:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes is too short for a checkpoint")
    body, stored = blob[:-_CHECKSUM_BYTES], blob[-_CHECKSUM_BYTES:]
    if _digest(body) != stored:
        raise ChecksumMismatchError(f"{path}: checksum mismatch; file is corrupt")
    r = _Reader(body, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported container version {version}")
    count = r.u32()
    out = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        dtype = r.u32()
        if dtype != DTYPE_F64:
            raise UnsupportedVersionError(f"{path}: unknown dtype tag {dtype} for tensor {name!r}")
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(8 * n_items)
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes after last tensor")
    return out


def adapter_tensors(adapter) -> dict:
    """Stable name -> array mapping of an adapter's trainable state."""
    if adapter.spec.variant == "lora":
        return {"lora_a": adapter.lora_a, "lora_b": adapter.lora_b}
    return {f"core{k}": c for k, c in enumerate(adapter.train.cores)}


def merged_tensors(merged) -> dict:
    """Name -> array mapping for a merged adapter: a plus per-site tails."""
    out = {"a": merged.a}
    for key, tail in merged.b.items():
        out["b:" + ",".join(str(i) for i in key)] = tail
    return out


# -- metrics CSV -------------------------------------------------------

METRICS_COLUMNS = ("epoch", "step", "split", "task_id", "loss", "metric",
                   "ranks", "param_count", "grad_norms", "wallclock_s")


def _fmt_float(value) -> str:
    return "" if value is None else repr(float(value))


def _row_cells(row: MetricsRow) -> list:
    return [
        str(row.epoch),
        str(row.step),
        row.split,
        str(row.task_id),
        _fmt_float(row.loss),
        _fmt_float(row.metric),
        ";".join(str(int(r)) for r in row.ranks),
        str(row.param_count),
        ";".join(f"{label}={repr(float(v))}" for label, v in row.grad_norms),
        _fmt_float(row.wallclock_s),
    ]


def write_metrics(report: TrainReport, path) -> None:
    """One header line plus one CSV row per report row; LF endings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in report.rows:
            writer.writerow(_row_cells(row))


def _parse_float(cell: str):
    return None if cell == "" else float(cell)


def _parse_ranks(cell: str) -> tuple:
    return tuple(int(p) for p in cell.split(";")) if cell else ()


def _parse_grad_norms(cell: str) -> tuple:
    if not cell:
        return ()
    pairs = []
    for part in cell.split(";"):
        label, _, value = part.partition("=")
        pairs.append((label, float(value)))
    return tuple(pairs)


def read_metrics(path) -> TrainReport:
    """Parse a metrics file back into a report (divergence flag not stored)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        rows = []
        for cells in reader:
            if len(cells) != len(METRICS_COLUMNS):
                raise ValueError(f"{path}: row has {len(cells)} cells, expected {len(METRICS_COLUMNS)}")
            rows.append(MetricsRow(
                epoch=int(cells[0]), step=int(cells[1]), split=cells[2],
                task_id=int(cells[3]), loss=_parse_float(cells[4]),
                metric=_parse_float(cells[5]), ranks=_parse_ranks(cells[6]),
                param_count=int(cells[7]), grad_norms=_parse_grad_norms(cells[8]),
                wallclock_s=_parse_float(cells[9])))
    return TrainReport(rows=rows)
