"""File format converters: checkpoints, batch exports, metrics and CSV dumps."""
import csv
import json
import logging
import struct
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np

from src.errors import CheckpointError
from src.schemas import BENCH_COLUMNS, BenchReport, MetricsRecord
from src.tasks import TaskBatch
from src.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"ZSCK"
VERSION = 1
OPTIMIZER_PREFIXES = ("opt.", "meta.")


def encode_checkpoint(entries: Mapping[str, np.ndarray | Tensor]) -> bytes:
    """Serialize named arrays to the ZSCK layout.

    Layout (all integers little-endian):
    - magic "ZSCK", u32 version, u32 entry count
    - per entry: u32 name length, UTF-8 name, u32 rank, rank x u64 extents,
      u64 absolute byte offset of the payload
    - payloads: raw float32 little-endian values, row-major, in entry order
    """
    arrays = {name: np.asarray(a.data if isinstance(a, Tensor) else a, dtype="<f4") for name, a in entries.items()}
    names = [name.encode("utf-8") for name in arrays]
    header_size = 12 + sum(4 + len(n) + 4 + 8 * arr.ndim + 8 for n, arr in zip(names, arrays.values()))

    header = bytearray(MAGIC + struct.pack("<II", VERSION, len(arrays)))
    offset = header_size
    for name, arr in zip(names, arrays.values()):
        header += struct.pack("<I", len(name)) + name
        header += struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape)
        header += struct.pack("<Q", offset)
        offset += arr.nbytes
    return bytes(header) + b"".join(np.ascontiguousarray(arr).tobytes() for arr in arrays.values())


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    """Parse a ZSCK blob into float64 arrays."""
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4 : pos + 4 + name_len].decode("utf-8")
            pos += 4 + name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{rank}Q", blob, pos + 4)
            (offset,) = struct.unpack_from("<Q", blob, pos + 4 + 8 * rank)
            pos += 4 + 8 * rank + 8
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * size > len(blob):
                raise CheckpointError(f"payload of {name!r} runs past the end of the file")
            out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    return out


def save_checkpoint(path: Path, entries: Mapping[str, np.ndarray | Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(entries))
    logger.info(f"Saved checkpoint with {len(entries)} entries to {path}")


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def check_model_entries(entries: Mapping[str, np.ndarray], shapes: Mapping[str, tuple[int, ...]]) -> None:
    """Model entries must match `shapes` exactly; optimizer/meta entries are ignored."""
    model_names = {n for n in entries if not n.startswith(OPTIMIZER_PREFIXES)}
    missing, extra = set(shapes) - model_names, model_names - set(shapes)
    if missing or extra:
        raise CheckpointError(f"checkpoint entries differ from config: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, shape in shapes.items():
        if entries[name].shape != tuple(shape):
            raise CheckpointError(f"{name}: checkpoint shape {entries[name].shape} != config shape {tuple(shape)}")


# Batches
def batch_to_jsonl(batch: TaskBatch, stream: IO[str]) -> None:
    """One JSON object per sequence: {"tokens": [...], "labels": [...], "mask": [...]}."""
    for tokens, labels, mask in zip(batch.tokens, batch.labels, batch.loss_mask):
        stream.write(json.dumps({"tokens": tokens.tolist(), "labels": labels.tolist(), "mask": mask.tolist()}) + "\n")


def batch_from_jsonl(stream: IO[str]) -> TaskBatch:
    rows = [json.loads(line) for line in stream if line.strip()]
    return TaskBatch(
        tokens=np.array([r["tokens"] for r in rows], dtype=np.int64),
        labels=np.array([r["labels"] for r in rows], dtype=np.int64),
        loss_mask=np.array([r["mask"] for r in rows], dtype=bool),
    )


# Metrics
def append_metrics(path: Path, record: MetricsRecord) -> None:
    with Path(path).open("a") as f:
        f.write(record.model_dump_json() + "\n")


def read_metrics(path: Path) -> list[MetricsRecord]:
    with Path(path).open() as f:
        return [MetricsRecord.model_validate_json(line) for line in f if line.strip()]


# CSV
def write_weight_csv(weights, path: Path) -> None:
    """Row-major dump of one N x N weight matrix."""
    data = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    if data.ndim != 2:
        raise ValueError(f"weight dump needs a 2-D matrix, got shape {data.shape}")
    np.savetxt(path, data, delimiter=",", fmt="%.17g")


def write_bench_csv(reports: Iterable[BenchReport], stream: IO[str]) -> None:
    writer = csv.DictWriter(stream, fieldnames=BENCH_COLUMNS)
    writer.writeheader()
    for report in reports:
        writer.writerow(report.model_dump())
