"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DKGE"                 magic
    u32                     format version
    u32 + bytes             header: UTF-8 JSON (model config, graph sizes,
                            entry count, optional training metadata)
    entry * count:
        u32 + bytes         name (UTF-8)
        u32                 rank
        u64 * rank          extents
        f64 * prod(extents) values, row-major

Entries are the model parameters in registry order, then batch-norm running
statistics, then optional optimizer state (names prefixed ``optim.``).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatchError, CheckpointTruncatedError, CheckpointVersionError
from .models import KGEModel, ModelConfig

MAGIC = b"DKGE"
VERSION = 1
OPTIM_PREFIX = "optim."


@dataclass
class Checkpoint:
    model: KGEModel
    config: ModelConfig
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(model: KGEModel, path: str | Path, optimizer_state: dict[str, np.ndarray] | None = None,
                    metadata: dict | None = None) -> None:
    entries = list(model.state_dict().items())
    entries += [(OPTIM_PREFIX + k, np.asarray(v, dtype=np.float64)) for k, v in (optimizer_state or {}).items()]
    header = {
        "config": model.config.to_dict(),
        "n_entities": model.n_entities,
        "n_base_relations": model.n_base_relations,
        "entries": len(entries),
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    for name, arr in entries:
        _write_entry(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint; nothing is returned on any error."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic bytes)")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        n_entities, n_base_relations = header["n_entities"], header["n_base_relations"]
        count = header["entries"]
    except CheckpointTruncatedError:
        raise
    except Exception as exc:  # malformed header of any kind
        raise CheckpointMismatchError(f"{path}: unreadable header ({exc})") from None

    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}Q", reader.take(8 * rank))
        n = math.prod(shape)
        entries[name] = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if reader.pos != len(reader.data):
        raise CheckpointMismatchError(f"{path}: {len(reader.data) - reader.pos} trailing bytes after payload")

    model = KGEModel(config, n_entities, n_base_relations)
    expected = {name: t.shape for name, t in model.named_parameters()}
    expected.update({name: b.shape for name, b in model.buffers().items()})
    state = {k: v for k, v in entries.items() if not k.startswith(OPTIM_PREFIX)}
    if list(state) != list(expected):
        raise CheckpointMismatchError(f"{path}: registry {list(state)} does not match config {list(expected)}")
    for name, shape in expected.items():
        if state[name].shape != shape:
            raise CheckpointMismatchError(f"{path}: {name} has shape {state[name].shape}, config implies {shape}")
    model.load_state_dict(state)
    optim = {k[len(OPTIM_PREFIX):]: v for k, v in entries.items() if k.startswith(OPTIM_PREFIX)}
    return Checkpoint(model, config, optim, header.get("metadata", {}))
