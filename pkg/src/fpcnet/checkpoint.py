"""Named parameter store and its binary checkpoint format.

Layout (little-endian throughout):
  magic "FPCK" | version u32 | config length u32 + UTF-8 config text |
  tensor count u32 | per tensor: name length u16 + UTF-8 name, rank u8,
  extents u32 each, dtype tag u8 (0 = f32, 1 = f64), raw data.

Round trips are bit-exact. Optimizer velocity buffers are stored under an
``opt.velocity/`` name prefix when present.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .config import NetworkConfig
from .errors import CheckpointFormatError, CheckpointShapeError

MAGIC = b"FPCK"
FORMAT_VERSION = 1
VELOCITY_PREFIX = "opt.velocity/"

_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ParamStore:
    """Ordered map of parameter name -> tensor, with its network config."""

    def __init__(self, config: NetworkConfig, tensors: dict[str, np.ndarray],
                 velocities: dict[str, np.ndarray] | None = None):
        self.config = config
        self.tensors = dict(tensors)
        self.velocities = dict(velocities) if velocities else {}

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamStore):
            return NotImplemented
        if self.config != other.config:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    def total_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    if arr.dtype not in _DTYPE_TAGS:
        raise CheckpointFormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def save_checkpoint(store: ParamStore, path: str | Path, include_velocity: bool = False) -> None:
    """Write atomically (temp file + rename): failures leave no partial file."""
    path = Path(path)
    entries = list(store.tensors.items())
    if include_velocity:
        entries += [(VELOCITY_PREFIX + k, v) for k, v in store.velocities.items()]
    config_text = store.config.to_text().encode("utf-8")

    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<I", len(config_text)))
            fh.write(config_text)
            fh.write(struct.pack("<I", len(entries)))
            for name, arr in entries:
                _write_tensor(fh, name, arr)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint file {self.path}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> ParamStore:
    """Read and validate a checkpoint; shapes are checked against its config."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    rd = _Reader(data, path)

    if rd.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes (not a checkpoint)")
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    (config_len,) = rd.unpack("<I")
    config_text = rd.take(config_len).decode("utf-8")
    config = NetworkConfig.from_text(config_text)

    (count,) = rd.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    velocities: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        (rank,) = rd.unpack("<B")
        shape = rd.unpack(f"<{rank}I") if rank else ()
        (tag,) = rd.unpack("<B")
        if tag not in _TAG_DTYPES:
            raise CheckpointFormatError(f"{path}: unknown dtype tag {tag} for tensor {name!r}")
        dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(rd.take(n_bytes), dtype=dtype).reshape(shape).copy()
        if name.startswith(VELOCITY_PREFIX):
            velocities[name[len(VELOCITY_PREFIX):]] = arr
        else:
            tensors[name] = arr
    if rd.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - rd.pos} trailing bytes")

    from .model import parameter_plan  # deferred: model imports this module

    expected = {name: shape for name, shape, _ in parameter_plan(config)}
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointShapeError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"config implies {shape}"
            )
    for name in tensors:
        if name not in expected:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name!r}")
    for name, vel in velocities.items():
        if name not in expected or vel.shape != expected[name]:
            raise CheckpointShapeError(f"{path}: velocity buffer {name!r} does not match config")

    ordered = {name: tensors[name] for name in expected}
    return ParamStore(config, ordered, velocities)
