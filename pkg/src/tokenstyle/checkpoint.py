"""Binary checkpoint container for named float32 tensors.

Layout (all integers little-endian)::

    b"SDTK"  u32 version
    u32 metadata_bytes, UTF-8 "key=value" lines
    u32 tensor_count
    per tensor: u32 name_bytes, UTF-8 name, u32 rank, rank x u64 extents,
                float32 data (row-major)

Writing the same tensors and metadata always yields the same bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactIOError, DependencyError

MAGIC = b"SDTK"
VERSION = 1


@dataclass
class Checkpoint:
    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<I", VERSION)]
        meta_lines = []
        for k, v in self.metadata.items():
            k, v = str(k), str(v)
            if "\n" in k or "=" in k or "\n" in v:
                raise ValueError(f"metadata entry {k!r} cannot be encoded")
            meta_lines.append(f"{k}={v}\n")
        meta = "".join(meta_lines).encode("utf-8")
        out += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            raw_name = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank 0
            out += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", arr.ndim)]
            out += [struct.pack("<Q", n) for n in arr.shape]
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> Checkpoint:
        reader = _Reader(blob)
        if reader.take(4) != MAGIC:
            raise ArtifactIOError("not a checkpoint (bad magic)")
        version = reader.u32()
        if version != VERSION:
            raise ArtifactIOError(f"unsupported checkpoint version {version}")
        meta_text = reader.take(reader.u32()).decode("utf-8")
        metadata = {}
        for line in meta_text.splitlines():
            key, _, value = line.partition("=")
            metadata[key] = value
        tensors = {}
        for _ in range(reader.u32()):
            name = reader.take(reader.u32()).decode("utf-8")
            rank = reader.u32()
            shape = tuple(struct.unpack("<Q", reader.take(8))[0] for _ in range(rank))
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
            tensors[name] = data.astype(np.float32)
        if reader.pos != len(blob):
            raise ArtifactIOError("trailing bytes after tensor table")
        return cls(metadata, tensors)

    def save(self, path: str | Path) -> None:
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise ArtifactIOError(f"cannot write checkpoint {path}: {exc}") from None

    @classmethod
    def load(cls, path: str | Path, stage: str | None = None) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"missing checkpoint {path}"
                                  + (f" (run the {stage} stage first)" if stage else ""))
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise ArtifactIOError(f"cannot read checkpoint {path}: {exc}") from None
        return cls.from_bytes(blob)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ArtifactIOError("truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]
