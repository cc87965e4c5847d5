"""Binary checkpoint format for named float32 tensors.

Layout (all integers little-endian u32):

    magic   4 bytes  b"MVSL"
    version u32      format version (currently 1)
    fp_len  u32      length of the architecture fingerprint string
    fp      bytes    UTF-8 fingerprint (sha256 hex of the encoder config)
    count   u32      number of tensors
    per tensor:
        name_len u32, name UTF-8 bytes, rank u32, dims u32 x rank,
        payload float32 little-endian, C order

Loading verifies the fingerprint against the expected architecture and
rejects mismatches unless an explicit override is passed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MVSL"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], fingerprint: str) -> None:
    path = Path(path)
    parts: list[bytes] = [MAGIC, struct.pack("<I", VERSION)]
    fp = fingerprint.encode("utf-8")
    parts.append(struct.pack("<I", len(fp)))
    parts.append(fp)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        # np.ascontiguousarray would promote 0-d arrays to shape (1,);
        # np.asarray preserves rank and tobytes(order="C") copies as needed.
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes(order="C"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint (wanted {n} bytes at offset {self.off})")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_tensors(path: str | Path, expect_fingerprint: str | None = None,
                 override_fingerprint: bool = False) -> tuple[dict[str, np.ndarray], str]:
    """Read a checkpoint; returns (tensors, stored fingerprint).

    When `expect_fingerprint` is given and differs from the stored one, a
    CheckpointError is raised unless `override_fingerprint` is set.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint file does not exist")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint file)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    fp = r.take(r.u32()).decode("utf-8")
    if expect_fingerprint is not None and fp != expect_fingerprint and not override_fingerprint:
        raise CheckpointError(
            f"{path}: architecture fingerprint mismatch (checkpoint {fp[:12]}..., "
            f"expected {expect_fingerprint[:12]}...); pass the override flag to load anyway")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n_elem = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n_elem)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.off != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.off} trailing bytes after last tensor")
    return tensors, fp
