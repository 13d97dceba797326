"""Binary container for weights and raw tensors ("LSE1" format).

Layout, all little-endian:

    magic    4 bytes  b"LSE1"
    section  4 bytes  payload tag (b"ENC0" encoder, b"DEN0" denoiser,
                      b"TEN0" raw tensor sidecar)
    label    uint16 length + utf-8 bytes (preset id / free-form)
    seed     int64
    count    uint32 number of arrays
    per array: name (uint16 length + utf-8), ndim uint8,
               dims int64 * ndim
    data     float64 blocks in header order

Loading verifies the magic, the section tag when one is expected, and
that the declared shapes account for exactly the remaining bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"LSE1"
SECTION_ENCODER = b"ENC0"
SECTION_DENOISER = b"DEN0"
SECTION_TENSOR = b"TEN0"


class ContainerError(ValueError):
    """Raised when an LSE1 file is malformed or inconsistent."""


@dataclass
class Payload:
    section: bytes
    label: str
    seed: int
    arrays: dict[str, np.ndarray]


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ContainerError("label too long")
    return struct.pack("<H", len(raw)) + raw


def save_container(path, section: bytes, label: str, seed: int,
                   arrays: list[tuple[str, np.ndarray]]) -> None:
    if len(section) != 4:
        raise ContainerError(f"section tag must be 4 bytes, got {section!r}")
    head = [MAGIC, section, _pack_str(label), struct.pack("<q", int(seed)),
            struct.pack("<I", len(arrays))]
    blobs = []
    for name, arr in arrays:
        arr = np.asarray(arr, dtype=np.float64)
        head.append(_pack_str(name))
        head.append(struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        blobs.append(arr.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(head))
        for blob in blobs:
            fh.write(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def read_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_container(path, expect_section: bytes | None = None) -> Payload:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise ContainerError(f"{path}: bad magic, not an LSE1 file")
    section = r.take(4)
    if expect_section is not None and section != expect_section:
        raise ContainerError(f"{path}: section {section!r}, expected {expect_section!r}")
    label = r.read_str()
    (seed,) = r.unpack("<q")
    (count,) = r.unpack("<I")
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        name = r.read_str()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}q")
        if any(d < 1 for d in dims):
            raise ContainerError(f"{path}: nonpositive dim in array {name!r}: {dims}")
        shapes.append((name, tuple(int(d) for d in dims)))
    expected = sum(int(np.prod(s)) for _, s in shapes) * 8
    remaining = len(r.buf) - r.pos
    if remaining != expected:
        raise ContainerError(f"{path}: data block is {remaining} bytes, "
                             f"shape header requires {expected}")
    arrays = {}
    for name, shape in shapes:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(r.take(n * 8), dtype="<f8").reshape(shape).copy()
    return Payload(section=section, label=label, seed=int(seed), arrays=arrays)
