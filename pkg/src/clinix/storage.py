"""Binary volume (``MCVX``) and checkpoint (``MCKP``) files.

All integers and reals are little-endian.

Volume record::

    "MCVX" | u16 version | u8 dtype (0 = f64 image, 1 = u8 labels) | u8 rank
    | u32 extent * rank | f64 spacing * 3 | payload

A volume file holds the image record followed by the label record; the
sample id is the file name stem.

Checkpoint::

    "MCKP" | u16 version | u32 length + plan text (UTF-8)
    | u32 count + parameter records | u32 count + optimizer records | u64 step

where a record is ``u16 name length | name | u8 rank | u32 extent * rank |
f64 payload``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .net import NetworkPlan
from .synth import VolumeSample

VOLUME_MAGIC = b"MCVX"
CHECKPOINT_MAGIC = b"MCKP"
VOLUME_VERSION = 1
CHECKPOINT_VERSION = 1
MAX_RANK = 8
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def magic(self, expected: bytes):
        start = self.pos
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", start)

    def version(self, supported: int):
        start = self.pos
        (v,) = self.unpack("<H", "version")
        if v != supported:
            raise FormatError(f"unsupported format version {v}", start)

    def done(self, what: str):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes after {what}",
                              self.pos)


# -- volumes -----------------------------------------------------------------

def encode_array(arr: np.ndarray, spacing) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        code = 0
    elif arr.dtype == np.uint8:
        code = 1
    else:
        raise FormatError(f"volumes store float64 images or uint8 labels, got {arr.dtype}")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise FormatError(f"rank {arr.ndim} outside [1, {MAX_RANK}]")
    head = VOLUME_MAGIC + struct.pack("<HBB", VOLUME_VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<3d", *spacing)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_array(reader: _Reader):
    reader.magic(VOLUME_MAGIC)
    reader.version(VOLUME_VERSION)
    at = reader.pos
    code, rank = reader.unpack("<BB", "dtype and rank")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", at)
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"rank {rank} outside [1, {MAX_RANK}]", at + 1)
    shape = reader.unpack(f"<{rank}I", "extents")
    spacing = reader.unpack("<3d", "spacing")
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape)) * dtype.itemsize
    start = reader.pos
    if start + nbytes > len(reader.buf):
        raise FormatError(f"header extents {shape} need {nbytes} payload bytes, "
                          f"only {len(reader.buf) - start} present", start)
    payload = reader.take(nbytes, "payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return arr, spacing


def volume_bytes(sample: VolumeSample) -> bytes:
    labels = np.asarray(sample.labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FormatError(f"sample {sample.id}: labels outside the u8 range [0, 255]")
    return (encode_array(sample.image, sample.spacing)
            + encode_array(labels.astype(np.uint8), sample.spacing))


def volume_from_bytes(buf: bytes, sample_id: str = "sample") -> VolumeSample:
    reader = _Reader(buf)
    image, spacing = decode_array(reader)
    at = reader.pos
    labels, label_spacing = decode_array(reader)
    reader.done("label record")
    if image.dtype != np.float64 or labels.dtype != np.uint8:
        raise FormatError("expected an f64 image record followed by a u8 label record", at)
    if image.ndim != 4 or labels.ndim != 3 or image.shape[1:] != labels.shape:
        raise FormatError(f"image {image.shape} and labels {labels.shape} do not align", at)
    if label_spacing != spacing:
        raise FormatError("image and label spacing differ", at)
    return VolumeSample(image, labels, spacing, sample_id)


def write_volume(path, sample: VolumeSample):
    Path(path).write_bytes(volume_bytes(sample))


def read_volume(path) -> VolumeSample:
    path = Path(path)
    return volume_from_bytes(path.read_bytes(), path.stem)


def read_volume_dir(directory) -> list[VolumeSample]:
    return [read_volume(p) for p in sorted(Path(directory).glob("*.mcvx"))]


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    plan: NetworkPlan
    tensors: dict                              # parameters and norm buffers by dotted name
    optimizer: dict = field(default_factory=dict)
    step: int = 0


def _pack_record(name: str, arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def _unpack_record(reader: _Reader):
    (n,) = reader.unpack("<H", "record name length")
    at = reader.pos
    try:
        name = reader.take(n, "record name").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("record name is not UTF-8", at) from None
    at = reader.pos
    (rank,) = reader.unpack("<B", "record rank")
    if rank > MAX_RANK:
        raise FormatError(f"record {name!r} rank {rank} exceeds {MAX_RANK}", at)
    shape = reader.unpack(f"<{rank}I", "record extents")
    nbytes = int(np.prod(shape)) * 8
    if reader.pos + nbytes > len(reader.buf):
        raise FormatError(f"record {name!r} extents {shape} exceed the remaining payload",
                          reader.pos)
    arr = np.frombuffer(reader.take(nbytes, "record payload"), "<f8").reshape(shape)
    return name, arr.astype(np.float64)


def _pack_records(records: dict) -> bytes:
    return struct.pack("<I", len(records)) + b"".join(
        _pack_record(k, v) for k, v in records.items())


def _unpack_records(reader: _Reader) -> dict:
    (count,) = reader.unpack("<I", "record count")
    out = {}
    for _ in range(count):
        at = reader.pos
        name, arr = _unpack_record(reader)
        if name in out:
            raise FormatError(f"duplicate record {name!r}", at)
        out[name] = arr
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    plan = ckpt.plan.to_text().encode("utf-8")
    return (CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION)
            + struct.pack("<I", len(plan)) + plan
            + _pack_records(ckpt.tensors) + _pack_records(ckpt.optimizer)
            + struct.pack("<Q", ckpt.step))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    reader = _Reader(buf)
    reader.magic(CHECKPOINT_MAGIC)
    reader.version(CHECKPOINT_VERSION)
    (n,) = reader.unpack("<I", "plan length")
    at = reader.pos
    text = reader.take(n, "plan text")
    try:
        plan = NetworkPlan.from_text(text.decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable plan: {exc}", at) from None
    tensors = _unpack_records(reader)
    optimizer = _unpack_records(reader)
    (step,) = reader.unpack("<Q", "step counter")
    reader.done("step counter")
    return Checkpoint(plan, tensors, optimizer, step)


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
