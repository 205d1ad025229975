"""SVOL: a small little-endian container for volumes and label volumes.

Header (46 bytes)::

    magic     4s   b"SVOL"
    version   u32  1
    kind      u8   0 = real volume, 1 = label volume
    dtype     u8   0 = float32, 1 = uint8
    channels  u32
    dims      3*u32  (D, H, W)
    spacing   3*f32
    range     2*f32  declared intensity range

followed by the raw channel-major payload. Label volumes store
``(0, num_classes - 1)`` as their range so the class count survives a
round trip. Paths ending in ``.gz`` are gzip streams of the same bytes
(written with a zero mtime so output is reproducible).
"""

import gzip
import io
import struct

import numpy as np

from structvol.errors import FormatError
from structvol.volume import LabelVolume, Volume

MAGIC = b"SVOL"
VERSION = 1
KIND_REAL, KIND_LABEL = 0, 1
DTYPE_F32, DTYPE_U8 = 0, 1
_HEADER = struct.Struct("<4sIBBI3I3f2f")
HEADER_SIZE = _HEADER.size
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}


def encode(v):
    """Serialise a volume to SVOL bytes."""
    if isinstance(v, LabelVolume):
        header = _HEADER.pack(
            MAGIC, VERSION, KIND_LABEL, DTYPE_U8, 1, *v.dims, *v.spacing, 0.0, float(v.num_classes - 1)
        )
        payload = v.labels.astype("u1").tobytes(order="C")
    elif isinstance(v, Volume):
        header = _HEADER.pack(
            MAGIC, VERSION, KIND_REAL, DTYPE_F32, v.channels, *v.dims, *v.spacing, *v.intensity_range
        )
        payload = v.values.astype("<f4").tobytes(order="C")
    else:
        raise TypeError(f"cannot write {type(v).__name__} as SVOL")
    return header + payload


def decode(buf):
    """Parse SVOL bytes back into a :class:`Volume` or :class:`LabelVolume`."""
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"truncated header: expected {HEADER_SIZE} bytes, got {len(buf)}", len(buf))
    magic, version, kind, dtype, channels, d, h, w, sx, sy, sz, lo, hi = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if kind not in (KIND_REAL, KIND_LABEL):
        raise FormatError(f"unknown kind code {kind}", 8)
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype}", 9)
    expected_dtype = DTYPE_F32 if kind == KIND_REAL else DTYPE_U8
    if dtype != expected_dtype:
        raise FormatError(f"dtype code {dtype} does not match kind {kind}", 9)
    if kind == KIND_LABEL and channels != 1:
        raise FormatError(f"label volumes have one channel, header says {channels}", 10)
    if min(channels, d, h, w) < 1:
        raise FormatError(f"zero-sized volume: channels={channels} dims={(d, h, w)}", 10)
    n = channels * d * h * w * _DTYPES[dtype].itemsize
    actual = len(buf) - HEADER_SIZE
    if actual < n:
        raise FormatError(f"truncated payload: expected {n} bytes, got {actual}", len(buf))
    if actual > n:
        raise FormatError(f"trailing data: expected {n} payload bytes, got {actual}", HEADER_SIZE + n)
    data = np.frombuffer(buf, dtype=_DTYPES[dtype], count=n // _DTYPES[dtype].itemsize, offset=HEADER_SIZE)
    try:
        if kind == KIND_LABEL:
            return LabelVolume(data.reshape(d, h, w), (sx, sy, sz), int(round(hi)) + 1)
        return Volume(data.reshape(channels, d, h, w), (sx, sy, sz), (lo, hi))
    except ValueError as exc:
        raise FormatError(f"invalid payload: {exc}", HEADER_SIZE) from exc


def write_svol(path, v):
    data = encode(v)
    path = str(path)
    if path.endswith(".gz"):
        with open(path, "wb") as fh, gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
            gz.write(data)
    else:
        with open(path, "wb") as fh:
            fh.write(data)


def read_svol(path):
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".gz"):
        with gzip.GzipFile(fileobj=io.BytesIO(raw)) as gz:
            raw = gz.read()
    return decode(raw)
