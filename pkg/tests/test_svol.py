import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structvol import FormatError, LabelVolume, Volume, read_svol, write_svol
from structvol.svol import HEADER_SIZE, decode, encode


def test_header_fields():
    buf = encode(Volume(np.zeros((1, 2, 2, 2))))
    assert HEADER_SIZE == 46 and len(buf) == 46 + 8 * 4
    magic, version, kind, dtype, ch, d, h, w = struct.unpack_from("<4sIBBI3I", buf)
    assert (magic, version, kind, dtype, ch, (d, h, w)) == (b"SVOL", 1, 0, 0, 1, (2, 2, 2))


def test_label_roundtrip_keeps_num_classes():
    m = LabelVolume(np.array([[[0, 3]]]), spacing=(0.5, 1, 2), num_classes=4)
    back = decode(encode(m))
    assert isinstance(back, LabelVolume)
    assert back.num_classes == 4 and back.spacing == m.spacing
    np.testing.assert_array_equal(back.labels, m.labels)


def test_truncated_payload_names_lengths():
    buf = encode(Volume(np.ones((1, 2, 2, 2))))
    with pytest.raises(FormatError, match="expected 32 bytes, got 20"):
        decode(buf[:-12])


@pytest.mark.parametrize(
    "patch, offset",
    [((0, b"XVOL"), 0), ((4, b"\x02"), 4), ((8, b"\x07"), 8), ((9, b"\x05"), 9)],
)
def test_header_errors_report_offset(patch, offset):
    buf = bytearray(encode(Volume(np.ones((1, 1, 1, 1)))))
    at, data = patch
    buf[at:at + len(data)] = data
    with pytest.raises(FormatError) as ei:
        decode(bytes(buf))
    assert ei.value.offset == offset


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError, match="trailing"):
        decode(encode(Volume(np.ones((1, 1, 1, 1)))) + b"\0")


def test_gzip_is_reproducible(tmp_path):
    v = Volume(np.random.default_rng(0).normal(size=(2, 3, 4, 5)))
    a, b = tmp_path / "a.svol.gz", tmp_path / "b.svol.gz"
    write_svol(a, v)
    write_svol(b, v)
    assert a.read_bytes() == b.read_bytes()
    assert gzip.decompress(a.read_bytes()) == encode(v)
    assert encode(read_svol(a)) == encode(v)




@st.composite
def volumes(draw):
    dims = tuple(draw(st.integers(1, 5)) for _ in range(3))
    spacing = tuple(draw(st.floats(0.125, 64.0, width=32)) for _ in range(3))
    if draw(st.booleans()):
        k = draw(st.integers(1, 256))
        seed = draw(st.integers(0, 2 ** 32 - 1))
        lab = np.random.default_rng(seed).integers(0, k, dims)
        return LabelVolume(lab, spacing, k)
    ch = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    scale = draw(st.sampled_from([1e-3, 1.0, 1e6]))
    vals = np.random.default_rng(seed).normal(0, scale, (ch,) + dims)
    lo = draw(st.floats(-1e6, 1e6, width=32))
    return Volume(vals, spacing, (lo, lo + 1.0) if draw(st.booleans()) else None)


@settings(max_examples=1000, deadline=None)
@given(volumes())
def test_roundtrip_bit_exact(v):
    buf = encode(v)
    back = decode(buf)
    assert type(back) is type(v)
    assert encode(back) == buf
