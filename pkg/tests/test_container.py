import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from spikewm.container import (CHECKPOINT_MAGIC, EPISODE_MAGIC, config_digest, decode, encode, read_container,
                               write_container)
from spikewm.errors import FormatError

arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
                    elements=st.floats(allow_nan=False, width=64))


@given(recs=st.lists(st.dictionaries(st.text(min_size=1, max_size=8), arrays, max_size=3), max_size=3),
       digest=st.text(max_size=20))
def test_roundtrip(recs, digest):
    back, d = decode(encode(CHECKPOINT_MAGIC, recs, digest), CHECKPOINT_MAGIC)
    assert d == digest and len(back) == len(recs)
    for a, b in zip(recs, back):
        assert list(a) == list(b)
        for k in a:
            assert a[k].shape == b[k].shape
            np.testing.assert_array_equal(a[k], b[k])


def test_layout_is_documented_little_endian():
    data = encode(EPISODE_MAGIC, [{"x": np.array([1.5, -2.0])}], "ab")
    expected = (b"SWE1" + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab" + struct.pack("<I", 1)
                + struct.pack("<I", 1) + struct.pack("<I", 1) + b"x" + struct.pack("<I", 1)
                + struct.pack("<Q", 2) + struct.pack("<2d", 1.5, -2.0))
    assert data == expected


def test_file_roundtrip(tmp_path):
    p = tmp_path / "a.swm"
    write_container(p, CHECKPOINT_MAGIC, [{"w": np.eye(3)}], "d")
    recs, d = read_container(p, CHECKPOINT_MAGIC)
    np.testing.assert_array_equal(recs[0]["w"], np.eye(3))


def test_rejects_corruption():
    good = encode(CHECKPOINT_MAGIC, [{"w": np.ones((2, 2))}])
    with pytest.raises(FormatError, match="magic"):
        decode(good, EPISODE_MAGIC)
    with pytest.raises(FormatError, match="version"):
        decode(good[:4] + struct.pack("<I", 9) + good[8:], CHECKPOINT_MAGIC)
    for cut in (3, 10, len(good) - 1):
        with pytest.raises(FormatError, match="truncated"):
            decode(good[:cut], CHECKPOINT_MAGIC)
    with pytest.raises(FormatError, match="trailing"):
        decode(good + b"\0", CHECKPOINT_MAGIC)
    huge = encode(CHECKPOINT_MAGIC, [{"w": np.ones(1)}])
    i = huge.index(b"w") + 1 + 4
    with pytest.raises(FormatError):
        decode(huge[:i] + struct.pack("<Q", 2 ** 62) + huge[i + 8:], CHECKPOINT_MAGIC)


def test_digest_stable():
    assert config_digest("a = 1\n") == config_digest("a = 1\n")
    assert config_digest("a = 1\n") != config_digest("a = 2\n")
    assert len(config_digest("")) == 64
