import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from geoflow.persistence import (
    ChecksumError,
    FormatError,
    KIND_PAIRED_DATASET,
    TruncatedError,
    VersionError,
    decode_checkpoint,
    decode_container,
    encode_checkpoint,
    encode_container,
    fmt,
    read_container,
    read_csv,
    write_container,
    write_csv,
)

from conftest import random_corrector


def test_empty_payload_roundtrip(tmp_path):
    write_container(tmp_path / "e.gfd", np.zeros((0, 3)))
    arr, kind, aux = read_container(tmp_path / "e.gfd")
    assert arr.shape == (0, 3)
    assert kind == 0 and aux == ()


@settings(max_examples=50)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12)))
def test_random_payload_bit_equal(a):
    arr, _, _ = decode_container(encode_container(a))
    assert arr.tobytes() == np.ascontiguousarray(a, dtype="<f8").tobytes()


def test_kind_and_aux_kept():
    blob = encode_container(np.ones((2, 5)), KIND_PAIRED_DATASET, (2, 2, 1))
    _, kind, aux = decode_container(blob)
    assert kind == KIND_PAIRED_DATASET and aux == (2, 2, 1)


def test_every_single_bit_flip_detected():
    blob = encode_container(np.arange(6.0).reshape(3, 2), aux=(1,))
    for i in range(len(blob)):
        for b in range(8):
            bad = bytearray(blob)
            bad[i] ^= 1 << b
            with pytest.raises(FormatError):
                decode_container(bytes(bad))


def test_truncation_detected():
    blob = encode_container(np.arange(6.0).reshape(3, 2))
    for cut in (0, 3, 10, len(blob) - 1):
        with pytest.raises(FormatError):
            decode_container(blob[:cut])


def test_version_gate():
    a = np.ones((1, 1))
    body = encode_container(a)[:-4]
    body = body[:4] + struct.pack("<H", 99) + body[6:]
    import zlib

    blob = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(VersionError):
        decode_container(blob)


def test_inconsistent_size_is_truncation():
    import zlib

    body = encode_container(np.ones((2, 2)))[:-4]
    body = body[:-8]
    with pytest.raises(TruncatedError):
        decode_container(body + struct.pack("<I", zlib.crc32(body)))


def test_checkpoint_header_is_json():
    blob = encode_checkpoint(random_corrector())
    (hlen,) = struct.unpack_from("<I", blob, 5)
    header = json.loads(blob[9 : 9 + hlen])
    assert header["version"] == 1 and header["kind"] == "corrector"
    assert blob[:5] == b"GFNC1"


def test_checkpoint_flips_detected():
    blob = encode_checkpoint(random_corrector(hidden=(2,)))
    for i in range(0, len(blob), 7):
        bad = bytearray(blob)
        bad[i] ^= 0x10
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(bad))


def test_checkpoint_bad_dtype():
    with pytest.raises(ValueError):
        encode_checkpoint(random_corrector(), dtype="<f2")


def test_csv_format(tmp_path):
    write_csv(tmp_path / "a.csv", ["i", "x"], [[1, 0.1], [2, 1 / 3]])
    text = (tmp_path / "a.csv").read_text(encoding="utf-8")
    assert text.splitlines() == ["i,x", "1,0.10000000000000001", "2,0.33333333333333331"]
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["i", "x"] and rows[1][1] == 1 / 3


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_roundtrips_floats(x):
    assert float(fmt(x)) == x
