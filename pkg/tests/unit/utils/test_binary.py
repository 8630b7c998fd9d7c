"""Unit tests for the binary matrix container."""

import numpy as np
import pytest

from emocircuit.exceptions import DataError, WeightFormatError
from emocircuit.utils.binary import decode_container, encode_container, read_matrix_bundle, write_matrix_bundle


@pytest.mark.unit
def test_bundle_round_trip_keeps_order_and_meta(tmp_path) -> None:
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([-1.5])}
    path = write_matrix_bundle(tmp_path / "m.emm", arrays, {"emotion": "sad"})
    loaded, meta = read_matrix_bundle(path)
    assert list(loaded) == ["b", "a"]
    assert np.array_equal(loaded["b"], arrays["b"])
    assert meta == {"emotion": "sad"}


@pytest.mark.unit
def test_container_rejects_damage() -> None:
    data = encode_container(b"TEST", {"k": 1}, [np.ones(3)])
    header, payload = decode_container(data, b"TEST")
    assert header["k"] == 1
    assert len(payload) == 24
    with pytest.raises(DataError, match="magic"):
        decode_container(data, b"EMM1")
    flipped = bytearray(data)
    flipped[12] ^= 0xFF
    with pytest.raises(DataError, match="checksum"):
        decode_container(bytes(flipped), b"TEST")
    with pytest.raises(DataError, match="too short"):
        decode_container(data[:8], b"TEST")
    with pytest.raises(ValueError):
        encode_container(b"TOOLONG", {}, [])


@pytest.mark.unit
def test_reader_raises_the_requested_error(tmp_path) -> None:
    path = write_matrix_bundle(tmp_path / "m.emm", {"a": np.zeros(2)})
    data = path.read_bytes()
    path.write_bytes(data[:-5] + data[-4:])
    with pytest.raises(WeightFormatError):
        read_matrix_bundle(path, error=WeightFormatError)
