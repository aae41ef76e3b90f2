import json
import struct

import numpy as np
import pytest

from commonkv import tensorfile
from commonkv.errors import NumericError


def _sample():
    rng = np.random.default_rng(0)
    return {
        "b.mat": rng.standard_normal((3, 4)).astype(np.float32),
        "a.vec": rng.standard_normal(5).astype(np.float32),
        "c.cube": rng.standard_normal((2, 2, 2)).astype(np.float32),
    }


def test_round_trip():
    tensors = _sample()
    blob = tensorfile.serialize(tensors, meta={"kind": "test", "seed": 1})
    loaded, meta = tensorfile.deserialize(blob)
    assert meta == {"kind": "test", "seed": 1}
    assert set(loaded) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_serialization_deterministic_regardless_of_insertion_order():
    tensors = _sample()
    reordered = {k: tensors[k] for k in reversed(list(tensors))}
    assert tensorfile.serialize(tensors) == tensorfile.serialize(reordered)


def test_byte_layout():
    tensors = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    blob = tensorfile.serialize(tensors, meta={})
    (header_len,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + header_len])
    assert header["tensors"]["x"] == {"dtype": "f32", "shape": [2, 3], "offset": 0}
    payload = blob[8 + header_len:]
    # row-major little-endian f32
    assert np.frombuffer(payload, dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_payload_nbytes_counts_only_tensor_data():
    tensors = _sample()
    blob = tensorfile.serialize(tensors, meta={"padding": "x" * 100})
    assert tensorfile.payload_nbytes(blob) == 4 * sum(a.size for a in tensors.values())


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        tensorfile.serialize({"bad": np.array([1.0, np.nan], dtype=np.float32)})


def test_file_round_trip(tmp_path):
    path = tmp_path / "weights.tnsr"
    tensors = _sample()
    tensorfile.save(path, tensors, meta={"kind": "test"})
    loaded, meta = tensorfile.load(path)
    assert meta["kind"] == "test"
    np.testing.assert_array_equal(loaded["b.mat"], tensors["b.mat"])
