import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from lip2speech.container import ContainerError, read_container, write_container

DTYPES = [np.float32, np.float64, np.int64, np.uint8]


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(
    st.text(alphabet="abcxyz/_0123", min_size=1, max_size=10),
    st.sampled_from(DTYPES).flatmap(lambda dt: arrays(dt, array_shapes(min_dims=0, max_dims=3, max_side=5))),
    max_size=4,
))
def test_round_trip_is_bit_exact(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("c") / "x.bin"
    meta = {"kind": "test", "nested": {"a": [1, 2.5, None]}}
    write_container(path, tensors, meta)
    back, back_meta = read_container(path)
    assert back_meta == meta
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()


def test_same_input_same_bytes(tmp_path):
    t = {"b": np.arange(5, dtype=np.float32), "a": np.eye(2)}
    write_container(tmp_path / "1", t, {"m": 1})
    write_container(tmp_path / "2", dict(reversed(list(t.items()))), {"m": 1})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_header_is_little_endian_json(tmp_path):
    write_container(tmp_path / "x", {"w": np.ones(3, dtype=">f4")})
    raw = (tmp_path / "x").read_bytes()
    assert raw[:8] == b"L2STNSR1"
    back, _ = read_container(tmp_path / "x")
    assert back["w"].dtype == np.dtype("<f4")
    np.testing.assert_array_equal(back["w"], np.ones(3))


def test_rejects_bad_inputs(tmp_path):
    with pytest.raises(ContainerError):
        write_container(tmp_path / "x", {"c": np.zeros(2, dtype=np.complex64)})
    (tmp_path / "junk").write_bytes(b"not a container")
    with pytest.raises(ContainerError):
        read_container(tmp_path / "junk")
