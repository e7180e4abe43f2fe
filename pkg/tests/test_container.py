import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spire.container import (
    BadMagicError,
    HeaderError,
    TruncatedPayloadError,
    read_container,
    write_container,
)


def test_roundtrip_f32(tmp_path, rng):
    path = str(tmp_path / "x.spi")
    payload = rng.random((3, 5, 7)).astype(np.float32)
    header = {"role": "images", "seed": 42, "geometry": {"n_side": 7}}
    write_container(path, header, payload)
    back_header, back = read_container(path)
    assert np.array_equal(back, payload)
    assert back.dtype == np.float32
    assert back_header["role"] == "images"
    assert back_header["seed"] == 42
    assert back_header["geometry"] == {"n_side": 7}
    assert back_header["shape"] == [3, 5, 7]
    assert back_header["dtype"] == "float32"


def test_roundtrip_bitexact_file(tmp_path, rng):
    p1, p2 = str(tmp_path / "a.spi"), str(tmp_path / "b.spi")
    payload = rng.random((4, 4)).astype(np.float64)
    write_container(p1, {"role": "density", "voxel_size": 2.0}, payload)
    write_container(p2, {"role": "density", "voxel_size": 2.0}, payload)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.spi"
    write_container(str(path), {"role": "gammas"}, np.ones(3))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError) as exc:
        read_container(str(path))
    assert exc.value.offset == 0


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.spi"
    write_container(str(path), {"role": "gammas"}, np.ones(10))
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(TruncatedPayloadError) as exc:
        read_container(str(path))
    assert exc.value.expected == 80
    assert exc.value.actual == 79
    assert "expected 80" in str(exc.value)


def test_corrupt_header_json(tmp_path):
    path = tmp_path / "h.spi"
    write_container(str(path), {"role": "gammas"}, np.ones(2))
    raw = bytearray(path.read_bytes())
    raw[8] = ord("!")  # break the JSON open-brace
    path.write_bytes(bytes(raw))
    with pytest.raises(HeaderError):
        read_container(str(path))


def test_missing_role_rejected_on_write(tmp_path):
    with pytest.raises(ValueError):
        write_container(str(tmp_path / "x.spi"), {}, np.ones(2))
    with pytest.raises(ValueError):
        write_container(str(tmp_path / "x.spi"), {"role": "nonsense"}, np.ones(2))


def test_conflicting_shape_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_container(str(tmp_path / "x.spi"), {"role": "gammas", "shape": [99]}, np.ones(2))


@given(
    st.integers(1, 4),
    st.sampled_from([np.float32, np.float64, np.uint8, np.int64]),
    st.integers(0, 2**31),
)
@settings(max_examples=25, deadline=None)
def test_roundtrip_property(ndim, dtype, seed):
    import tempfile

    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in rng.integers(1, 5, size=ndim))
    if dtype in (np.float32, np.float64):
        payload = rng.random(shape).astype(dtype)
    else:
        payload = rng.integers(0, 100, size=shape).astype(dtype)
    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/p.spi"
        write_container(path, {"role": "params", "seed": seed}, payload)
        header, back = read_container(path)
    assert np.array_equal(back, payload)
    assert back.dtype == payload.dtype
    assert header["seed"] == seed
