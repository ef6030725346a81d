import json

import numpy as np
import pytest

from isorecon.volume import (
    Volume,
    denormalize,
    normalize,
    percentile_range,
    read_volume,
    sidecar_path,
    to_dtype,
    write_volume,
)


def sample(dtype, rng):
    if dtype == "float32":
        return rng.standard_normal((5, 6, 7)).astype(np.float32)
    info = np.iinfo(dtype)
    return rng.integers(info.min, info.max, (5, 6, 7), endpoint=True).astype(dtype)


@pytest.mark.parametrize("dtype", ["uint8", "uint16", "float32"])
@pytest.mark.parametrize("ext", [".tif", ".raw"])
def test_round_trip_is_lossless(dtype, ext, tmp_path, rng):
    vol = Volume.from_array(sample(dtype, rng), voxel_size=(40.0, 4.0, 4.0))
    path = write_volume(tmp_path / f"v{ext}", vol)
    back = read_volume(path)
    assert back.dtype == dtype
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.value_range == vol.value_range
    assert back.voxel_size == vol.voxel_size


def test_raw_layout_is_little_endian(tmp_path):
    vol = Volume.from_array(np.arange(8, dtype=np.uint16).reshape(2, 2, 2))
    path = write_volume(tmp_path / "v.raw", vol)
    assert path.read_bytes()[:4] == b"\x00\x00\x01\x00"
    meta = json.loads(sidecar_path(path).read_text())
    assert meta["shape"] == [2, 2, 2] and meta["dtype"] == "uint16"
    assert meta["value_range"] == [0.0, 65535.0]


def test_volume_validation(rng):
    with pytest.raises(ValueError):
        Volume.from_array(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume.from_array(np.zeros((2, 2, 2), dtype=np.int32))
    with pytest.raises(ValueError):
        Volume.from_array(np.zeros((2, 2, 2), dtype=np.uint8), voxel_size=(1.0, 1.0))


def test_io_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "missing.tif")
    with pytest.raises(ValueError):
        write_volume(tmp_path / "v.png", Volume.from_array(np.zeros((1, 2, 2), np.uint8)))
    (tmp_path / "orphan.raw").write_bytes(b"\x00" * 8)
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "orphan.raw")


def test_peak_and_float64_input():
    assert Volume.from_array(np.zeros((1, 1, 1), np.uint8)).peak == 255
    v = Volume.from_array(np.zeros((1, 1, 1)))
    assert v.dtype == "float32" and v.peak == 1.0


def test_normalization_round_trip(rng):
    data = rng.random((4, 8, 8)) * 200 + 20
    vr = percentile_range(data, 0, 100)
    norm = normalize(data, vr)
    assert norm.min() == -1.0 and norm.max() == 1.0
    np.testing.assert_allclose(denormalize(norm, vr), data, atol=1e-10)
    assert to_dtype(np.array([-3.0, 12.6, 300.0]), "uint8").tolist() == [0, 13, 255]
