import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from crystalsst import synthetic
from crystalsst.volume_io import (CorruptVolumeError, ScalarVolume, VolumeFormatError,
                                  export_field_slices, load_volume, save_volume)


@pytest.mark.parametrize("suffix", [".npy", ".f64raw"])
def test_zero_volume_round_trip(tmp_path, suffix):
    p = tmp_path / f"z{suffix}"
    save_volume(np.zeros((8, 8, 8)), p)
    vol = load_volume(p)
    assert vol.dims == (8, 8, 8)
    assert vol.data.size == 512 and not vol.data.any()


@pytest.mark.parametrize("suffix", [".npy", ".f64raw"])
def test_generated_volume_round_trip(tmp_path, suffix):
    vol, _ = synthetic.generate_polycrystal(synthetic.preset("single-grain-cubic", dims=64))
    p = tmp_path / f"g{suffix}"
    save_volume(vol, p)
    back = load_volume(p)
    assert np.max(np.abs(back.data - vol.data)) == 0
    assert back == vol


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(*[st.integers(1, 5)] * 3),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_round_trip_identity(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("rt")
    for suffix in (".npy", ".f64raw"):
        save_volume(data, d / f"v{suffix}")
        back = load_volume(d / f"v{suffix}")
        assert back.dims == data.shape
        assert back.data.tobytes() == np.ascontiguousarray(data).tobytes()


def test_float32_widened(tmp_path):
    a = np.arange(27, dtype=np.float32).reshape(3, 3, 3)
    np.save(tmp_path / "f.npy", a)
    vol = load_volume(tmp_path / "f.npy")
    assert vol.data.dtype == np.float64
    np.testing.assert_array_equal(vol.data, a)


def test_c_order_last_index_fastest(tmp_path):
    a = np.arange(24, dtype=float).reshape(2, 3, 4)
    save_volume(a, tmp_path / "o.f64raw")
    raw = np.frombuffer((tmp_path / "o.f64raw").read_bytes(), dtype="<f8")
    np.testing.assert_array_equal(raw[:4], [0, 1, 2, 3])
    meta = json.loads((tmp_path / "o.meta.json").read_text())
    assert meta == {"dims": [2, 3, 4], "dtype": "f64", "order": "C"}


def test_size_mismatch_is_corrupt(tmp_path):
    save_volume(np.zeros((4, 4, 4)), tmp_path / "c.f64raw")
    (tmp_path / "c.f64raw").write_bytes(b"\0" * 100)
    with pytest.raises(CorruptVolumeError):
        load_volume(tmp_path / "c.f64raw")


@pytest.mark.parametrize("sidecar", ["not json", '{"dtype": "f64"}', '{"dims": [4, 4]}',
                                     '{"dims": [2, 2, 2], "dtype": "f32"}'])
def test_malformed_header(tmp_path, sidecar):
    (tmp_path / "m.f64raw").write_bytes(b"\0" * 64)
    (tmp_path / "m.meta.json").write_text(sidecar)
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "m.f64raw")


def test_missing_sidecar(tmp_path):
    (tmp_path / "m.f64raw").write_bytes(b"\0" * 64)
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "m.f64raw")


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        ScalarVolume(np.full((2, 2, 2), np.nan))


def test_volume_is_immutable():
    vol = ScalarVolume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0


def test_slices_stride_8(tmp_path, rng):
    f = rng.normal(size=(64, 64, 64))
    paths = export_field_slices(f, axis=3, stride=8, out_dir=tmp_path)
    assert len(paths) == 8
    assert [p.name for p in paths] == [f"slice_3_{k}.npy" for k in range(0, 64, 8)]
    for p, k in zip(paths, range(0, 64, 8)):
        np.testing.assert_array_equal(np.load(p), f[:, :, k])


def test_slices_stride_L_gives_first_plane(tmp_path, rng):
    f = rng.normal(size=(8, 6, 5))
    paths = export_field_slices(f, axis=2, stride=6, out_dir=tmp_path)
    assert len(paths) == 1
    np.testing.assert_array_equal(np.load(paths[0]), f[:, 0, :])


@pytest.mark.parametrize("axis,stride", [(1, 3), (2, 4), (3, 5)])
def test_slice_indices_partition(tmp_path, rng, axis, stride):
    f = rng.normal(size=(9, 10, 11))
    paths = export_field_slices(f, axis=axis, stride=stride, out_dir=tmp_path)
    n = f.shape[axis - 1]
    assert len(paths) == -(-n // stride)
    idx = [int(p.stem.split("_")[-1]) for p in paths]
    assert idx == list(range(0, n, stride))
    for p, k in zip(paths, idx):
        np.testing.assert_array_equal(np.load(p), np.take(f, k, axis=axis - 1))


def test_slices_invalid(tmp_path):
    with pytest.raises(ValueError):
        export_field_slices(np.zeros((4, 4, 4)), axis=0, stride=1, out_dir=tmp_path)
    with pytest.raises(ValueError):
        export_field_slices(np.zeros((4, 4, 4)), axis=1, stride=5, out_dir=tmp_path)
