import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from segood.nifti import NiftiError, read_nifti, read_raw, write_nifti, write_raw
from segood.volume import BinaryMask, ImageVolume, ProbabilityMap, Spacing, threshold_map


def _raw_nifti(data, datatype, bitpix, spacing=(1, 1, 1), slope=0.0, inter=0.0, order="<"):
    """Hand-built NIfTI-1 bytes, independent of write_nifti."""
    hdr = bytearray(348)
    struct.pack_into(order + "i", hdr, 0, 348)
    struct.pack_into(order + "8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into(order + "2h", hdr, 70, datatype, bitpix)
    struct.pack_into(order + "8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into(order + "f", hdr, 108, 352.0)
    struct.pack_into(order + "2f", hdr, 112, slope, inter)
    hdr[344:348] = b"n+1\x00"
    payload = data.astype(data.dtype.newbyteorder(order)).tobytes(order="F")
    return bytes(hdr) + b"\x00" * 4 + payload


def test_spacing_validation():
    assert Spacing.coerce(2) == (2.0, 2.0, 2.0)
    with pytest.raises(ValueError):
        Spacing.coerce((1, 0, 1))
    with pytest.raises(ValueError):
        Spacing.coerce((1, float("nan"), 1))


def test_volume_is_read_only_copy():
    arr = np.zeros((2, 3, 4))
    vol = ImageVolume(arr)
    arr[0, 0, 0] = 5
    assert vol.data[0, 0, 0] == 0
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1
    assert vol.dims == (2, 3, 4)


def test_volume_rejects_bad_values():
    with pytest.raises(ValueError):
        ImageVolume(np.full((2, 2, 2), np.inf))
    with pytest.raises(ValueError):
        ProbabilityMap(np.full((2, 2, 2), 1.5))
    with pytest.raises(ValueError):
        BinaryMask(np.full((2, 2, 2), 2))


def test_threshold_boundary_rule():
    p = ProbabilityMap(np.array([0.49, 0.5, 0.51]).reshape(3, 1, 1))
    assert threshold_map(p, 0.5).data.ravel().tolist() == [0, 1, 1]
    assert threshold_map(ProbabilityMap(np.zeros((4, 4, 4)))).count == 0
    assert threshold_map(ProbabilityMap(np.full((10, 10, 10), 0.7))).count == 1000
    with pytest.raises(ValueError):
        threshold_map(p, 1.0)


@given(hnp.arrays(np.float32, (3, 4, 2), elements=st.floats(0, 1, width=32)),
       st.floats(0.01, 0.98), st.floats(0.0, 0.01))
def test_threshold_monotone(arr, t, dt):
    p = ProbabilityMap(arr)
    lo = threshold_map(p, t).data
    hi = threshold_map(p, min(t + dt, 0.99)).data
    assert np.all(hi <= lo)


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_roundtrip_float32_bit_exact(tmp_path, suffix):
    rng = np.random.default_rng(1)
    data = rng.normal(size=(8, 8, 8)).astype(np.float32)
    vol = ImageVolume(data, (0.7, 0.8, 2.5), (10.0, -3.0, 4.5), "HU")
    path = tmp_path / f"v{suffix}"
    write_nifti(vol, path)
    back = read_nifti(path)
    assert back.dims == vol.dims
    assert np.allclose(back.spacing, vol.spacing, atol=1e-6)
    assert np.array_equal(back.data.view(np.uint32), vol.data.view(np.uint32))
    assert back.unit == "HU"
    assert np.allclose(back.origin, vol.origin)


def test_label_written_as_uint8(tmp_path):
    m = BinaryMask(np.eye(4, dtype=np.uint8)[:, :, None].repeat(3, axis=2), (1, 1, 2))
    write_nifti(m, tmp_path / "m.nii")
    raw = (tmp_path / "m.nii").read_bytes()
    assert struct.unpack_from("<h", raw, 70)[0] == 2
    back = read_nifti(tmp_path / "m.nii")
    assert isinstance(back, BinaryMask)
    assert np.array_equal(back.data, m.data)
    assert back.spacing[2] == 2.0


def test_probability_unit_roundtrip(tmp_path):
    p = ProbabilityMap(np.full((3, 3, 3), 0.25))
    write_nifti(p, tmp_path / "p.nii.gz")
    assert isinstance(read_nifti(tmp_path / "p.nii.gz"), ProbabilityMap)


def test_scl_slope_inter_applied(tmp_path):
    data = np.full((2, 2, 2), 500, dtype=np.int16)
    (tmp_path / "s.nii").write_bytes(_raw_nifti(data, 4, 16, slope=2.0, inter=-1000.0))
    vol = read_nifti(tmp_path / "s.nii")
    assert np.all(vol.data == 0.0)


def test_byte_swapped_header(tmp_path):
    rng = np.random.default_rng(2)
    data = rng.integers(-1000, 1000, size=(5, 4, 3)).astype(np.int16)
    (tmp_path / "le.nii").write_bytes(_raw_nifti(data, 4, 16, (1, 2, 3), order="<"))
    big = _raw_nifti(data, 4, 16, (1, 2, 3), order=">")
    assert struct.unpack_from("<i", big, 0)[0] == 1543569408
    (tmp_path / "be.nii").write_bytes(big)
    a, b = read_nifti(tmp_path / "le.nii"), read_nifti(tmp_path / "be.nii")
    assert np.array_equal(a.data, b.data)
    assert a.spacing == b.spacing == (1.0, 2.0, 3.0)
    assert np.array_equal(a.data, data.astype(np.float32))


@pytest.mark.parametrize("dtype,code,bitpix", [
    (np.uint8, 2, 8), (np.int16, 4, 16), (np.int32, 8, 32), (np.float32, 16, 32), (np.float64, 64, 64),
])
def test_supported_datatypes(tmp_path, dtype, code, bitpix):
    data = (np.arange(24).reshape(2, 3, 4) + 2).astype(dtype)
    (tmp_path / "d.nii").write_bytes(_raw_nifti(data, code, bitpix))
    vol = read_nifti(tmp_path / "d.nii")
    assert vol.data.dtype == np.float32
    assert np.array_equal(vol.data, data.astype(np.float32))


def test_gzip_input_by_other_writer(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    with gzip.open(tmp_path / "g.nii.gz", "wb") as fh:
        fh.write(_raw_nifti(data, 16, 32))
    assert np.array_equal(read_nifti(tmp_path / "g.nii.gz").data, data)


def test_malformed_headers(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.float32)
    good = _raw_nifti(data, 16, 32)

    bad = bytearray(good)
    struct.pack_into("<i", bad, 0, 540)
    (tmp_path / "a.nii").write_bytes(bytes(bad))
    with pytest.raises(NiftiError, match="sizeof_hdr"):
        read_nifti(tmp_path / "a.nii")

    bad = bytearray(good)
    struct.pack_into("<h", bad, 70, 32)  # complex64
    (tmp_path / "b.nii").write_bytes(bytes(bad))
    with pytest.raises(NiftiError, match="datatype"):
        read_nifti(tmp_path / "b.nii")

    (tmp_path / "c.nii").write_bytes(good[:-8])
    with pytest.raises(NiftiError, match="payload"):
        read_nifti(tmp_path / "c.nii")

    bad = bytearray(good)
    struct.pack_into("<f", bad, 80, 0.0)
    (tmp_path / "d.nii").write_bytes(bytes(bad))
    with pytest.raises(NiftiError, match="pixdim"):
        read_nifti(tmp_path / "d.nii")

    bad = bytearray(good)
    bad[344:348] = b"n+2\x00"
    (tmp_path / "e.nii").write_bytes(bytes(bad))
    with pytest.raises(NiftiError, match="magic"):
        read_nifti(tmp_path / "e.nii")


def test_raw_fixture_roundtrip(tmp_path):
    vol = ProbabilityMap(np.linspace(0, 1, 60).reshape(3, 4, 5), (1, 2, 3), (1, 1, 1))
    write_raw(vol, tmp_path / "p.raw")
    back = read_raw(tmp_path / "p.raw")
    assert isinstance(back, ProbabilityMap)
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing
    assert (tmp_path / "p.raw").stat().st_size == 60 * 4


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(-1e4, 1e4, width=32)),
       st.tuples(*[st.floats(0.1, 5)] * 3))
def test_roundtrip_property(tmp_path_factory, data, spacing):
    path = tmp_path_factory.mktemp("rt") / "x.nii"
    vol = ImageVolume(data, spacing)
    write_nifti(vol, path)
    back = read_nifti(path)
    assert np.array_equal(back.data, vol.data)
    assert np.allclose(back.spacing, vol.spacing, rtol=1e-6)
