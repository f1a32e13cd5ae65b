"""NIfTI-1 single-file reader/writer and a raw float32 + JSON fixture format.

Only the fields needed for evaluation are interpreted: dims, pixdim, the
datatype, scaling, and an origin (qoffset, falling back to the sform
translation). Orientation is ignored.
"""
from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .volume import UNITS, ImageVolume, make_volume

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy base type
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}

_UNIT_TAG = "segood:unit="


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


def _open(path: Path, mode: str):
    if path.name.endswith(".gz"):
        # mtime=0 keeps repeated writes byte-identical
        return gzip.GzipFile(path, mode, compresslevel=1, mtime=0)
    return open(path, mode)


def _byte_order(raw: bytes) -> str:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for order in "<>":
        if struct.unpack(order + "i", raw[:4])[0] == HEADER_SIZE:
            return order
    raise NiftiError("sizeof_hdr is not 348 in either byte order")


def read_nifti(path, unit: str | None = None) -> ImageVolume:
    """Read a ``.nii`` / ``.nii.gz`` file into an :class:`ImageVolume`.

    Data are converted to float32 (uint8 binary files become label masks).
    ``scl_slope``/``scl_inter`` are applied when the slope is non-zero. The
    unit tag is taken from ``unit`` if given, else from the description field
    written by :func:`write_nifti`, else inferred from the datatype.
    """
    path = Path(path)
    with _open(path, "rb") as fh:
        raw = fh.read()
    bo = _byte_order(raw)

    def field(fmt, offset):
        return struct.unpack_from(bo + fmt, raw, offset)

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"bad magic {magic!r}; only NIfTI-1 is supported")
    if magic == b"ni1\x00":
        raise NiftiError("two-file (.hdr/.img) NIfTI is not supported")

    dim = field("8h", 40)
    ndim = dim[0]
    if ndim not in (3, 4) or (ndim == 4 and dim[4] != 1):
        raise NiftiError(f"expected a 3D volume, got dim={dim}")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise NiftiError(f"non-positive dims {shape}")

    datatype = field("h", 70)[0]
    if datatype not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    pixdim = field("8f", 76)
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if min(spacing) <= 0 or not np.all(np.isfinite(spacing)):
        raise NiftiError(f"non-positive pixdim {pixdim[1:4]}")
    vox_offset = int(field("f", 108)[0])
    slope, inter = field("2f", 112)

    dtype = np.dtype(DATATYPES[datatype]).newbyteorder(bo)
    n = shape[0] * shape[1] * shape[2]
    payload = raw[vox_offset:]
    if len(payload) < n * dtype.itemsize:
        raise NiftiError(
            f"payload has {len(payload)} bytes, need {n * dtype.itemsize} for dims {shape}"
        )
    stored = np.frombuffer(payload, dtype=dtype, count=n).reshape(shape, order="F")

    descrip = field("80s", 148)[0].split(b"\x00", 1)[0].decode("ascii", "replace")
    if unit is None and descrip.startswith(_UNIT_TAG):
        tagged = descrip[len(_UNIT_TAG):]
        unit = tagged if tagged in UNITS else None

    qform_code, sform_code = field("2h", 252)
    if qform_code > 0:
        origin = field("3f", 268)
    elif sform_code > 0:
        srow = field("12f", 280)
        origin = (srow[3], srow[7], srow[11])
    else:
        origin = (0.0, 0.0, 0.0)

    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        data = stored.astype(np.float64) * slope + inter
    else:
        data = stored

    if unit is None:
        binary = datatype == 2 and data.max(initial=0) <= 1
        unit = "label" if binary else "HU"
    if unit != "label":
        data = np.asarray(data, dtype=np.float32)
    return make_volume(data, spacing, origin, unit)


def _header(vol: ImageVolume, datatype: int, bitpix: int) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<80s", hdr, 148, (_UNIT_TAG + vol.unit).encode("ascii"))
    struct.pack_into("<2h", hdr, 252, 1, 0)
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, *vol.origin)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    return bytes(hdr)


def write_nifti(vol: ImageVolume, path) -> None:
    """Write ``vol`` as little-endian NIfTI-1 (float32, or uint8 for labels)."""
    path = Path(path)
    if vol.unit == "label":
        payload, code, bitpix = vol.data.astype("<u1"), 2, 8
    else:
        payload, code, bitpix = vol.data.astype("<f4"), 16, 32
    blob = _header(vol, code, bitpix) + b"\x00" * 4 + payload.tobytes(order="F")
    with _open(path, "wb") as fh:
        fh.write(blob)


def read_raw(path) -> ImageVolume:
    """Read the raw fixture format: ``<name>.raw`` payload plus ``<name>.json`` sidecar."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    dims = tuple(int(d) for d in meta["dims"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != dims[0] * dims[1] * dims[2]:
        raise ValueError(f"{path}: payload has {data.size} values, dims {dims} need {np.prod(dims)}")
    arr = data.reshape(dims, order="F")
    return make_volume(arr, meta["spacing"], meta.get("origin", (0, 0, 0)), meta.get("unit", "normalized"))


def write_raw(vol: ImageVolume, path) -> None:
    path = Path(path)
    path.write_bytes(vol.data.astype("<f4").tobytes(order="F"))
    meta = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "unit": vol.unit,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))
