"""
Binary file formats: uncompressed single-file NIfTI-1, the VOL1 tensor
cache, and binary PGM slices.

Gzip-compressed ``.nii.gz`` files are not read; decompress them first.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .errors import (BadMagicError, FormatError, TruncatedPayloadError,
                     UnsupportedDatatypeError, UnsupportedDimError)
from .volume import LabelVolume, Volume3D, remap_raw_labels

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4", 512: "u2"}


@dataclass(frozen=True)
class NiftiMeta:
    dims: Tuple[int, ...]
    datatype: int
    scl_slope: float
    scl_inter: float
    spacing: Tuple[float, float, float]
    byte_swapped: bool
    vox_offset: int = 352
    raw_labels: Optional[Tuple[int, ...]] = None


def read_nifti_header(buf: bytes) -> NiftiMeta:
    if len(buf) < NIFTI_HEADER_SIZE:
        raise TruncatedPayloadError("file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", buf, 0)[0] == NIFTI_HEADER_SIZE:
        end, swapped = "<", False
    elif struct.unpack_from(">i", buf, 0)[0] == NIFTI_HEADER_SIZE:
        end, swapped = ">", True
    else:
        raise FormatError("sizeof_hdr is not 348 in either byte order")
    if buf[344:348] != NIFTI_MAGIC:
        raise BadMagicError(f"bad NIfTI magic {buf[344:348]!r}")
    dim = struct.unpack_from(end + "8h", buf, 40)
    ndim = dim[0]
    if ndim not in (3, 4) or (ndim == 4 and dim[4] != 1):
        raise UnsupportedDimError(f"only 3D volumes are supported (dim={dim[:ndim + 1]})")
    if min(dim[1:4]) < 1:
        raise FormatError(f"invalid dimensions {dim[1:4]}")
    datatype = struct.unpack_from(end + "h", buf, 70)[0]
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from(end + "8f", buf, 76)
    vox_offset = struct.unpack_from(end + "f", buf, 108)[0]
    slope, inter = struct.unpack_from(end + "2f", buf, 112)
    if vox_offset < 352:
        raise FormatError(f"vox_offset {vox_offset} < 352")
    return NiftiMeta(
        dims=tuple(int(d) for d in dim[1:ndim + 1]),
        datatype=int(datatype),
        scl_slope=float(slope),
        scl_inter=float(inter),
        spacing=(float(pixdim[3]), float(pixdim[2]), float(pixdim[1])),
        byte_swapped=swapped,
        vox_offset=int(vox_offset),
    )


def read_nifti(path, labels: bool = False):
    """Read a 3D NIfTI-1 file.

    Returns ``(Volume3D, NiftiMeta)``, or ``(LabelVolume, NiftiMeta)`` when
    ``labels`` is set; in that case raw BraTS labels {0,1,2,4} are remapped
    to {0,1,2,3} and the raw values seen are kept in ``meta.raw_labels``.
    Values are scaled by ``slope * v + inter`` whenever the slope is nonzero.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    meta = read_nifti_header(buf)
    nx, ny, nz = meta.dims[:3]
    end = ">" if meta.byte_swapped else "<"
    dtype = np.dtype(end + NIFTI_DTYPES[meta.datatype])
    count = nx * ny * nz
    if len(buf) < meta.vox_offset + count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"payload has {len(buf) - meta.vox_offset} bytes, need {count * dtype.itemsize}")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=meta.vox_offset)
    raw = raw.reshape(nz, ny, nx)
    if meta.scl_slope != 0 and not (meta.scl_slope == 1 and meta.scl_inter == 0):
        values = raw.astype(np.float64) * meta.scl_slope + meta.scl_inter
    else:
        values = raw
    if labels:
        rounded = np.rint(values)
        if not np.array_equal(rounded, values):
            raise FormatError("label volume contains non-integer values")
        seen = tuple(int(v) for v in np.unique(rounded))
        meta = replace(meta, raw_labels=seen)
        return LabelVolume(remap_raw_labels(rounded.astype(np.int64)), meta.spacing), meta
    return Volume3D(np.asarray(values, dtype=np.float32), meta.spacing), meta


def nifti_header_bytes(dims_zyx, spacing_zyx=(1.0, 1.0, 1.0), datatype: int = 16,
                       endian: str = "<") -> bytes:
    """A minimal 348-byte NIfTI-1 header for a 3D volume (plus no extensions)."""
    bitpix = np.dtype(NIFTI_DTYPES[datatype]).itemsize * 8
    nz, ny, nx = (int(d) for d in dims_zyx)
    sz, sy, sx = (float(s) for s in spacing_zyx)
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into(endian + "i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into(endian + "8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into(endian + "2h", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, 0.0, 0.0)
    struct.pack_into(endian + "B", hdr, 123, 2)  # xyzt_units: mm
    hdr[344:348] = NIFTI_MAGIC
    return bytes(hdr)


def write_nifti(v, path, datatype: int = 16) -> None:
    """Write a Volume3D (float32) or LabelVolume as little-endian NIfTI-1.

    Label volumes are written with raw BraTS labels (internal 3 -> 4) in
    uint8 unless another datatype is requested.
    """
    if isinstance(v, LabelVolume):
        arr = v.labels.astype(np.int64)
        arr = np.where(arr == 3, 4, arr)
        datatype = 2 if datatype == 16 else datatype
    else:
        arr = v.data
    dtype = np.dtype("<" + NIFTI_DTYPES[datatype])
    spacing = v.spacing or (1.0, 1.0, 1.0)
    with open(path, "wb") as fh:
        fh.write(nifti_header_bytes(arr.shape, spacing, datatype))
        fh.write(b"\x00" * 4)
        fh.write(np.ascontiguousarray(arr).astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# VOL1
# ---------------------------------------------------------------------------

VOL1_MAGIC = b"VOL1"


def write_raw(data: np.ndarray, path) -> None:
    """Write a ``(C, D, H, W)`` (or ``(D, H, W)``) array as VOL1."""
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise FormatError(f"VOL1 stores 3D or 4D arrays, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(VOL1_MAGIC)
        fh.write(struct.pack("<4I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_raw(path) -> np.ndarray:
    """Read a VOL1 file into a float32 ``(C, D, H, W)`` array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != VOL1_MAGIC:
        raise BadMagicError(f"bad VOL1 magic {buf[:4]!r}")
    if len(buf) < 20:
        raise TruncatedPayloadError("VOL1 header truncated")
    shape = struct.unpack_from("<4I", buf, 4)
    expected = int(np.prod(shape)) * 4
    if len(buf) - 20 != expected:
        raise FormatError(f"VOL1 payload is {len(buf) - 20} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype="<f4", offset=20).reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def write_pgm(img: np.ndarray, path) -> None:
    """Binary 8-bit PGM; ``img`` is ``(height, width)`` uint8."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise BadMagicError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def load_volume(path) -> np.ndarray:
    """Read a ``.nii`` or VOL1 file as a 3D float32 array (first channel of VOL1)."""
    ext = os.fspath(path).lower()
    if ext.endswith(".nii"):
        return read_nifti(path)[0].data
    return read_raw(path)[0]
