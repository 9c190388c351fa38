"""Minimal NIfTI-1 reader and writer.

Covers exactly what the pipeline needs: single-file .nii (optionally
gzipped), little-endian, 3D (or 4D with a trailing extent of 1), and the
uint8 / int16 / uint16 / float32 datatypes. The voxel buffer is stored
x-fastest, so reading it C-ordered as [Z, Y, X] yields our [Z, H, W]
layout without any transpose.
"""

from __future__ import annotations

import gzip
import os
import struct
from typing import Optional, Tuple

import numpy as np

from ..errors import FormatError, UnsupportedError
from .volume import VolumeStudy

_HEADER_SIZE = 348
_VOX_OFFSET = 352
_MAGIC = b"n+1\x00"

_DTYPES = {
    2: np.dtype("<u1"),    # uint8
    4: np.dtype("<i2"),    # int16
    16: np.dtype("<f4"),   # float32
    512: np.dtype("<u2"),  # uint16
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def _open_binary(path, mode: str):
    if mode == "rb":
        with open(path, "rb") as probe:
            gz = probe.read(2) == b"\x1f\x8b"
        return gzip.open(path, "rb") if gz else open(path, "rb")
    return gzip.open(path, "wb") if str(path).endswith(".gz") else open(path, "wb")


def read_nifti(path) -> VolumeStudy:
    """Parse one volume; intensities come back as float64 on a [Z,H,W] grid."""
    with _open_binary(path, "rb") as fh:
        header = fh.read(_HEADER_SIZE)
        if len(header) < _HEADER_SIZE:
            raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
        magic = header[344:348]
        if magic != _MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        (sizeof_hdr,) = struct.unpack_from("<i", header, 0)
        if sizeof_hdr != _HEADER_SIZE:
            raise FormatError(f"{path}: header size {sizeof_hdr}, file is not little-endian NIfTI-1")
        dim = struct.unpack_from("<8h", header, 40)
        (datatype,) = struct.unpack_from("<h", header, 70)
        pixdim = struct.unpack_from("<8f", header, 76)
        (vox_offset,) = struct.unpack_from("<f", header, 108)
        scl_slope, scl_inter = struct.unpack_from("<2f", header, 112)

        ndim = dim[0]
        if ndim == 4 and dim[4] == 1:
            ndim = 3
        if ndim != 3:
            raise UnsupportedError(f"{path}: only 3D volumes supported, got dim[0]={dim[0]}")
        nx, ny, nz = dim[1], dim[2], dim[3]
        if min(nx, ny, nz) < 1:
            raise FormatError(f"{path}: nonpositive extents {(nx, ny, nz)}")
        dtype = _DTYPES.get(datatype)
        if dtype is None:
            raise UnsupportedError(f"{path}: datatype code {datatype} not supported")

        offset = int(vox_offset)
        if offset < _HEADER_SIZE:
            raise FormatError(f"{path}: vox_offset {vox_offset} overlaps the header")
        skip = offset - _HEADER_SIZE
        if skip:
            fh.read(skip)
        count = nx * ny * nz
        raw = fh.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise FormatError(f"{path}: voxel data truncated")

    data = np.frombuffer(raw, dtype=dtype).reshape(nz, ny, nx).astype(np.float64)
    if scl_slope != 0.0:
        data = data * float(scl_slope) + float(scl_inter)
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    name = os.path.basename(str(path))
    for suffix in (".gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return VolumeStudy(image=data, labels=None, spacing=spacing, patient_id=name)


def write_nifti(path, volume: np.ndarray, spacing: Tuple[float, float, float],
                dtype=np.float32) -> None:
    """Write a [Z,H,W] array; spacing is (sz, sy, sx) in mm."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise UnsupportedError(f"can only write 3D volumes, got shape {volume.shape}")
    dt = np.dtype(dtype).newbyteorder("<")
    code = _DTYPE_CODES.get(dt)
    if code is None:
        raise UnsupportedError(f"dtype {dtype} not in the supported subset")
    nz, ny, nx = volume.shape
    sz, sy, sx = (float(s) for s in spacing)

    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, code, dt.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", header, 112, 0.0, 0.0)  # no scaling transform
    header[344:348] = _MAGIC

    with _open_binary(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * (_VOX_OFFSET - _HEADER_SIZE))
        fh.write(np.ascontiguousarray(volume, dtype=dt).tobytes())
