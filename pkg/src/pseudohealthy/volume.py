"""3D volumes: representation, VOL1/NIfTI-1 I/O, smoothing, pooling and masked statistics.

Arrays are indexed ``data[x, y, z]``. On disk the raw payload is written with
x varying fastest (Fortran order), little-endian.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

PathLike = Union[str, os.PathLike]

_DTYPES = {
    "f32le": np.dtype("<f4"),
    "u8": np.dtype("u1"),
    "u16": np.dtype("<u2"),
}


class VolumeError(ValueError):
    """Raised for malformed volumes, headers or incompatible operands."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D scalar field with voxel spacing in millimetres.

    ``data`` may be floating point (images), boolean (masks) or ``uint16``
    (label fields). Floating data must be finite.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype.kind == "f":
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise VolumeError("volume contains non-finite values")
        elif arr.dtype.kind not in "biu":
            raise VolumeError(f"unsupported volume dtype {arr.dtype}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise VolumeError(f"spacing must be three positive reals, got {self.spacing}")
        arr = arr.view()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def with_data(self, data) -> "Volume":
        """New volume on the same grid."""
        return Volume(np.asarray(data), self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing}, dtype={self.data.dtype})"


def check_same_grid(*volumes: Volume) -> None:
    dims = {v.dims for v in volumes}
    if len(dims) != 1:
        raise VolumeError(f"dimension mismatch: {sorted(dims)}")


def as_mask(m: Volume) -> np.ndarray:
    """Boolean view of a mask volume; values must be exactly 0 or 1."""
    arr = m.data
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise VolumeError("mask values must be 0 or 1")
    return arr.astype(bool)


# --------------------------------------------------------------------------- I/O


def _vol1_paths(path: PathLike) -> Tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".vol1.json", ".vol1.raw", ".vol1"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    base = p.with_name(name)
    return base.with_name(name + ".vol1.json"), base.with_name(name + ".vol1.raw")


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == bool or arr.dtype == np.uint8:
        return "u8"
    if arr.dtype == np.uint16:
        return "u16"
    if arr.dtype.kind == "f":
        return "f32le"
    raise VolumeError(f"cannot store dtype {arr.dtype} in VOL1")


def save_volume(v: Volume, path: PathLike) -> Path:
    """Write ``v`` as a VOL1 pair and return the sidecar path.

    ``path`` may be the bare stem or either member of the pair. Floating data
    is stored as float32.
    """
    header_path, raw_path = _vol1_paths(path)
    tag = _dtype_tag(v.data)
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "dtype": tag,
        "order": "x-fastest",
    }
    payload = np.asarray(v.data, dtype=_DTYPES[tag]).ravel(order="F")
    raw_path.write_bytes(payload.tobytes())
    header_path.write_text(json.dumps(header) + "\n")
    return header_path


def load_volume(path: PathLike) -> Volume:
    """Read a VOL1 pair or an uncompressed NIfTI-1 file."""
    p = Path(path)
    if p.name.endswith(".nii"):
        return _load_nifti(p)
    header_path, raw_path = _vol1_paths(p)
    if not header_path.exists():
        raise FileNotFoundError(f"missing VOL1 header {header_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing VOL1 data {raw_path}")
    header = json.loads(header_path.read_text())
    try:
        dims = [int(n) for n in header["dims"]]
        spacing = [float(s) for s in header["spacing_mm"]]
        tag = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"malformed VOL1 header {header_path}: {exc}") from None
    if tag not in _DTYPES:
        raise VolumeError(f"unsupported dtype {tag!r} in {header_path}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise VolumeError(f"unsupported order {header['order']!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeError(f"bad dims {dims}")
    dtype = _DTYPES[tag]
    raw = raw_path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeError(
            f"length mismatch: header declares {int(np.prod(dims))} voxels "
            f"({expected} bytes), {raw_path.name} has {len(raw)} bytes"
        )
    flat = np.frombuffer(raw, dtype=dtype)
    data = flat.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    if tag == "u8":
        data = data.astype(bool) if np.all(data <= 1) else data
    return Volume(data, tuple(spacing))


def _load_nifti(path: Path) -> Volume:
    # single-file .nii only; float32 or int16, axis-aligned orientation
    buf = path.read_bytes()
    if len(buf) < 352:
        raise VolumeError(f"{path}: truncated NIfTI header")
    for endian in "<>":
        if struct.unpack(endian + "i", buf[:4])[0] == 348:
            break
    else:
        raise VolumeError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
    if buf[344:347] != b"n+1":
        raise VolumeError(f"{path}: only single-file NIfTI-1 (magic n+1) is supported")
    dim = struct.unpack(endian + "8h", buf[40:56])
    if dim[0] < 3 or any(d != 1 for d in dim[4 : dim[0] + 1]):
        raise VolumeError(f"{path}: only 3D volumes are supported (dim={dim})")
    dims = dim[1:4]
    datatype, bitpix = struct.unpack(endian + "2h", buf[70:74])
    pixdim = struct.unpack(endian + "8f", buf[76:108])
    vox_offset = int(struct.unpack(endian + "f", buf[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", buf[112:120])
    qform_code, sform_code = struct.unpack(endian + "2h", buf[252:256])
    quatern = struct.unpack(endian + "3f", buf[256:268])
    srows = np.array(struct.unpack(endian + "12f", buf[280:328])).reshape(3, 4)
    if qform_code > 0 and any(abs(q) > 1e-6 for q in quatern):
        raise VolumeError(f"{path}: rotated qform orientation is not supported")
    if sform_code > 0:
        rot = srows[:, :3]
        if np.any(np.abs(rot - np.diag(np.diag(rot))) > 1e-6):
            raise VolumeError(f"{path}: oblique sform orientation is not supported")
    kinds = {16: endian + "f4", 4: endian + "i2"}
    if datatype not in kinds:
        raise VolumeError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(kinds[datatype])
    n = int(np.prod(dims))
    if len(buf) - vox_offset != n * dtype.itemsize:
        raise VolumeError(
            f"{path}: length mismatch: {n} voxels declared, "
            f"{len(buf) - vox_offset} data bytes present"
        )
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=vox_offset).reshape(dims, order="F")
    data = data.astype(np.float32 if datatype == 16 else np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope if slope != 0 else 1.0) + inter
    spacing = tuple(abs(s) if s != 0 else 1.0 for s in pixdim[1:4])
    return Volume(data, spacing)


# ------------------------------------------------------------------- filtering


def gaussian_kernel(sigma_vox: float) -> np.ndarray:
    """Normalized discrete Gaussian with radius ceil(4 sigma)."""
    if sigma_vox <= 0:
        return np.ones(1)
    radius = int(math.ceil(4.0 * sigma_vox))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_smooth(v: Volume, sigma_mm: float) -> Volume:
    """Separable Gaussian blur with replicate boundaries.

    The per-axis kernel width is ``sigma_mm / spacing`` voxels, so anisotropic
    grids are blurred isotropically in physical space.
    """
    sigma_mm = float(sigma_mm)
    if not math.isfinite(sigma_mm) or sigma_mm < 0:
        raise VolumeError(f"sigma must be finite and >= 0, got {sigma_mm}")
    out = np.asarray(v.data, dtype=np.float64)
    if sigma_mm == 0:
        return Volume(out.copy(), v.spacing)
    for axis, step in enumerate(v.spacing):
        kernel = gaussian_kernel(sigma_mm / step)
        if kernel.size > 1:
            out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return Volume(out, v.spacing)


def downsample_avg2(v: Volume) -> Volume:
    """2x2x2 mean pooling with stride 2; odd trailing voxels are dropped."""
    if min(v.dims) < 2:
        raise VolumeError(f"every dim must be >= 2 to downsample, got {v.dims}")
    nx, ny, nz = (d // 2 for d in v.dims)
    a = np.asarray(v.data, dtype=np.float64)[: 2 * nx, : 2 * ny, : 2 * nz]
    pooled = a.reshape(nx, 2, ny, 2, nz, 2).mean(axis=(1, 3, 5))
    return Volume(pooled, tuple(2.0 * s for s in v.spacing))


def masked_mean(v: Volume, m: Volume) -> float:
    """Mean of ``v`` over the voxels where mask ``m`` is 1."""
    check_same_grid(v, m)
    sel = as_mask(m)
    count = int(sel.sum())
    if count == 0:
        raise VolumeError("empty region")
    return float(np.asarray(v.data, dtype=np.float64)[sel].sum() / count)


def constant_volume(dims: Sequence[int], value: float, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.full(tuple(dims), float(value)), spacing)
