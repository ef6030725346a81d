"""Volume container and file I/O (multi-page TIFF, raw + JSON sidecar)."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import tifffile

SUPPORTED_DTYPES = ("uint8", "uint16", "float32")


@dataclass(frozen=True)
class Volume:
    """A (z, y, x) scalar grid.

    ``value_range`` is the nominal intensity interval of the data (dtype limits
    for integers, observed extremes for floats unless given).
    """

    data: np.ndarray
    value_range: tuple[float, float]
    voxel_size: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.data.shape}")
        if str(self.data.dtype) not in SUPPORTED_DTYPES:
            raise ValueError(f"unsupported dtype {self.data.dtype}; expected one of {SUPPORTED_DTYPES}")
        if len(self.value_range) != 2:
            raise ValueError("value_range must be (lo, hi)")
        if self.voxel_size is not None and len(self.voxel_size) != 3:
            raise ValueError("voxel_size must have one entry per axis (z, y, x)")

    @classmethod
    def from_array(cls, data, value_range=None, voxel_size=None) -> "Volume":
        data = np.asarray(data)
        if data.dtype.kind == "f" and data.dtype != np.float32:
            data = data.astype(np.float32)
        if value_range is None:
            if data.dtype.kind in "ui":
                info = np.iinfo(data.dtype)
                value_range = (float(info.min), float(info.max))
            else:
                value_range = (float(data.min()), float(data.max()))
        vs = None if voxel_size is None else tuple(float(v) for v in voxel_size)
        return cls(data, (float(value_range[0]), float(value_range[1])), vs)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return str(self.data.dtype)

    @property
    def peak(self) -> float:
        """Peak value used for PSNR: dtype maximum for integers, 1.0 for floats."""
        if self.data.dtype.kind in "ui":
            return float(np.iinfo(self.data.dtype).max)
        return 1.0

    def with_data(self, data: np.ndarray) -> "Volume":
        return replace(self, data=data)

    def metadata(self) -> dict:
        return {
            "shape": list(self.shape),
            "dtype": self.dtype,
            "value_range": list(self.value_range),
            "voxel_size": None if self.voxel_size is None else list(self.voxel_size),
        }


def percentile_range(data: np.ndarray, lo: float = 0.1, hi: float = 99.9) -> tuple[float, float]:
    a, b = np.percentile(data, [lo, hi])
    if b <= a:
        b = a + 1.0
    return float(a), float(b)


def normalize(data: np.ndarray, value_range: tuple[float, float]) -> np.ndarray:
    """Map ``value_range`` onto [-1, 1] (float64, clipped)."""
    lo, hi = value_range
    out = 2.0 * (np.asarray(data, dtype=np.float64) - lo) / (hi - lo) - 1.0
    return np.clip(out, -1.0, 1.0)


def denormalize(data: np.ndarray, value_range: tuple[float, float]) -> np.ndarray:
    lo, hi = value_range
    return (np.asarray(data, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo


def to_dtype(data: np.ndarray, dtype: str) -> np.ndarray:
    """Cast float data to ``dtype``, rounding and clipping for integer types."""
    dt = np.dtype(dtype)
    if dt.kind in "ui":
        info = np.iinfo(dt)
        return np.clip(np.rint(data), info.min, info.max).astype(dt)
    return np.asarray(data, dtype=dt)


def _atomic_write(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        write(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def write_volume(path: str | os.PathLike, vol: Volume) -> Path:
    """Write ``vol`` as TIFF (``.tif``/``.tiff``) or raw little-endian + JSON sidecar."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        meta = {"axes": "ZYX", "value_range": list(vol.value_range)}
        if vol.voxel_size is not None:
            meta["voxel_size"] = list(vol.voxel_size)
        _atomic_write(path, lambda p: tifffile.imwrite(p, vol.data, metadata=meta, photometric="minisblack"))
    elif suffix == ".raw":
        payload = np.ascontiguousarray(vol.data).astype(vol.data.dtype.newbyteorder("<"), copy=False)
        _atomic_write(path, lambda p: p.write_bytes(payload.tobytes()))
        text = json.dumps(vol.metadata(), indent=2)
        _atomic_write(sidecar_path(path), lambda p: p.write_text(text + "\n"))
    else:
        raise ValueError(f"unsupported volume format {path.suffix!r} (use .tif, .tiff or .raw)")
    return path


def read_volume(path: str | os.PathLike) -> Volume:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume not found: {path}")
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        with tifffile.TiffFile(path) as tif:
            data = tif.asarray()
            meta = tif.shaped_metadata[0] if tif.shaped_metadata else {}
        if data.ndim == 2:
            data = data[None]
        return Volume.from_array(data, meta.get("value_range"), meta.get("voxel_size"))
    if suffix == ".raw":
        side = sidecar_path(path)
        if not side.exists():
            raise FileNotFoundError(f"missing sidecar {side}")
        meta = json.loads(side.read_text())
        dt = np.dtype(meta["dtype"]).newbyteorder("<")
        data = np.frombuffer(path.read_bytes(), dtype=dt).reshape(meta["shape"])
        data = data.astype(data.dtype.newbyteorder("="))
        return Volume.from_array(data, meta["value_range"], meta.get("voxel_size"))
    raise ValueError(f"unsupported volume format {path.suffix!r} (use .tif, .tiff or .raw)")
