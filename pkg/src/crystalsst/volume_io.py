"""Reading and writing 3D scalar volumes.

Two on-disk layouts are supported:

* ``<name>.f64raw`` with a ``<name>.meta.json`` sidecar holding ``dims``,
  ``dtype`` ("f64") and ``order`` ("C"); payload is little-endian float64.
* ``<name>.npy`` (NPY format, float64 or float32; float32 is widened on load).

Arrays are always C ordered, last index fastest.  Voxel ``(n1, n2, n3)`` sits
at ``x = (n1/L1, n2/L2, n3/L3)`` on the periodic unit cube.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class VolumeFormatError(ValueError):
    """Header or sidecar metadata cannot be parsed."""


class CorruptVolumeError(ValueError):
    """Payload size does not match the declared dimensions."""


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    dtype: str = "f64"
    voxel_size: float | None = None
    provenance: str = ""


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Real-valued volume on the periodic unit cube."""

    data: np.ndarray
    meta: VolumeMeta = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        meta = self.meta
        if meta is None:
            meta = VolumeMeta(dims=tuple(int(n) for n in arr.shape))
        elif tuple(meta.dims) != arr.shape:
            raise ValueError(f"meta dims {meta.dims} do not match payload {arr.shape}")
        object.__setattr__(self, "meta", meta)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.meta.dims

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.meta.dims

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Spatial coordinates x_j = n_j / L_j as broadcastable arrays."""
        return tuple(
            (np.arange(n) / n).reshape([-1 if k == j else 1 for k in range(3)])
            for j, n in enumerate(self.dims)
        )

    def __eq__(self, other):
        if not isinstance(other, ScalarVolume):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)

    __hash__ = None  # type: ignore[assignment]


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name[: -len(path.suffix)] + ".meta.json")


def save_volume(vol: ScalarVolume | np.ndarray, path) -> None:
    """Write ``vol``; the suffix of ``path`` picks the format (.npy or .f64raw)."""
    if not isinstance(vol, ScalarVolume):
        vol = ScalarVolume(np.asarray(vol))
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, vol.data.astype("<f8"), allow_pickle=False)
        return
    if path.suffix != ".f64raw":
        raise VolumeFormatError(f"unsupported volume suffix {path.suffix!r}")
    path.write_bytes(vol.data.astype("<f8").tobytes(order="C"))
    meta = {"dims": list(vol.dims), "dtype": "f64", "order": "C"}
    if vol.meta.voxel_size is not None:
        meta["voxel_size"] = vol.meta.voxel_size
    if vol.meta.provenance:
        meta["provenance"] = vol.meta.provenance
    _sidecar(path).write_text(json.dumps(meta, indent=2))


def load_volume(path) -> ScalarVolume:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".npy":
        try:
            arr = np.load(path, allow_pickle=False)
        except ValueError as exc:
            raise VolumeFormatError(f"{path}: {exc}") from exc
        if arr.dtype not in (np.dtype("<f8"), np.dtype("<f4"), np.dtype(">f8"), np.dtype(">f4")):
            raise VolumeFormatError(f"{path}: unsupported dtype {arr.dtype}")
        if arr.ndim != 3:
            raise VolumeFormatError(f"{path}: expected a 3D array, got {arr.ndim}D")
        return ScalarVolume(arr.astype(np.float64),
                            VolumeMeta(dims=arr.shape, provenance=str(path)))
    if path.suffix != ".f64raw":
        raise VolumeFormatError(f"unsupported volume suffix {path.suffix!r}")

    side = _sidecar(path)
    try:
        meta = json.loads(side.read_text())
        dims = tuple(int(n) for n in meta["dims"])
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"missing sidecar {side}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed sidecar {side}: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{side}: dims must be three positive integers")
    if meta.get("dtype", "f64") != "f64" or meta.get("order", "C") != "C":
        raise VolumeFormatError(f"{side}: only dtype f64 / order C is supported")

    raw = path.read_bytes()
    expected = 8 * math.prod(dims)
    if len(raw) != expected:
        raise CorruptVolumeError(f"{path}: {len(raw)} bytes, expected {expected} for dims {dims}")
    arr = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    return ScalarVolume(arr, VolumeMeta(dims=dims, voxel_size=meta.get("voxel_size"),
                                        provenance=meta.get("provenance", str(path))))


def export_field_slices(field_, axis: int, stride: int, out_dir) -> list[Path]:
    """Write every ``stride``-th plane normal to ``axis`` (1, 2 or 3) as .npy.

    Files are named ``slice_<axis>_<index>.npy``; returns their paths in
    index order.
    """
    data = field_.data if isinstance(field_, ScalarVolume) else np.asarray(field_)
    if axis not in (1, 2, 3):
        raise ValueError(f"axis must be 1, 2 or 3, got {axis}")
    n = data.shape[axis - 1]
    if stride < 1 or stride > n:
        raise ValueError(f"stride must be in [1, {n}], got {stride}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(0, n, stride):
        plane = np.take(data, k, axis=axis - 1)
        p = out_dir / f"slice_{axis}_{k}.npy"
        np.save(p, np.ascontiguousarray(plane), allow_pickle=False)
        paths.append(p)
    return paths
