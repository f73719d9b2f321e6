"""Dense 3D volume data model, class-label conventions, and bit-exact file I/O.

Conventions fixed here and binding everywhere else in the package:

* ``Volume3.data`` is indexed ``[x, y, z]``; the on-disk flat order is
  x-fastest, i.e. ``index = x + nx * (y + ny * z)`` (Fortran raveling of the
  in-memory array).
* Voxel ``(i, j, k)`` has its center at world position
  ``offset + spacing * (i, j, k)`` in millimeters.
* The class roster is frozen at background + 7 foreground structures; files
  that carry per-class content serialize class *names* so misordered files
  are detectable.
* Per-voxel class probabilities are held as float64 in memory.

The file format is a MetaImage-style text header (``.mhd``) plus a raw
little-endian payload; parsing is strict (unknown keys are rejected) so a
round trip is bit-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidLabelValue,
    IoFailure,
    MalformedHeader,
    SizeMismatch,
    UnsupportedElementType,
)

#: Frozen class roster: index is the ClassId. 0 is background.
CLASS_NAMES: tuple[str, ...] = (
    "background",
    "LV",
    "RV",
    "LA",
    "RA",
    "myocardium",
    "ascending_aorta",
    "pulmonary_artery",
)

N_CLASSES = len(CLASS_NAMES)  # 8
FOREGROUND_CLASSES: tuple[int, ...] = tuple(range(1, N_CLASSES))

_ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}
_KIND_TO_ELEMENT = {"UInt8": "MET_UCHAR", "Float32": "MET_FLOAT", "Float64": "MET_DOUBLE"}
_DTYPE_TO_KIND = {np.dtype("u1"): "UInt8", np.dtype("f4"): "Float32", np.dtype("f8"): "Float64"}

_HEADER_KEYS = ("NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementDataFile")


@dataclass(frozen=True)
class Volume3:
    """Dense 3D scalar grid with spacing/offset metadata.

    ``data`` is a 3-D array indexed ``[x, y, z]`` whose dtype is one of
    uint8, float32, float64. Instances are treated as immutable values.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3-D and non-empty, got shape {arr.shape}")
        if arr.dtype not in _DTYPE_TO_KIND:
            raise UnsupportedElementType(f"unsupported volume dtype {arr.dtype}")
        object.__setattr__(self, "data", arr)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 strictly positive reals, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        offset = tuple(float(o) for o in self.offset)
        if len(offset) != 3:
            raise ValueError(f"offset must have 3 components, got {self.offset}")
        object.__setattr__(self, "offset", offset)
        if arr.dtype == np.uint8 and arr.size and int(arr.max()) >= N_CLASSES:
            raise InvalidLabelValue(
                f"label volume contains value {int(arr.max())}, valid ids are 0..{N_CLASSES - 1}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def element_kind(self) -> str:
        return _DTYPE_TO_KIND[self.data.dtype]

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def world_coordinates(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (3, nx, ny, nz)."""
        return voxel_center_grid(self.dims, self.spacing, self.offset)

    def same_grid(self, other: "Volume3 | ProbVolume") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.offset == other.offset
        )


@dataclass(frozen=True)
class ProbVolume:
    """Per-voxel class probability grid: ``data`` has shape (8, nx, ny, nz), float64."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] != N_CLASSES:
            raise ValueError(f"probability data must have shape (8, nx, ny, nz), got {arr.shape}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]  # type: ignore[return-value]

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def world_coordinates(self) -> np.ndarray:
        return voxel_center_grid(self.dims, self.spacing, self.offset)

    def validate(self, tol: float = 1e-6) -> None:
        """Check the probability invariants: entries in [0, 1], voxel sums = 1 +- tol."""
        if self.data.min() < -tol or self.data.max() > 1.0 + tol:
            raise ValueError("probabilities outside [0, 1]")
        sums = self.data.sum(axis=0)
        if np.abs(sums - 1.0).max() > tol:
            raise ValueError("per-voxel class probabilities do not sum to 1")


def voxel_center_grid(
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
    offset: tuple[float, float, float],
) -> np.ndarray:
    """World coordinates of all voxel centers on a grid, shape (3, nx, ny, nz)."""
    axes = [offset[a] + spacing[a] * np.arange(dims[a], dtype=np.float64) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz])


def one_hot(labels: Volume3) -> ProbVolume:
    """Expand a UInt8 label volume to per-voxel one-hot class probabilities.

    Raises InvalidLabelValue if any voxel is outside the fixed class roster.
    """
    if labels.data.dtype != np.uint8:
        raise InvalidLabelValue("one_hot expects a UInt8 label volume")
    lab = labels.data
    if lab.max(initial=0) >= N_CLASSES:
        raise InvalidLabelValue(f"label value {int(lab.max())} outside 0..{N_CLASSES - 1}")
    out = np.zeros((N_CLASSES,) + lab.shape, dtype=np.float64)
    for c in range(N_CLASSES):
        out[c][lab == c] = 1.0
    return ProbVolume(out, labels.spacing, labels.offset)


def argmax_labels(p: ProbVolume) -> Volume3:
    """Hard labels from probabilities; ties resolve to the smallest class id."""
    lab = np.argmax(p.data, axis=0).astype(np.uint8)
    return Volume3(lab, p.spacing, p.offset)


def _format_triple(values) -> str:
    return " ".join(repr(float(v)) if not float(v).is_integer() else str(int(v)) for v in values)


def write_volume(v: Volume3, path: str | os.PathLike) -> None:
    """Write ``<path>`` (.mhd header) plus a sibling ``.raw`` payload.

    The payload is raw little-endian in x-fastest order so that
    ``read_volume`` inverts the write bit-exactly.
    """
    path = os.fspath(path)
    if not path.endswith(".mhd"):
        path = path + ".mhd"
    raw_name = os.path.basename(path)[:-4] + ".raw"
    header = (
        f"NDims = 3\n"
        f"DimSize = {v.dims[0]} {v.dims[1]} {v.dims[2]}\n"
        f"ElementSpacing = {_format_triple(v.spacing)}\n"
        f"Offset = {_format_triple(v.offset)}\n"
        f"ElementType = {_KIND_TO_ELEMENT[v.element_kind]}\n"
        f"ElementDataFile = {raw_name}\n"
    )
    payload = np.ascontiguousarray(v.data.ravel(order="F")).astype(
        _ELEMENT_TYPES[_KIND_TO_ELEMENT[v.element_kind]], copy=False
    )
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header)
        with open(os.path.join(os.path.dirname(path), raw_name), "wb") as fh:
            fh.write(payload.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write volume to {path}: {exc}") from exc


def read_volume(path: str | os.PathLike) -> Volume3:
    """Read an .mhd header + raw payload pair written by :func:`write_volume`.

    Strict parse: unknown or missing keys raise MalformedHeader, unknown
    element types raise UnsupportedElementType, and a payload whose byte
    length disagrees with DimSize raises SizeMismatch.
    """
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read header {path}: {exc}") from exc

    fields: dict[str, str] = {}
    for line in lines:
        if not line.strip():
            continue
        if "=" not in line:
            raise MalformedHeader(f"line without 'Key = value' form: {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _HEADER_KEYS:
            raise MalformedHeader(f"unknown header key {key!r}")
        if key in fields:
            raise MalformedHeader(f"duplicate header key {key!r}")
        fields[key] = value.strip()
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise MalformedHeader(f"missing mandatory header keys: {missing}")

    if fields["NDims"] != "3":
        raise MalformedHeader(f"NDims must be 3, got {fields['NDims']!r}")
    try:
        dims = tuple(int(t) for t in fields["DimSize"].split())
        spacing = tuple(float(t) for t in fields["ElementSpacing"].split())
        offset = tuple(float(t) for t in fields["Offset"].split())
    except ValueError as exc:
        raise MalformedHeader(f"unparseable numeric header field: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(offset) != 3:
        raise MalformedHeader("DimSize/ElementSpacing/Offset must have 3 components")
    if any(d < 1 for d in dims):
        raise MalformedHeader(f"DimSize components must be positive, got {dims}")

    eltype = fields["ElementType"]
    if eltype not in _ELEMENT_TYPES:
        raise UnsupportedElementType(f"ElementType {eltype!r} not supported")
    dtype = _ELEMENT_TYPES[eltype]

    raw_path = os.path.join(os.path.dirname(path), fields["ElementDataFile"])
    try:
        with open(raw_path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read payload {raw_path}: {exc}") from exc

    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise SizeMismatch(
            f"payload is {len(payload)} bytes, header implies {expected} "
            f"({dims[0]}x{dims[1]}x{dims[2]} x {dtype.itemsize}B)"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    data = flat.reshape(dims, order="F").astype(dtype.newbyteorder("="), copy=True)
    return Volume3(data, spacing, offset)
