"""Grid data types and the raw volume file format.

A volume on disk is a pair of files: ``<name>.json`` holding the header and
``<name>.raw`` holding ``X*Y*Z*C`` little-endian float32 values, x-fastest,
channels last.  In memory a volume is a numpy array of shape ``(X, Y, Z, C)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LAYOUT = "x-fastest-channels-last"
AFFINE_CONVENTION = "target-to-source-voxel"
FIELD_KINDS = ("displacement-voxels", "sampling-map")


class VolumeFormatError(ValueError):
    """Header and payload disagree, or the payload holds non-finite values."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be (X, Y, Z, C), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {self.data.shape}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeFormatError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return float(sx * sy * sz)


@dataclass(frozen=True)
class SegmentationSet:
    """K-channel label volume; channels may overlap."""

    data: np.ndarray
    kind: str = "probabilistic"

    def __post_init__(self):
        if self.kind not in ("probabilistic", "binary"):
            raise ValueError(f"unknown segmentation kind {self.kind!r}")
        check_segmentation(self.data, self.kind)

    @property
    def n_structures(self) -> int:
        return self.data.shape[-1]


def check_segmentation(data, kind="probabilistic"):
    data = np.asarray(data)
    if data.ndim != 4:
        raise ValueError(f"segmentation must be (X, Y, Z, K), got shape {data.shape}")
    if kind == "binary":
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("binary segmentation holds values outside {0, 1}")
    elif np.any(data < 0) or np.any(data > 1) or not np.all(np.isfinite(data)):
        raise ValueError("probabilistic segmentation holds values outside [0, 1]")


@dataclass(frozen=True)
class GridDomain:
    dims: tuple[int, int, int]

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")

    @property
    def size(self) -> int:
        x, y, z = self.dims
        return x * y * z


@dataclass(frozen=True)
class AffineTransform:
    """4x4 homogeneous matrix mapping target voxel coords to source voxel coords."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine holds non-finite values")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine last row must be (0, 0, 0, 1)")
        if abs(np.linalg.det(m[:3, :3])) <= 1e-9:
            raise ValueError("affine linear block is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @classmethod
    def translation(cls, t):
        m = np.eye(4)
        m[:3, 3] = t
        return cls(m)

    def inverse(self):
        return AffineTransform(np.linalg.inv(self.matrix))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:3, 3]


def _paths(path):
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".raw")


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_volume(vol: Volume, path, field_kind: str | None = None):
    """Write ``vol`` as a ``.json`` header plus ``.raw`` payload.

    ``path`` may be given with or without an extension.
    """
    header_path, raw_path = _paths(path)
    if not header_path.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {header_path.parent}")
    header = {
        "dims": [int(d) for d in vol.dims],
        "dtype": "f32",
        "layout": LAYOUT,
        "spacing_mm": [float(s) for s in vol.spacing_mm],
    }
    if field_kind is not None:
        if field_kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {field_kind!r}")
        header["field_kind"] = field_kind
    # (X, Y, Z, C) with x fastest: transpose so C-order flattening walks x first after c.
    payload = np.ascontiguousarray(np.transpose(vol.data, (2, 1, 0, 3)), dtype="<f4")
    atomic_write_bytes(raw_path, payload.tobytes())
    atomic_write_text(header_path, json.dumps(header, indent=2) + "\n")


def read_header(path) -> dict:
    header_path, _ = _paths(path)
    with open(header_path) as fh:
        return json.load(fh)


def load_volume(path) -> Volume:
    header_path, raw_path = _paths(path)
    if not header_path.exists() or not raw_path.exists():
        raise FileNotFoundError(f"missing volume files for {header_path.with_suffix('')}")
    header = read_header(header_path)
    if header.get("dtype") != "f32" or header.get("layout") != LAYOUT:
        raise VolumeFormatError(f"unsupported dtype/layout in {header_path}")
    dims = [int(d) for d in header["dims"]]
    if len(dims) != 4:
        raise VolumeFormatError(f"dims must have four entries, got {dims}")
    raw = np.fromfile(raw_path, dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise VolumeFormatError(
            f"payload holds {raw.size} floats but dims {dims} need {int(np.prod(dims))}"
        )
    x, y, z, c = dims
    data = np.transpose(raw.reshape(z, y, x, c), (2, 1, 0, 3)).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"non-finite values in {raw_path}")
    return Volume(data, tuple(float(s) for s in header["spacing_mm"]))


def save_segmentation(seg: SegmentationSet, path, spacing_mm=(1.0, 1.0, 1.0)):
    save_volume(Volume(seg.data, spacing_mm), path)


def load_segmentation(path, kind="probabilistic") -> SegmentationSet:
    return SegmentationSet(load_volume(path).data, kind)


def save_affine(affine: AffineTransform, path):
    doc = {
        "convention": AFFINE_CONVENTION,
        "matrix": [float(v) for v in affine.matrix.reshape(-1)],
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def load_affine(path) -> AffineTransform:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("convention") != AFFINE_CONVENTION:
        raise VolumeFormatError(f"unsupported affine convention {doc.get('convention')!r}")
    values = doc["matrix"]
    if len(values) != 16:
        raise VolumeFormatError(f"affine needs 16 values, got {len(values)}")
    return AffineTransform(np.array(values, dtype=np.float64).reshape(4, 4))


def normalize_image(data: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-std scaling with statistics pooled over every channel.

    Background zeros are included in the statistics.
    """
    data = np.asarray(data)
    if data.size == 0:
        raise ValueError("cannot normalize an empty volume")
    stats = data.astype(np.float64)
    mean = stats.mean()
    std = stats.std()
    if not std > 0:
        raise ValueError("cannot normalize a constant image (zero variance)")
    return ((stats - mean) / std).astype(data.dtype if data.dtype.kind == "f" else np.float64)
