import json
import logging
import os
import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError
from scipy import ndimage

from src.config import PreprocessConfig
from src.errors import DatasetError, DomainError, ManifestError, ShapeError, VolumeFormatError

logger = logging.getLogger(__name__)

MAGIC = b"CHVL"
VERSION = 1
# magic, version, modality, extents (D, H, W), spacing (mm)
_HEADER = struct.Struct("<4sBB3Q3d")


class Modality(IntEnum):
    CT = 0
    PET = 1
    MASK = 2


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    modality: Modality
    standardized: bool = False

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if not np.issubdtype(voxels.dtype, np.floating):
            voxels = voxels.astype(np.float32)
        self.voxels = voxels
        self.spacing = tuple(float(s) for s in self.spacing)
        self.modality = Modality(self.modality)
        if voxels.ndim != 3 or any(n < 1 for n in voxels.shape):
            raise VolumeFormatError(f"volume must be a non-empty 3-D field, got shape {voxels.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be three positive values, got {self.spacing}")
        if self.modality is Modality.MASK and not np.isin(voxels, (0.0, 1.0)).all():
            raise VolumeFormatError("MASK volume contains values other than 0 and 1")
        if self.modality is Modality.PET and not self.standardized and np.any(voxels < 0):
            raise VolumeFormatError("PET volume contains negative uptake values")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def same_grid(self, other: "Volume") -> bool:
        return self.extents == other.extents and np.allclose(self.spacing, other.spacing)


def write_volume(v: Volume, path: str) -> None:
    header = _HEADER.pack(MAGIC, VERSION, int(v.modality), *v.extents, *v.spacing)
    payload = np.ascontiguousarray(v.voxels, dtype="<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)


def read_volume(path: str) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: malformed header ({len(raw)} bytes)")
    magic, version, modality, d, h, w, *spacing = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if modality not in Modality._value2member_map_:
        raise VolumeFormatError(f"{path}: unknown modality tag {modality}")
    expected = 4 * d * h * w
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise VolumeFormatError(
            f"{path}: truncated payload, {len(payload) // 4} of {d * h * w} floats present"
        )
    if len(payload) > expected:
        raise VolumeFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    voxels = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(d, h, w)
    return Volume(voxels, tuple(spacing), Modality(modality))


def resample_isotropic(v: Volume, target_mm: float) -> Volume:
    """
    Resamples onto an isotropic grid anchored at the first voxel center.

    Intensity volumes use trilinear interpolation, masks nearest neighbour.
    Samples past the last voxel center take the edge value.
    """
    if target_mm <= 0:
        raise DomainError(f"target spacing must be positive, got {target_mm}")
    extents = tuple(int(round(n * s / target_mm)) for n, s in zip(v.extents, v.spacing))
    if any(n < 1 for n in extents):
        raise ShapeError(f"resampling {v.extents} at {v.spacing} mm to {target_mm} mm gives {extents}")
    if extents == v.extents and all(s == target_mm for s in v.spacing):
        return replace(v, voxels=v.voxels.copy())

    grid = np.meshgrid(
        *(np.arange(n) * (target_mm / s) for n, s in zip(extents, v.spacing)), indexing="ij"
    )
    source = v.voxels.astype(np.float64)
    if v.modality is Modality.MASK:
        sampled = ndimage.map_coordinates(source, grid, order=0, mode="nearest")
        sampled = (sampled >= 0.5).astype(v.voxels.dtype)
    else:
        sampled = ndimage.map_coordinates(source, grid, order=1, mode="nearest")
        sampled = np.clip(sampled, source.min(), source.max()).astype(v.voxels.dtype)
    return replace(v, voxels=sampled, spacing=(target_mm,) * 3)


def bounding_box(mask: Volume, box_mm) -> tuple[list[int], tuple[int, int, int]]:
    """Start index and voxel size of the box of physical size ``box_mm`` centered on the mask centroid."""
    if not mask.voxels.any():
        raise DomainError("cannot place a bounding box on an empty mask")
    box = tuple(int(round(b / s)) for b, s in zip(box_mm, mask.spacing))
    if any(n < 1 for n in box):
        raise ShapeError(f"box {tuple(box_mm)} mm is smaller than one voxel at {mask.spacing} mm")
    centroid = ndimage.center_of_mass(mask.voxels)
    center = [int(np.floor(c + 0.5)) for c in centroid]
    return [c - n // 2 for c, n in zip(center, box)], box


def _overlap(start, box, extents) -> tuple[tuple[slice, ...], tuple[slice, ...]] | None:
    field, window = [], []
    for lo, n, extent in zip(start, box, extents):
        a, b = max(lo, 0), min(lo + n, extent)
        if a >= b:
            return None
        field.append(slice(a, b))
        window.append(slice(a - lo, b - lo))
    return tuple(field), tuple(window)


def extract_bounding_box(v: Volume, mask: Volume, box_mm) -> Volume:
    """Crops a box of physical size ``box_mm`` centered on the mask centroid, zero-padding outside the field."""
    if not v.same_grid(mask):
        raise ShapeError(f"volume grid {v.extents}@{v.spacing} differs from mask {mask.extents}@{mask.spacing}")
    start, box = bounding_box(mask, box_mm)
    out = np.zeros(box, dtype=v.voxels.dtype)
    overlap = _overlap(start, box, v.extents)
    if overlap is not None:
        field, window = overlap
        out[window] = v.voxels[field]
    return replace(v, voxels=out)


def paste_bounding_box(crop: np.ndarray, start, extents) -> np.ndarray:
    """Inverse of the crop: places ``crop`` at ``start`` in a zero field of ``extents``."""
    out = np.zeros(extents, dtype=crop.dtype)
    overlap = _overlap(start, crop.shape, extents)
    if overlap is not None:
        field, window = overlap
        out[field] = crop[window]
    return out


def normalize_intensity(v: Volume, percentiles: tuple[float, float] = PreprocessConfig().clip_percentiles) -> Volume:
    """Percentile clipping followed by z-score standardization."""
    data = v.voxels.astype(np.float64)
    lo, hi = np.percentile(data, percentiles)
    clipped = np.clip(data, lo, hi)
    std = clipped.std()
    if std <= 0 or not np.isfinite(std):
        raise DomainError("cannot standardize a zero-variance volume")
    standardized = (clipped - clipped.mean()) / std
    return replace(v, voxels=standardized.astype(v.voxels.dtype), standardized=True)


@dataclass
class PatientRecord:
    id: str
    pet: Volume
    ct: Volume
    mask: Volume
    dm_label: int

    def __post_init__(self):
        if self.dm_label not in (0, 1):
            raise ManifestError(f"patient {self.id}: DM label must be 0 or 1, got {self.dm_label}")
        for name, volume, modality in (
            ("pet", self.pet, Modality.PET),
            ("ct", self.ct, Modality.CT),
            ("mask", self.mask, Modality.MASK),
        ):
            if volume.modality is not modality:
                raise ManifestError(f"patient {self.id}: {name} volume is tagged {volume.modality.name}")
        if not self.mask.voxels.any():
            raise DatasetError(f"patient {self.id}: tumor mask is empty")

    def aligned(self) -> bool:
        return self.pet.same_grid(self.ct) and self.pet.same_grid(self.mask)


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    pet: str
    ct: str
    mask: str
    dm_label: Literal[0, 1]


class Manifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: Literal[1] = 1
    patients: list[ManifestEntry] = []


def load_manifest(path: str) -> list[PatientRecord]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = Manifest.model_validate_json(f.read())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except ValidationError as e:
        raise ManifestError(f"invalid manifest {path}: {e}") from None

    root = os.path.dirname(os.path.abspath(path))
    seen: set[str] = set()
    records = []
    for entry in manifest.patients:
        if entry.id in seen:
            raise ManifestError(f"duplicate patient id '{entry.id}' in {path}")
        seen.add(entry.id)
        volumes = {}
        for key in ("pet", "ct", "mask"):
            file = os.path.join(root, getattr(entry, key))
            if not os.path.isfile(file):
                raise ManifestError(f"patient {entry.id}: missing {key} file {file}")
            volumes[key] = read_volume(file)
        records.append(PatientRecord(entry.id, volumes["pet"], volumes["ct"], volumes["mask"], entry.dm_label))
    logger.info(f"Loaded {len(records)} patients from {path}")
    return records


def write_manifest(entries: list[ManifestEntry], path: str) -> str:
    manifest = Manifest(patients=entries)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(manifest.model_dump_json(indent=2))
    os.replace(tmp, path)
    return path


def preprocess_record(record: PatientRecord, cfg: PreprocessConfig | None = None) -> PatientRecord:
    """Resample, crop around the tumor and standardize one patient."""
    cfg = cfg or PreprocessConfig()
    if not record.aligned():
        raise ShapeError(f"patient {record.id}: PET, CT and mask are not on one grid")
    pet = resample_isotropic(record.pet, cfg.target_mm)
    ct = resample_isotropic(record.ct, cfg.target_mm)
    mask = resample_isotropic(record.mask, cfg.target_mm)
    if not mask.voxels.any():
        raise DatasetError(f"patient {record.id}: tumor vanished during resampling")

    pet_box = extract_bounding_box(pet, mask, cfg.box_mm)
    ct_box = extract_bounding_box(ct, mask, cfg.box_mm)
    mask_box = extract_bounding_box(mask, mask, cfg.box_mm)
    if not mask_box.voxels.any():
        raise DatasetError(f"patient {record.id}: tumor lies outside the bounding box")

    return PatientRecord(
        id=record.id,
        pet=normalize_intensity(pet_box, cfg.clip_percentiles),
        ct=normalize_intensity(ct_box, cfg.clip_percentiles),
        mask=mask_box,
        dm_label=record.dm_label,
    )
