import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy import ndimage

from src.config import PhantomConfig
from src.errors import DatasetError
from src.imaging import Modality, ManifestEntry, PatientRecord, Volume, write_manifest, write_volume

logger = logging.getLogger(__name__)

AIR_HU = -1000.0
SOFT_TISSUE_HU = 40.0
TUMOR_HU = 60.0
WAVES = 4


def _ellipsoid(extents, center, radii) -> np.ndarray:
    grid = np.ogrid[tuple(slice(0, n) for n in extents)]
    distance = sum(((axis - c) / r) ** 2 for axis, c, r in zip(grid, center, radii))
    return distance <= 1.0


def _heterogeneity_field(extents, rng: np.random.Generator) -> np.ndarray:
    """Band-limited random field: a sum of a few 3-D cosines with random direction and phase."""
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in extents), indexing="ij")
    field = np.zeros(extents)
    for _ in range(WAVES):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        frequency = rng.uniform(0.12, 0.3)  # cycles per voxel
        phase = rng.uniform(0.0, 2 * np.pi)
        field += np.cos(2 * np.pi * frequency * sum(d * g for d, g in zip(direction, grid)) + phase)
    return field


def tumor_fits(cfg: PhantomConfig) -> bool:
    diameter = 2 * int(np.ceil(cfg.tumor_radius[1])) + 3
    return all(diameter <= n for n in cfg.extents)


def _patient(index: int, label: int, seed: np.random.SeedSequence, cfg: PhantomConfig) -> PatientRecord:
    rng = np.random.default_rng(seed)
    extents = cfg.extents

    body = _ellipsoid(extents, [(n - 1) / 2 for n in extents], [0.45 * n for n in extents])
    anatomy = ndimage.gaussian_filter(body.astype(np.float64), sigma=1.5)

    radii = rng.uniform(*cfg.tumor_radius, size=3)
    reach = int(np.ceil(cfg.tumor_radius[1])) + 1
    center = [int(rng.integers(reach, n - reach)) for n in extents]
    tumor = _ellipsoid(extents, center, radii)

    ct = AIR_HU + (SOFT_TISSUE_HU - AIR_HU) * anatomy
    ct[tumor] = TUMOR_HU
    ct += rng.normal(0.0, cfg.ct_noise_std, size=extents)

    low, high = cfg.heterogeneity_high if label else cfg.heterogeneity_low
    amplitude = rng.uniform(low, high)
    field = _heterogeneity_field(extents, rng)[tumor]
    field = (field - field.mean()) / max(field.std(), 1e-8)
    pet = cfg.background_uptake * anatomy
    pet[tumor] = cfg.background_uptake * cfg.tumor_contrast * (1.0 + amplitude * field)
    pet += rng.normal(0.0, cfg.pet_noise_std, size=extents)
    pet = np.clip(pet, 0.0, None)

    def volume(voxels, modality):
        return Volume(voxels.astype(np.float32), cfg.spacing, modality)

    return PatientRecord(
        id=f"P{index:03d}",
        pet=volume(pet, Modality.PET),
        ct=volume(ct, Modality.CT),
        mask=volume(tumor, Modality.MASK),
        dm_label=label,
    )


def generate(cfg: PhantomConfig, workers: int = 1) -> list[PatientRecord]:
    """
    Deterministic synthetic PET/CT cohort.

    The DM label selects the range the within-tumor PET heterogeneity
    amplitude is drawn from; labels are balanced to ``cfg.balance`` and
    shuffled. Each patient draws from its own child of ``SeedSequence(seed)``,
    so the cohort does not depend on the worker count.
    """
    if not tumor_fits(cfg):
        raise DatasetError(f"tumor radius up to {cfg.tumor_radius[1]} does not fit extents {cfg.extents}")
    n = cfg.n_patients
    label_seed, *patient_seeds = np.random.SeedSequence(cfg.seed).spawn(n + 1)
    positives = int(round(n * cfg.balance))
    labels = np.random.default_rng(label_seed).permutation([1] * positives + [0] * (n - positives))

    jobs = [(i, int(labels[i]), patient_seeds[i], cfg) for i in range(n)]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            dataset = list(pool.map(_patient, *zip(*jobs)))
    else:
        dataset = [_patient(*job) for job in jobs]
    logger.info(f"Generated {n} phantoms ({positives} DM positive) at {cfg.extents}")
    return dataset


def export(dataset: list[PatientRecord], directory: str) -> str:
    """Writes every volume in the container format plus ``manifest.json``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    if not dataset:
        logger.warning(f"Exporting an empty dataset to {directory}")
    entries = []
    for record in dataset:
        files = {}
        for key in ("pet", "ct", "mask"):
            files[key] = f"{record.id}_{key}.chvl"
            write_volume(getattr(record, key), os.path.join(directory, files[key]))
        entries.append(ManifestEntry(id=record.id, dm_label=record.dm_label, **files))
    return write_manifest(entries, os.path.join(directory, "manifest.json"))


def tumor_std(record: PatientRecord) -> float:
    """Within-tumor PET standard deviation (the feature the labels are built on)."""
    return float(record.pet.voxels[record.mask.voxels > 0].std())
