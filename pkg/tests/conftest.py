import struct

import numpy as np
import pytest

from src.config import NetworkConfig, PhantomConfig, PreprocessConfig, TrainingConfig
from src.imaging import Modality, PatientRecord, Volume
from src.network import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from src.tensor import write_tensor


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_network_cfg():
    """Smallest network the architecture allows: 8^3 input, 3 levels."""
    return NetworkConfig(input_extents=(8, 8, 8), base_channels=2, levels=3, fc_hidden=(8, 4), dropout_p=0.0)


@pytest.fixture
def desk_network_cfg():
    return NetworkConfig(input_extents=(32, 32, 32), base_channels=4)


@pytest.fixture
def fast_training_cfg():
    return TrainingConfig(max_epochs=3, learning_rate=1e-3, plateau_patience=10, seed=0)


@pytest.fixture
def small_phantom_cfg():
    return PhantomConfig(extents=(24, 24, 24), n_patients=4, tumor_radius=(3.0, 4.0), seed=3)


@pytest.fixture
def tiny_preprocess_cfg():
    return PreprocessConfig(box_mm=(8.0, 8.0, 8.0))


def make_record(patient_id: str, extents=(8, 8, 8), label: int = 1, seed: int = 0) -> PatientRecord:
    """Random standardized patient already on the network grid."""
    r = np.random.default_rng(seed)
    mask = np.zeros(extents, dtype=np.float32)
    center = tuple(n // 2 for n in extents)
    mask[tuple(slice(c - 2, c + 2) for c in center)] = 1.0
    pet = r.standard_normal(extents).astype(np.float32) + 2.0 * mask
    ct = r.standard_normal(extents).astype(np.float32)
    return PatientRecord(
        id=patient_id,
        pet=Volume(pet, (1.0, 1.0, 1.0), Modality.PET, standardized=True),
        ct=Volume(ct, (1.0, 1.0, 1.0), Modality.CT, standardized=True),
        mask=Volume(mask, (1.0, 1.0, 1.0), Modality.MASK),
        dm_label=label,
    )


@pytest.fixture
def tiny_dataset():
    return [make_record(f"T{i}", label=i % 2, seed=i) for i in range(4)]


def write_raw_checkpoint(path, cfg_bytes: bytes, tensors) -> str:
    """Writes checkpoint bytes without the save-time audit; ``tensors`` holds (raw name, Tensor) pairs."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<Q", len(tensors)))
        for name, tensor in tensors:
            f.write(struct.pack("<Q", len(name)))
            f.write(name)
            write_tensor(f, tensor)
    return str(path)
