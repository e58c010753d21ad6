import os
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

load_dotenv()


class Config:
    DATA_DIR = os.getenv("CHMFL_DATA_DIR", "data")
    LOG_LEVEL = os.getenv("CHMFL_LOG_LEVEL", "INFO")
    DEFAULT_DTYPE = os.getenv("CHMFL_DTYPE", "float32")
    CHECK_FINITE = os.getenv("CHMFL_CHECK_FINITE", "false").lower() == "true"
    WORKERS = int(os.getenv("CHMFL_WORKERS", "1"))

    # Preprocessing defaults
    TARGET_SPACING_MM = 1.0
    BOX_MM = (112.0, 112.0, 144.0)
    CLIP_PERCENTILES = (0.5, 99.5)

    # Numerical constants
    PROB_FLOOR = 1e-12
    BN_MOMENTUM = 0.1
    BN_EPS = 1e-5
    ELU_ALPHA = 1.0

    DEFAULT_FOLDS = 6
    DEFAULT_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)


config = Config()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class NetworkConfig(_Strict):
    input_extents: tuple[int, int, int] = (112, 112, 144)
    base_channels: int = Field(16, ge=1)
    levels: int = Field(5, ge=2)
    fc_hidden: tuple[int, int] = (512, 128)
    num_classes: int = 2
    seg_classes: int = 2
    dropout_p: float = Field(0.5, ge=0.0, lt=1.0)
    modalities: tuple[Literal["pet", "ct"], ...] = ("pet", "ct")
    variant: Literal["chmfl", "cfl", "mask_hmfl"] = "chmfl"

    @model_validator(mode="after")
    def _check_extents(self) -> "NetworkConfig":
        factor = 2 ** (self.levels - 1)
        for extent in self.input_extents:
            if extent < 1 or extent % factor:
                raise ValueError(
                    f"input extents {self.input_extents} must be positive multiples of {factor} "
                    f"for {self.levels} levels"
                )
        if not self.modalities or len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"modalities must be a non-empty set, got {self.modalities}")
        if self.num_classes != 2 or self.seg_classes != 2:
            raise ValueError("only binary DM prediction and binary segmentation are supported")
        return self

    def channels(self, level: int) -> int:
        """Encoder channels at 1-based level."""
        return self.base_channels * 2 ** (level - 1)

    def extents(self, level: int) -> tuple[int, int, int]:
        factor = 2 ** (level - 1)
        return tuple(e // factor for e in self.input_extents)

    @property
    def has_decoder(self) -> bool:
        return self.variant != "mask_hmfl"

    @property
    def in_channels(self) -> int:
        return 2 if self.variant == "mask_hmfl" else 1

    @property
    def fused_levels(self) -> list[int]:
        """Levels whose pooled maps feed the classification head."""
        if self.variant == "cfl":
            return [self.levels]
        return list(range(1, self.levels + 1))

    @property
    def fused_width(self) -> int:
        return len(self.modalities) * sum(self.channels(l) for l in self.fused_levels)


class TrainingConfig(_Strict):
    w: float = Field(0.5, ge=0.0, le=1.0)
    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: Literal[1] = 1
    max_epochs: int = Field(200, ge=1)
    plateau_patience: int = Field(10, ge=0)
    plateau_epsilon: float = Field(1e-4, ge=0.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    dtype: Literal["float32", "float64"] = config.DEFAULT_DTYPE
    seed: int = 0


class PreprocessConfig(_Strict):
    target_mm: float = Field(config.TARGET_SPACING_MM, gt=0.0)
    box_mm: tuple[float, float, float] = config.BOX_MM
    clip_percentiles: tuple[float, float] = config.CLIP_PERCENTILES

    @field_validator("box_mm")
    @classmethod
    def _positive_box(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(v <= 0 for v in value):
            raise ValueError(f"box_mm must be positive, got {value}")
        return value

    @field_validator("clip_percentiles")
    @classmethod
    def _ordered(cls, value: tuple[float, float]) -> tuple[float, float]:
        lo, hi = value
        if not 0.0 <= lo < hi <= 100.0:
            raise ValueError(f"clip_percentiles must satisfy 0 <= lo < hi <= 100, got {value}")
        return value

    def box_voxels(self) -> tuple[int, int, int]:
        return tuple(int(round(b / self.target_mm)) for b in self.box_mm)


class PhantomConfig(_Strict):
    extents: tuple[int, int, int] = (40, 40, 40)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_patients: int = Field(48, ge=0)
    balance: float = Field(0.5, ge=0.0, le=1.0)
    tumor_radius: tuple[float, float] = (4.0, 7.0)
    background_uptake: float = Field(1.0, gt=0.0)
    tumor_contrast: float = Field(4.0, gt=1.0)
    heterogeneity_low: tuple[float, float] = (0.0, 0.1)
    heterogeneity_high: tuple[float, float] = (0.4, 0.6)
    pet_noise_std: float = Field(0.05, ge=0.0)
    ct_noise_std: float = Field(10.0, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "PhantomConfig":
        lo_a, lo_b = self.heterogeneity_low
        hi_a, hi_b = self.heterogeneity_high
        if not (0.0 <= lo_a <= lo_b and hi_a <= hi_b):
            raise ValueError("heterogeneity ranges must be ordered (min, max) pairs")
        if lo_b >= hi_a:
            raise ValueError(
                f"heterogeneity ranges must be disjoint: low {self.heterogeneity_low}, "
                f"high {self.heterogeneity_high}"
            )
        r_min, r_max = self.tumor_radius
        if not 0.0 < r_min <= r_max:
            raise ValueError(f"tumor_radius must be an ordered positive pair, got {self.tumor_radius}")
        if any(s <= 0 for s in self.spacing) or any(e < 1 for e in self.extents):
            raise ValueError("extents and spacing must be positive")
        return self


class RunConfig(_Strict):
    network: NetworkConfig = NetworkConfig()
    training: TrainingConfig = TrainingConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    phantom: PhantomConfig = PhantomConfig()
    seed: int | None = None
    k: int = Field(config.DEFAULT_FOLDS, ge=2)
    w_values: tuple[float, ...] = config.DEFAULT_SWEEP
    workers: int = Field(config.WORKERS, ge=1)
    data_dir: str = config.DATA_DIR
    manifest: str | None = None
    out_dir: str = "runs"
    checkpoint: str | None = None

    @field_validator("w_values")
    @classmethod
    def _weights_in_range(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if not value or any(not 0.0 <= w <= 1.0 for w in value):
            raise ValueError(f"every sweep weight must lie in [0, 1], got {value}")
        return value

    @model_validator(mode="before")
    @classmethod
    def _propagate_seed(cls, data):
        if not isinstance(data, dict) or data.get("seed") is None:
            return data
        data = dict(data)
        for section in ("training", "phantom"):
            values = data.get(section) or {}
            if isinstance(values, BaseModel):
                values = values.model_dump()
            data[section] = {**values, "seed": data["seed"]}
        return data

    @model_validator(mode="after")
    def _box_matches_network(self) -> "RunConfig":
        box = self.preprocess.box_voxels()
        if box != tuple(self.network.input_extents):
            raise ValueError(
                f"preprocess box {self.preprocess.box_mm} mm at {self.preprocess.target_mm} mm gives {box} voxels, "
                f"network expects {self.network.input_extents}"
            )
        return self

    def manifest_path(self) -> str:
        return self.manifest or os.path.join(self.data_dir, "manifest.json")


PROFILES: dict[str, dict] = {
    "full": {},
    "desk": {
        "network": {"input_extents": (32, 32, 32), "base_channels": 4},
        "training": {"max_epochs": 60, "learning_rate": 1e-3},
        "preprocess": {"box_mm": (32.0, 32.0, 32.0)},
        "phantom": {"extents": (40, 40, 40), "n_patients": 48},
    },
}
