"""
The constrained hierarchical multi-modality network.

Each modality runs through its own encoder branch (input transition plus
strided down-convolutions). The per-level maps of all branches are
concatenated channel-wise; their global max-pooled vectors form the
classification feature, while the full-resolution fused maps feed the
segmentation decoder through horizontal skip connections.
"""
import logging
import os
import struct
from collections.abc import MutableMapping
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from pydantic import ValidationError

from src.config import NetworkConfig
from src.errors import CheckpointError, MissingParameterError, ShapeError
from src.layers import (
    BatchNormParams,
    Conv3dParams,
    adaptive_max_pool_to_vector,
    batch_norm,
    conv3d,
    conv_transpose3d,
    dropout,
    elu,
    fully_connected,
    relu,
)
from src.tensor import Tensor, concat, read_tensor, write_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CHCK"
CHECKPOINT_VERSION = 1
RUNNING_STATS = ("running_mean", "running_var")


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    kind: str  # conv | conv_transpose | bias | gamma | beta | running_mean | running_var | fc | fc_bias


def _add_conv(table, prefix, out_ch, in_ch, kernel, transposed=False):
    shape = (in_ch, out_ch) + (kernel,) * 3 if transposed else (out_ch, in_ch) + (kernel,) * 3
    table[f"{prefix}.conv.weight"] = ParamSpec(shape, "conv_transpose" if transposed else "conv")
    table[f"{prefix}.conv.bias"] = ParamSpec((out_ch,), "bias")


def _add_bn(table, prefix, channels):
    for field in ("gamma", "beta") + RUNNING_STATS:
        table[f"{prefix}.bn.{field}"] = ParamSpec((channels,), field)


def parameter_table(cfg: NetworkConfig) -> dict[str, ParamSpec]:
    """Every parameter name and shape, as a pure function of the config."""
    table: dict[str, ParamSpec] = {}
    for branch in cfg.modalities:
        _add_conv(table, f"{branch}.input", cfg.channels(1), cfg.in_channels, 5)
        _add_bn(table, f"{branch}.input", cfg.channels(1))
        for level in range(2, cfg.levels + 1):
            _add_conv(table, f"{branch}.down{level}", cfg.channels(level), cfg.channels(level - 1), 2)
            _add_bn(table, f"{branch}.down{level}", cfg.channels(level))

    if cfg.has_decoder:
        branches = len(cfg.modalities)
        for level in range(cfg.levels - 1, 0, -1):
            channels = cfg.channels(level)
            upstream = branches * cfg.channels(cfg.levels) if level == cfg.levels - 1 else cfg.channels(level + 1)
            _add_conv(table, f"up{level}", channels, upstream, 2, transposed=True)
            _add_bn(table, f"up{level}", channels)
            _add_conv(table, f"res{level}.proj", channels, channels + branches * channels, 1)
            for conv in ("conv1", "conv2"):
                _add_conv(table, f"res{level}.{conv}", channels, channels, 3)
                _add_bn(table, f"res{level}.{conv}", channels)
        _add_conv(table, "out.transition", cfg.seg_classes, cfg.channels(1), 5)
        _add_bn(table, "out.transition", cfg.seg_classes)
        _add_conv(table, "out.logits", cfg.seg_classes, cfg.seg_classes, 1)

    widths = [cfg.fused_width, *cfg.fc_hidden, cfg.num_classes]
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        table[f"head.fc{i}.weight"] = ParamSpec((n_in, n_out), "fc")
        table[f"head.fc{i}.bias"] = ParamSpec((n_out,), "fc_bias")
    return table


class ModelParams(MutableMapping):
    """Named parameter tensors of one network instance."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise MissingParameterError(f"missing parameter '{name}'") from None

    def __setitem__(self, name: str, tensor: Tensor) -> None:
        self._tensors[name] = tensor

    def __delitem__(self, name: str) -> None:
        del self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self._tensors if not n.endswith(RUNNING_STATS)]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self._tensors.items()}

    def copy(self) -> "ModelParams":
        # Tensors are immutable, so sharing them between copies is safe.
        return ModelParams(self._tensors)

    def tracked(self) -> "ModelParams":
        """Copy whose trainable tensors participate in differentiation."""
        trainable = set(self.trainable_names())
        return ModelParams({
            n: Tensor.wrap(t.data, requires_grad=True) if n in trainable else t
            for n, t in self._tensors.items()
        })

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradients of the trainable tensors; unreached ones read as zero."""
        return {
            n: self._tensors[n].grad if self._tensors[n].grad is not None else np.zeros_like(self._tensors[n].data)
            for n in self.trainable_names()
        }

    def conv(self, prefix: str, stride: int = 1, padding: int = 0) -> Conv3dParams:
        return Conv3dParams(self[f"{prefix}.weight"], self[f"{prefix}.bias"], stride, padding)

    def bn(self, prefix: str) -> BatchNormParams:
        return BatchNormParams(
            self[f"{prefix}.gamma"], self[f"{prefix}.beta"],
            self[f"{prefix}.running_mean"], self[f"{prefix}.running_var"],
        )

    def store_running(self, prefix: str, p: BatchNormParams) -> None:
        self[f"{prefix}.running_mean"] = p.running_mean
        self[f"{prefix}.running_var"] = p.running_var

    def audit(self, cfg: NetworkConfig) -> None:
        """Raises ShapeError unless names and shapes match the config exactly."""
        expected = parameter_table(cfg)
        missing = [n for n in expected if n not in self._tensors]
        if missing:
            raise ShapeError(f"missing parameter '{missing[0]}' ({len(missing)} missing in total)")
        unexpected = [n for n in self._tensors if n not in expected]
        if unexpected:
            raise ShapeError(f"unexpected parameter '{unexpected[0]}'")
        for name, spec in expected.items():
            if self._tensors[name].shape != spec.shape:
                raise ShapeError(
                    f"parameter '{name}' has shape {self._tensors[name].shape}, config expects {spec.shape}"
                )


def _fan_in(spec: ParamSpec) -> int:
    shape = spec.shape
    if spec.kind == "conv":
        return shape[1] * int(np.prod(shape[2:]))
    if spec.kind == "conv_transpose":
        # inputs feeding one output voxel of a stride-k, kernel-k upsampler
        return shape[0]
    return shape[0]


def init_params(cfg: NetworkConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """He-normal weights, zero biases, identity batch norm."""
    params = ModelParams()
    for name, spec in parameter_table(cfg).items():
        if spec.kind in ("conv", "conv_transpose", "fc"):
            std = np.sqrt(2.0 / _fan_in(spec))
            data = rng.standard_normal(spec.shape) * std
        elif spec.kind in ("gamma", "running_var"):
            data = np.ones(spec.shape)
        else:
            data = np.zeros(spec.shape)
        params[name] = Tensor.wrap(data.astype(dtype))
    return params


def trace_shapes(cfg: NetworkConfig, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    """Closed-form output shape of every block, in execution order."""
    rows = []
    for branch in cfg.modalities:
        rows.append((f"{branch}.input", (batch, cfg.channels(1)) + cfg.extents(1)))
        for level in range(2, cfg.levels + 1):
            rows.append((f"{branch}.down{level}", (batch, cfg.channels(level)) + cfg.extents(level)))
    branches = len(cfg.modalities)
    for level in range(1, cfg.levels + 1):
        rows.append((f"fused.level{level}", (batch, branches * cfg.channels(level)) + cfg.extents(level)))
    rows.append(("fused.vector", (batch, cfg.fused_width)))
    if cfg.has_decoder:
        for level in range(cfg.levels - 1, 0, -1):
            rows.append((f"up{level}", (batch, cfg.channels(level)) + cfg.extents(level)))
            rows.append((f"res{level}", (batch, cfg.channels(level)) + cfg.extents(level)))
        rows.append(("out.transition", (batch, cfg.seg_classes) + cfg.extents(1)))
        rows.append(("out.logits", (batch, cfg.seg_classes) + cfg.extents(1)))
    for i, width in enumerate(cfg.fc_hidden, start=1):
        rows.append((f"head.fc{i}", (batch, width)))
    rows.append(("head.logits", (batch, cfg.num_classes)))
    return rows


def hierarchical_fusion(*branch_maps: list[Tensor], levels: list[int] | None = None) -> tuple[Tensor, list[Tensor]]:
    """
    Channel-concatenates the branches level by level and pools each fused map
    to one value per channel. ``levels`` (1-based) selects which pooled maps
    enter the returned vector; all levels by default.
    """
    if not branch_maps or len({len(maps) for maps in branch_maps}) != 1:
        raise ShapeError("every branch must provide the same number of levels")
    fused = []
    for level, maps in enumerate(zip(*branch_maps), start=1):
        if len({m.shape for m in maps}) != 1:
            raise ShapeError(f"branch shapes differ at level {level}: {[m.shape for m in maps]}")
        fused.append(concat(list(maps), axis=1) if len(maps) > 1 else maps[0])
    levels = levels or list(range(1, len(fused) + 1))
    vector = concat([adaptive_max_pool_to_vector(fused[l - 1]) for l in levels], axis=1)
    return vector, fused


@dataclass
class ForwardOutput:
    dm_logits: Tensor
    seg_logits: Tensor | None
    fused_vector: Tensor
    level_maps: list[Tensor]


class ChmflNetwork:
    def __init__(self, cfg: NetworkConfig, params: ModelParams | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, rng or np.random.default_rng(0), dtype)
        self.params.audit(cfg)

    def _block(self, prefix: str, x: Tensor, training: bool, stride: int = 1, padding: int = 0,
               transposed: bool = False, activate: bool = True) -> Tensor:
        conv = self.params.conv(f"{prefix}.conv", stride, padding)
        y = conv_transpose3d(x, conv) if transposed else conv3d(x, conv)
        bn = self.params.bn(f"{prefix}.bn")
        y = batch_norm(y, bn, training)
        if training:
            self.params.store_running(f"{prefix}.bn", bn)
        return elu(y) if activate else y

    def encoder_forward(self, branch: str, x: Tensor, training: bool = False) -> list[Tensor]:
        expected = (1, self.cfg.in_channels) + self.cfg.extents(1)
        if x.shape != expected:
            raise ShapeError(f"{branch} input has shape {x.shape}, network expects {expected}")
        maps = [self._block(f"{branch}.input", x, training, padding=2)]
        for level in range(2, self.cfg.levels + 1):
            maps.append(self._block(f"{branch}.down{level}", maps[-1], training, stride=2))
        return maps

    def _residual(self, prefix: str, x: Tensor, training: bool) -> Tensor:
        projection = conv3d(x, self.params.conv(f"{prefix}.proj.conv"))
        y = self._block(f"{prefix}.conv1", projection, training, padding=1)
        y = self._block(f"{prefix}.conv2", y, training, padding=1, activate=False)
        return elu(projection + y)

    def cfl_decode(self, fused_level_maps: list[Tensor], training: bool = False) -> Tensor:
        if len(fused_level_maps) != self.cfg.levels:
            raise ShapeError(f"decoder needs {self.cfg.levels} fused maps, got {len(fused_level_maps)}")
        x = fused_level_maps[-1]
        for level in range(self.cfg.levels - 1, 0, -1):
            x = self._block(f"up{level}", x, training, stride=2, transposed=True)
            skip = fused_level_maps[level - 1]
            if x.shape[2:] != skip.shape[2:]:
                raise ShapeError(f"skip connection at level {level}: {x.shape} vs {skip.shape}")
            x = self._residual(f"res{level}", concat([x, skip], axis=1), training)
        x = self._block("out.transition", x, training, padding=2)
        return conv3d(x, self.params.conv("out.logits.conv"))

    def classify(self, fused_vector: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        if fused_vector.ndim != 2 or fused_vector.shape[1] != self.cfg.fused_width:
            raise ShapeError(f"head expects width {self.cfg.fused_width}, got {fused_vector.shape}")
        x = fused_vector
        hidden = len(self.cfg.fc_hidden)
        for i in range(1, hidden + 1):
            x = fully_connected(x, self.params[f"head.fc{i}.weight"], self.params[f"head.fc{i}.bias"])
            x = dropout(relu(x), self.cfg.dropout_p, training, rng)
        last = hidden + 1
        return fully_connected(x, self.params[f"head.fc{last}.weight"], self.params[f"head.fc{last}.bias"])

    def forward(self, pet: Tensor | None, ct: Tensor | None, training: bool = False,
                rng: np.random.Generator | None = None, mask: Tensor | None = None,
                decode: bool = True) -> ForwardOutput:
        inputs = {"pet": pet, "ct": ct}
        branch_maps = []
        for branch in self.cfg.modalities:
            x = inputs[branch]
            if x is None:
                raise ShapeError(f"network needs a {branch.upper()} input")
            if self.cfg.variant == "mask_hmfl":
                if mask is None:
                    raise ShapeError("the mask_hmfl variant needs the tumor mask as input")
                x = concat([x, mask], axis=1)
            branch_maps.append(self.encoder_forward(branch, x, training))
        vector, fused = hierarchical_fusion(*branch_maps, levels=self.cfg.fused_levels)
        seg_logits = self.cfl_decode(fused, training) if self.cfg.has_decoder and decode else None
        dm_logits = self.classify(vector, training, rng)
        return ForwardOutput(dm_logits, seg_logits, vector, fused)


def save_checkpoint(params: ModelParams, cfg: NetworkConfig, path: str) -> None:
    params.audit(cfg)
    cfg_bytes = cfg.model_dump_json().encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<Q", len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            write_tensor(f, tensor)
    os.replace(tmp, path)
    logger.info(f"Checkpoint written to {path} ({len(params)} tensors)")


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str, expected: NetworkConfig | None = None) -> tuple[ModelParams, NetworkConfig]:
    """Reads a checkpoint and audits it against its own config (and ``expected`` when given)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<B", _read_exact(f, 1, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
        (cfg_len,) = struct.unpack("<Q", _read_exact(f, 8, "config length"))
        try:
            cfg = NetworkConfig.model_validate_json(_read_exact(f, cfg_len, "config"))
        except ValidationError as e:
            raise CheckpointError(f"{path}: invalid network config: {e.errors()[0]['msg']}") from None
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "tensor count"))
        params = ModelParams()
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", _read_exact(f, 8, "name length"))
            try:
                name = _read_exact(f, name_len, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"{path}: tensor name is not valid UTF-8") from None
            try:
                params[name] = read_tensor(f)
            except ShapeError as e:
                raise CheckpointError(f"tensor '{name}': {e}") from None
    try:
        params.audit(cfg)
        if expected is not None:
            params.audit(expected)
    except ShapeError as e:
        raise CheckpointError(f"{path}: {e}") from None
    return params, cfg
