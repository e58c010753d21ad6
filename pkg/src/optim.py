import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from src import tensor as T
from src.config import TrainingConfig, config
from src.errors import DatasetError, DomainError, ShapeError
from src.imaging import PatientRecord
from src.layers import softmax
from src.network import ChmflNetwork, ModelParams
from src.tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)


def _one_hot_label(target, num_classes: int, dtype) -> np.ndarray:
    target = np.asarray(target)
    if target.ndim == 0 or target.size == 1:
        label = int(target.reshape(-1)[0])
        if label not in range(num_classes):
            raise DomainError(f"class label {label} outside [0, {num_classes})")
        one_hot = np.zeros((1, num_classes), dtype=dtype)
        one_hot[0, label] = 1
        return one_hot
    return target.reshape(1, num_classes).astype(dtype)


def _cross_entropy(logits: Tensor, one_hot: np.ndarray) -> Tensor:
    """-sum(p * log q) with q = softmax over axis 1, floored at the probability clamp."""
    if logits.shape != one_hot.shape:
        raise ShapeError(f"logits {logits.shape} and target {one_hot.shape} differ")
    q = softmax(logits, axis=1)
    log_q = T.log(T.clamp_min(q, config.PROB_FLOOR))
    return T.neg(T.sum(T.mul(log_q, Tensor.wrap(one_hot))))


def classification_loss(dm_logits: Tensor, dm_target) -> Tensor:
    return _cross_entropy(dm_logits, _one_hot_label(dm_target, dm_logits.shape[1], dm_logits.dtype))


def segmentation_loss(seg_logits: Tensor, seg_target: np.ndarray) -> Tensor:
    """Per-voxel cross-entropy averaged over voxels."""
    target = np.asarray(seg_target)
    if not np.isin(target, (0, 1)).all():
        raise DomainError("segmentation target must be binary")
    target = target.reshape((seg_logits.shape[0],) + seg_logits.shape[2:])
    one_hot = np.stack([1 - target, target], axis=1).astype(seg_logits.dtype)
    voxels = target.size
    return T.scale(_cross_entropy(seg_logits, one_hot), 1.0 / voxels)


@dataclass
class LossTerms:
    total: Tensor
    classification: Tensor
    segmentation: Tensor | None


def loss_terms(dm_logits: Tensor, dm_target, seg_logits: Tensor | None, seg_target, w: float) -> LossTerms:
    if not 0.0 <= w <= 1.0:
        raise DomainError(f"CFL weight must lie in [0, 1], got {w}")
    cls = classification_loss(dm_logits, dm_target)
    if seg_logits is None:
        if w > 0:
            raise ShapeError("a positive CFL weight needs segmentation logits")
        return LossTerms(cls, cls, None)
    seg = segmentation_loss(seg_logits, seg_target)
    return LossTerms(T.add(T.scale(cls, 1.0 - w), T.scale(seg, w)), cls, seg)


def total_loss(dm_logits: Tensor, dm_target, seg_logits: Tensor | None, seg_target, w: float) -> Tensor:
    """(1 - w) * CE_cls + w * CE_seg."""
    return loss_terms(dm_logits, dm_target, seg_logits, seg_target, w).total


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, cfg: TrainingConfig) -> None:
    """One bias-corrected Adam update; parameter entries are rebound to new tensors."""
    names = params.trainable_names()
    missing = [n for n in names if n not in grads]
    if missing:
        raise DomainError(f"missing gradient for '{missing[0]}'")

    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in names:
        theta = params[name].data
        g = np.asarray(grads[name], dtype=theta.dtype)
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter {theta.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        params[name] = Tensor.wrap((theta - step).astype(theta.dtype))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cls_loss: float
    seg_loss: float | None
    improved: bool


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = float("inf")

    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_text(self) -> str:
        lines = ["epoch\tloss\tcls_loss\tseg_loss"]
        for e in self.epochs:
            seg = "nan" if e.seg_loss is None else f"{e.seg_loss:.8f}"
            lines.append(f"{e.epoch}\t{e.loss:.8f}\t{e.cls_loss:.8f}\t{seg}")
        return "\n".join(lines) + "\n"


@dataclass
class PatientInputs:
    pet: Tensor
    ct: Tensor
    mask: Tensor
    seg_target: np.ndarray
    dm_label: int


def patient_inputs(record: PatientRecord, dtype=np.float32) -> PatientInputs:
    def volume(v):
        return Tensor.wrap(v.voxels.astype(dtype)[None, None])

    return PatientInputs(
        pet=volume(record.pet),
        ct=volume(record.ct),
        mask=volume(record.mask),
        seg_target=record.mask.voxels.astype(np.int64),
        dm_label=record.dm_label,
    )


def effective_weight(network: ChmflNetwork, cfg: TrainingConfig) -> float:
    return cfg.w if network.cfg.has_decoder else 0.0


def train(
    network: ChmflNetwork,
    dataset: list[PatientRecord],
    cfg: TrainingConfig,
    rng: np.random.Generator | None = None,
) -> tuple[ModelParams, TrainingHistory]:
    """
    Batch-size-1 Adam training with plateau termination.

    Each epoch visits the patients in a freshly shuffled order. Training stops
    at ``max_epochs`` or once the best mean epoch loss has not improved by
    ``plateau_epsilon`` for ``plateau_patience`` consecutive epochs; the
    network is left holding the parameters of the best epoch.
    """
    if not dataset:
        raise DatasetError("cannot train on an empty dataset")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    inputs = [patient_inputs(r, dtype) for r in dataset]
    w = effective_weight(network, cfg)
    state = AdamState()
    history = TrainingHistory()
    best_params = network.params.copy()
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        totals, cls_totals, seg_totals = [], [], []
        for index in rng.permutation(len(inputs)):
            sample = inputs[index]
            tracked = network.params.tracked()
            network.params = tracked
            with Tape() as tape:
                out = network.forward(sample.pet, sample.ct, training=True, rng=rng,
                                      mask=sample.mask, decode=w > 0)
                terms = loss_terms(out.dm_logits, sample.dm_label, out.seg_logits, sample.seg_target, w)
                backward(terms.total, tape)
            adam_step(tracked, tracked.gradients(), state, cfg)
            totals.append(terms.total.item())
            cls_totals.append(terms.classification.item())
            if terms.segmentation is not None:
                seg_totals.append(terms.segmentation.item())

        mean_loss = float(np.mean(totals))
        improved = mean_loss < history.best_loss - cfg.plateau_epsilon
        if improved:
            history.best_loss, history.best_epoch = mean_loss, epoch
            best_params = network.params.copy()
            stale = 0
        else:
            stale += 1
        seg_mean = float(np.mean(seg_totals)) if seg_totals else None
        history.epochs.append(EpochRecord(epoch, mean_loss, float(np.mean(cls_totals)), seg_mean, improved))
        logger.info(
            f"epoch {epoch:3d} loss {mean_loss:.5f} cls {np.mean(cls_totals):.5f} "
            f"seg {'-' if seg_mean is None else f'{seg_mean:.5f}'}{' *' if improved else ''}"
        )
        if stale >= cfg.plateau_patience:
            logger.info(f"Loss plateaued for {stale} epoch(s); stopping after epoch {epoch}")
            break

    network.params = best_params
    return best_params, history
