import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, NonNegativeInt
from scipy import special
from sklearn.metrics import roc_auc_score, roc_curve

from src.config import NetworkConfig, TrainingConfig
from src.errors import DatasetError, DomainError, ShapeError
from src.imaging import PatientRecord, Volume
from src.layers import softmax
from src.network import ChmflNetwork
from src.optim import train
from src.tensor import Tensor

logger = logging.getLogger(__name__)

CLASSIFICATION_METRICS = ("acc", "sen", "spe", "pre", "f1")
SEGMENTATION_METRICS = ("dsc", "jaccard", "voxel_acc", "voxel_sen", "voxel_spe")


class ConfusionCounts(BaseModel):
    tp: NonNegativeInt = 0
    fp: NonNegativeInt = 0
    tn: NonNegativeInt = 0
    fn: NonNegativeInt = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp, fp=self.fp + other.fp, tn=self.tn + other.tn, fn=self.fn + other.fn
        )


class ClassificationMetrics(NamedTuple):
    acc: float | None
    sen: float | None
    spe: float | None
    pre: float | None
    f1: float | None


class SegmentationMetrics(NamedTuple):
    dsc: float
    jaccard: float
    voxel_acc: float
    voxel_sen: float | None
    voxel_spe: float | None


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def classification_metrics(c: ConfusionCounts) -> ClassificationMetrics:
    """Thresholded metrics; a metric with a zero denominator is reported as None."""
    sen = _ratio(c.tp, c.tp + c.fn)
    pre = _ratio(c.tp, c.tp + c.fp)
    f1 = None
    if sen is not None and pre is not None:
        f1 = _ratio(2 * pre * sen, pre + sen)
    metrics = ClassificationMetrics(
        acc=_ratio(c.tp + c.tn, c.total),
        sen=sen,
        spe=_ratio(c.tn, c.tn + c.fp),
        pre=pre,
        f1=f1,
    )
    undefined = [name for name, value in zip(metrics._fields, metrics) if value is None]
    if undefined:
        logger.warning(f"Undefined metrics for {c.model_dump()}: {', '.join(undefined)}")
    return metrics


def confusion_from_scores(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionCounts:
    predicted = np.asarray(scores) >= threshold
    truth = np.asarray(labels).astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(predicted & truth)),
        fp=int(np.sum(predicted & ~truth)),
        tn=int(np.sum(~predicted & ~truth)),
        fn=int(np.sum(~predicted & truth)),
    )


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, list[tuple[float, float]]]:
    """AUC (ties count one half) and the ROC curve over every distinct threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores for {labels.size} labels")
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise DomainError("ROC analysis needs both classes")

    auc = roc_auc_score(labels, scores)
    fpr, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    return float(auc), [(float(f), float(t)) for f, t in zip(fpr, tpr)]


def segmentation_metrics(pred: np.ndarray, truth: np.ndarray) -> SegmentationMetrics:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = pred.size - tp - fp - fn
    sizes = tp + fp + tp + fn
    union = tp + fp + fn
    return SegmentationMetrics(
        dsc=2 * tp / sizes if sizes else 1.0,
        jaccard=tp / union if union else 1.0,
        voxel_acc=(tp + tn) / pred.size,
        voxel_sen=_ratio(tp, tp + fn),
        voxel_spe=_ratio(tn, tn + fp),
    )


@dataclass
class FoldSplit:
    assignments: dict[str, int]
    k: int

    def test_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f != fold]

    def sizes(self) -> list[int]:
        return [len(self.test_ids(f)) for f in range(self.k)]


def make_folds(ids: Sequence[str], k: int = 6, seed: int = 0) -> FoldSplit:
    """Seeded shuffle followed by round-robin assignment."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DatasetError("patient ids must be unique")
    if k < 2 or len(ids) < k:
        raise DatasetError(f"cannot split {len(ids)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit({ids[j]: position % k for position, j in enumerate(order)}, k)


class SegmentationSummary(BaseModel):
    dsc: float | None = None
    jaccard: float | None = None
    voxel_acc: float | None = None
    voxel_sen: float | None = None
    voxel_spe: float | None = None


class Prediction(BaseModel):
    id: str
    fold: int
    label: int
    probability: float
    dsc: float | None = None


class MetricsReport(BaseModel):
    fold: int | None = None
    confusion: ConfusionCounts
    acc: float | None = None
    sen: float | None = None
    spe: float | None = None
    pre: float | None = None
    f1: float | None = None
    auc: float | None = None
    roc_points: list[tuple[float, float]] = []
    seg: SegmentationSummary | None = None

    def metric(self, name: str) -> float | None:
        if name in SEGMENTATION_METRICS:
            return getattr(self.seg, name) if self.seg else None
        return getattr(self, name)


class CrossValidationResult(BaseModel):
    k: int
    seed: int
    w: float
    folds: list[MetricsReport]
    mean: dict[str, float | None]
    pooled: MetricsReport
    predictions: list[Prediction]

    def fold_values(self, metric: str) -> list[float]:
        return [v for v in (f.metric(metric) for f in self.folds) if v is not None]


def _mean_or_none(values: Sequence[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _summarize_segmentation(per_patient: list[SegmentationMetrics]) -> SegmentationSummary | None:
    if not per_patient:
        return None
    return SegmentationSummary(**{
        name: _mean_or_none([getattr(m, name) for m in per_patient]) for name in SEGMENTATION_METRICS
    })


def build_report(scores, labels, seg: list[SegmentationMetrics], fold: int | None = None) -> MetricsReport:
    confusion = confusion_from_scores(scores, labels)
    metrics = classification_metrics(confusion)
    auc, points = None, []
    if len(set(int(l) for l in labels)) == 2:
        auc, points = roc_auc(scores, labels)
    else:
        where = "pooled set" if fold is None else f"fold {fold}"
        logger.warning(f"AUC undefined for {where}: held-out labels contain a single class")
    return MetricsReport(
        fold=fold, confusion=confusion, auc=auc, roc_points=points,
        seg=_summarize_segmentation(seg), **metrics._asdict(),
    )


def predict_volumes(
    network: ChmflNetwork, pet: Volume, ct: Volume, mask: Volume | None = None, dtype=np.float32
) -> tuple[float, np.ndarray | None]:
    """DM probability (softmax class 1) and argmax segmentation, in inference mode."""
    def tensor(v: Volume | None) -> Tensor | None:
        return None if v is None else Tensor.wrap(v.voxels.astype(dtype)[None, None])

    out = network.forward(tensor(pet), tensor(ct), training=False, mask=tensor(mask))
    probability = float(softmax(out.dm_logits, axis=1).data[0, 1])
    segmentation = None
    if out.seg_logits is not None:
        segmentation = out.seg_logits.data[0].argmax(axis=0).astype(np.uint8)
    return probability, segmentation


def predict_record(network: ChmflNetwork, record: PatientRecord, dtype=np.float32) -> tuple[float, np.ndarray | None]:
    return predict_volumes(network, record.pet, record.ct, record.mask, dtype)


def run_fold(
    fold: int,
    dataset: list[PatientRecord],
    split: FoldSplit,
    net_cfg: NetworkConfig,
    train_cfg: TrainingConfig,
    seed: np.random.SeedSequence,
) -> tuple[MetricsReport, list[Prediction], list[SegmentationMetrics]]:
    test_ids = set(split.test_ids(fold))
    training = [r for r in dataset if r.id not in test_ids]
    testing = [r for r in dataset if r.id in test_ids]
    if len({r.dm_label for r in training}) != 2:
        raise DatasetError(f"fold {fold}: training portion contains a single class")

    logger.info(f"Fold {fold}: training on {len(training)}, testing on {len(testing)} patients")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(train_cfg.dtype)
    network = ChmflNetwork(net_cfg, rng=rng, dtype=dtype)
    train(network, training, train_cfg, rng)

    predictions, seg = [], []
    for record in testing:
        probability, mask = predict_record(network, record, dtype)
        dsc = None
        if mask is not None:
            seg.append(segmentation_metrics(mask, record.mask.voxels))
            dsc = seg[-1].dsc
        predictions.append(Prediction(id=record.id, fold=fold, label=record.dm_label,
                                      probability=probability, dsc=dsc))
    report = build_report([p.probability for p in predictions], [p.label for p in predictions], seg, fold)
    logger.info(
        f"Fold {fold}: acc {report.acc} auc {report.auc} "
        f"dsc {report.seg.dsc if report.seg else '-'}"
    )
    return report, predictions, seg


def cross_validate(
    dataset: list[PatientRecord],
    net_cfg: NetworkConfig,
    train_cfg: TrainingConfig,
    k: int = 6,
    seed: int = 0,
    workers: int = 1,
) -> CrossValidationResult:
    """
    k-fold protocol: train on k-1 folds, test on the held-out one.

    Reports per-fold metrics, their mean across folds (undefined values
    excluded) and the metrics of the pooled confusion matrix and pooled scores.
    """
    split = make_folds([r.id for r in dataset], k, seed)
    seeds = np.random.SeedSequence(seed).spawn(k)
    jobs = [(fold, dataset, split, net_cfg, train_cfg, seeds[fold]) for fold in range(k)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_fold, *zip(*jobs)))
    else:
        outcomes = [run_fold(*job) for job in jobs]

    folds = [report for report, _, _ in outcomes]
    predictions = [p for _, preds, _ in outcomes for p in preds]
    seg = [m for _, _, metrics in outcomes for m in metrics]
    pooled = build_report([p.probability for p in predictions], [p.label for p in predictions], seg)

    mean = {
        name: _mean_or_none([f.metric(name) for f in folds])
        for name in CLASSIFICATION_METRICS + ("auc",) + (SEGMENTATION_METRICS if seg else ())
    }
    excluded = sum(f.auc is None for f in folds)
    if excluded:
        logger.warning(f"{excluded} fold(s) excluded from the mean AUC")
    return CrossValidationResult(
        k=k, seed=seed, w=train_cfg.w, folds=folds, mean=mean, pooled=pooled, predictions=predictions
    )


class SweepRow(BaseModel):
    w: float
    acc: float | None
    sen: float | None
    spe: float | None
    auc: float | None
    dsc: float | None


def weight_sweep(
    dataset: list[PatientRecord],
    net_cfg: NetworkConfig,
    train_cfg: TrainingConfig,
    w_values: Sequence[float],
    k: int = 6,
    seed: int = 0,
    workers: int = 1,
) -> tuple[list[SweepRow], list[CrossValidationResult]]:
    """Cross-validates once per CFL weight."""
    for w in w_values:
        if not 0.0 <= w <= 1.0:
            raise DomainError(f"CFL weight must lie in [0, 1], got {w}")
    rows, results = [], []
    for w in w_values:
        logger.info(f"Sweep: w = {w}")
        result = cross_validate(dataset, net_cfg, train_cfg.model_copy(update={"w": w}), k, seed, workers)
        results.append(result)
        rows.append(SweepRow(
            w=w, acc=result.mean["acc"], sen=result.mean["sen"], spe=result.mean["spe"],
            auc=result.pooled.auc, dsc=result.mean.get("dsc"),
        ))
    return rows, results


def unpaired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Equal-variance two-sample t statistic and its two-sided p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DomainError("each sample needs at least two values")
    df = a.size + b.size - 2
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / df
    if pooled <= 0:
        raise DomainError("pooled variance is zero")
    t = (a.mean() - b.mean()) / np.sqrt(pooled * (1.0 / a.size + 1.0 / b.size))
    p = special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return float(t), float(p)


def compare_reports(a: CrossValidationResult, b: CrossValidationResult, metric: str) -> tuple[float, float]:
    """t-test on the per-fold samples of one metric from two cross-validation runs."""
    return unpaired_t_test(a.fold_values(metric), b.fold_values(metric))
