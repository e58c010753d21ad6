import logging
import os
from typing import Sequence

from pydantic import ValidationError

from src.errors import DatasetError
from src.evaluation import (
    CLASSIFICATION_METRICS,
    SEGMENTATION_METRICS,
    CrossValidationResult,
    MetricsReport,
    SweepRow,
)
from src.optim import TrainingHistory

logger = logging.getLogger(__name__)


def write_text(path: str, text: str) -> str:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)
    return path


def _cell(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(header)] + [[_cell(v) for v in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _metric_names(result: CrossValidationResult) -> list[str]:
    names = list(CLASSIFICATION_METRICS) + ["auc"]
    if result.pooled.seg is not None:
        names += list(SEGMENTATION_METRICS)
    return names


def crossval_table(result: CrossValidationResult) -> str:
    names = _metric_names(result)
    rows = [[f"fold {f.fold}"] + [f.metric(n) for n in names] for f in result.folds]
    rows.append(["mean"] + [result.mean.get(n) for n in names])
    rows.append(["pooled"] + [result.pooled.metric(n) for n in names])
    c = result.pooled.confusion
    footer = f"w = {result.w}  k = {result.k}  seed = {result.seed}  pooled tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}\n"
    return format_table([""] + names, rows) + footer


def metrics_text(result: CrossValidationResult) -> str:
    """key=value lines: mean-over-folds metrics, then pooled ones."""
    names = _metric_names(result)
    lines = [f"mean_{n}={_cell(result.mean.get(n))}" for n in names]
    lines += [f"pooled_{n}={_cell(result.pooled.metric(n))}" for n in names]
    c = result.pooled.confusion
    lines += [f"tp={c.tp}", f"fp={c.fp}", f"tn={c.tn}", f"fn={c.fn}", f"w={result.w}", f"k={result.k}"]
    return "\n".join(lines) + "\n"


def roc_text(report: MetricsReport) -> str:
    return "fpr\ttpr\n" + "".join(f"{fpr:.6f}\t{tpr:.6f}\n" for fpr, tpr in report.roc_points)


def write_crossval(result: CrossValidationResult, out_dir: str, prefix: str = "") -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = [
        write_text(os.path.join(out_dir, f"{prefix}crossval.json"), result.model_dump_json(indent=2)),
        write_text(os.path.join(out_dir, f"{prefix}metrics.txt"), metrics_text(result)),
        write_text(os.path.join(out_dir, f"{prefix}report.txt"), crossval_table(result)),
        write_text(os.path.join(out_dir, f"{prefix}roc.txt"), roc_text(result.pooled)),
    ]
    for fold in result.folds:
        if fold.roc_points:
            written.append(write_text(os.path.join(out_dir, f"{prefix}roc_fold{fold.fold}.txt"), roc_text(fold)))
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


def load_crossval(path: str) -> CrossValidationResult:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return CrossValidationResult.model_validate_json(f.read())
    except FileNotFoundError:
        raise DatasetError(f"cross-validation report not found: {path}") from None
    except ValidationError as e:
        raise DatasetError(f"invalid cross-validation report {path}: {e}") from None


def sweep_table(rows: list[SweepRow]) -> str:
    return format_table(
        ["w", "acc", "sen", "spe", "auc", "dsc"],
        [[r.w, r.acc, r.sen, r.spe, r.auc, r.dsc] for r in rows],
    )


def write_sweep(rows: list[SweepRow], results: list[CrossValidationResult], out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = [write_text(os.path.join(out_dir, "sweep.txt"), sweep_table(rows))]
    for row, result in zip(rows, results):
        written += write_crossval(result, out_dir, prefix=f"w{row.w:g}_")
    return written


def write_history(history: TrainingHistory, path: str) -> str:
    return write_text(path, history.to_text())
