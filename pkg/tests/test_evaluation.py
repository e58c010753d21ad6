import numpy as np
import pytest

from src.config import TrainingConfig
from src.errors import DatasetError, DomainError, ShapeError
from src.evaluation import (
    ConfusionCounts,
    MetricsReport,
    build_report,
    classification_metrics,
    compare_reports,
    confusion_from_scores,
    cross_validate,
    make_folds,
    roc_auc,
    segmentation_metrics,
    unpaired_t_test,
    weight_sweep,
)
from tests.conftest import make_record


class TestClassificationMetrics:
    def test_reference_counts(self):
        m = classification_metrics(ConfusionCounts(tp=21, fp=4, fn=3, tn=20))
        assert round(m.acc, 3) == 0.854
        assert round(m.sen, 3) == 0.875
        assert round(m.spe, 3) == 0.833
        assert round(m.pre, 3) == 0.840
        assert round(m.f1, 3) == 0.857

    def test_all_correct(self):
        m = classification_metrics(ConfusionCounts(tp=5, tn=7))
        assert all(v == 1.0 for v in m)

    def test_undefined_precision(self):
        m = classification_metrics(ConfusionCounts(tp=0, fp=0, fn=4, tn=6))
        assert m.pre is None
        assert m.f1 is None
        assert m.sen == 0.0
        assert m.acc == 0.6

    def test_counts_are_non_negative(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1)

    def test_confusion_from_scores(self):
        c = confusion_from_scores([0.9, 0.5, 0.4, 0.1], [1, 0, 1, 0])
        assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 1)

    def test_counts_recoverable_from_metrics(self):
        for total in range(1, 31):
            for positives in range(total + 1):
                negatives = total - positives
                for tp in range(positives + 1):
                    for tn in range(negatives + 1):
                        counts = ConfusionCounts(tp=tp, fp=negatives - tn, tn=tn, fn=positives - tp)
                        m = classification_metrics(counts)
                        tp_back = round(m.sen * positives) if positives else 0
                        tn_back = round(m.acc * total) - tp_back
                        rebuilt = ConfusionCounts(
                            tp=tp_back, fp=negatives - tn_back, tn=tn_back, fn=positives - tp_back
                        )
                        assert rebuilt == counts


class TestRoc:
    def test_reference_scores(self):
        auc, points = roc_auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])
        assert auc == pytest.approx(0.75)
        assert points[0] == (0.0, 0.0)
        assert points[-1] == (1.0, 1.0)

    def test_perfect_separation(self):
        auc, _ = roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert auc == 1.0

    def test_pure_ties(self):
        auc, points = roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0])
        assert auc == pytest.approx(0.5)
        assert points == [(0.0, 0.0), (1.0, 1.0)]

    def test_matches_pairwise_count(self, rng):
        scores = rng.integers(0, 5, 30) / 4
        labels = np.r_[np.ones(15, int), np.zeros(15, int)]
        pos, neg = scores[labels == 1], scores[labels == 0]
        pairwise = np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])
        assert roc_auc(scores, labels)[0] == pytest.approx(pairwise)

    def test_curve_is_monotone(self, rng):
        _, points = roc_auc(rng.random(20), rng.permutation([0, 1] * 10))
        fpr, tpr = zip(*points)
        assert list(fpr) == sorted(fpr) and list(tpr) == sorted(tpr)

    @pytest.mark.parametrize("transform", [np.exp, lambda s: 3.0 * s + 1.0, lambda s: s ** 3, np.arctan])
    def test_monotone_transform_invariance(self, rng, transform):
        scores = rng.standard_normal(40)
        scores[::5] = scores[1::5]
        labels = rng.permutation([0, 1] * 20)
        assert roc_auc(transform(scores), labels)[0] == pytest.approx(roc_auc(scores, labels)[0], abs=1e-12)

    def test_single_class(self):
        with pytest.raises(DomainError):
            roc_auc([0.1, 0.2], [1, 1])


class TestSegmentationMetrics:
    def test_identical(self):
        mask = np.zeros((4, 4, 4), bool)
        mask[1:3, 1:3, 1:3] = True
        m = segmentation_metrics(mask, mask)
        assert m.dsc == 1.0 and m.jaccard == 1.0 and m.voxel_acc == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4, 4), bool), np.zeros((4, 4, 4), bool)
        a[0, 0, 0], b[3, 3, 3] = True, True
        assert segmentation_metrics(a, b).dsc == 0.0

    def test_hand_counts(self):
        pred, truth = np.zeros(10, bool), np.zeros(10, bool)
        pred[:6] = True
        truth[3:7] = True
        m = segmentation_metrics(pred, truth)
        assert m.dsc == pytest.approx(0.6)
        assert m.jaccard == pytest.approx(3 / 7)
        assert m.voxel_sen == pytest.approx(0.75)
        assert m.voxel_spe == pytest.approx(3 / 6)

    def test_jaccard_dice_relation(self, rng):
        pred, truth = rng.random((6, 6, 6)) > 0.5, rng.random((6, 6, 6)) > 0.6
        m = segmentation_metrics(pred, truth)
        assert m.jaccard == pytest.approx(m.dsc / (2 - m.dsc))

    def test_both_empty(self):
        empty = np.zeros((2, 2, 2), bool)
        m = segmentation_metrics(empty, empty)
        assert m.dsc == 1.0 and m.voxel_sen is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            segmentation_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestFolds:
    def test_full_cohort(self):
        split = make_folds([f"P{i:02d}" for i in range(48)], k=6, seed=0)
        assert split.sizes() == [8] * 6

    def test_remainder(self):
        split = make_folds([str(i) for i in range(7)], k=6, seed=0)
        assert sorted(split.sizes(), reverse=True) == [2, 1, 1, 1, 1, 1]

    def test_deterministic_partition(self):
        ids = [f"P{i}" for i in range(20)]
        a, b = make_folds(ids, 4, seed=3), make_folds(ids, 4, seed=3)
        assert a.assignments == b.assignments
        assert sorted(i for f in range(4) for i in a.test_ids(f)) == sorted(ids)
        assert set(a.train_ids(0)).isdisjoint(a.test_ids(0))

    def test_too_few_ids(self):
        with pytest.raises(DatasetError):
            make_folds(["a", "b"], k=3)

    def test_duplicate_ids(self):
        with pytest.raises(DatasetError):
            make_folds(["a", "a", "b"], k=2)


class TestTTest:
    def test_reference_samples(self):
        t, p = unpaired_t_test([1, 2, 3], [2, 3, 4])
        assert t == pytest.approx(-1.2247, abs=1e-4)
        assert p == pytest.approx(0.288, abs=1e-3)

    def test_identical_means(self):
        t, p = unpaired_t_test([1, 2, 3], [3, 2, 1])
        assert t == 0.0
        assert p == pytest.approx(1.0)

    def test_degenerate_samples(self):
        with pytest.raises(DomainError):
            unpaired_t_test([1.0], [2.0, 3.0])
        with pytest.raises(DomainError):
            unpaired_t_test([1.0, 1.0], [1.0, 1.0])


@pytest.fixture
def cv_dataset():
    return [make_record(f"C{i}", label=i % 2, seed=i) for i in range(6)]


@pytest.fixture
def cv_configs(tiny_network_cfg):
    return tiny_network_cfg, TrainingConfig(max_epochs=1, learning_rate=1e-3)


class TestCrossValidation:
    def test_pooled_totals(self, cv_dataset, cv_configs):
        result = cross_validate(cv_dataset, *cv_configs, k=3, seed=0)
        assert len(result.folds) == 3
        assert result.pooled.confusion.total == len(cv_dataset)
        assert sorted(p.id for p in result.predictions) == sorted(r.id for r in cv_dataset)
        assert all(0.0 <= p.probability <= 1.0 for p in result.predictions)
        assert result.pooled.seg is not None
        assert set(result.mean) >= {"acc", "sen", "spe", "pre", "f1", "auc", "dsc"}

    def test_deterministic(self, cv_dataset, cv_configs):
        a = cross_validate(cv_dataset, *cv_configs, k=3, seed=2)
        b = cross_validate(cv_dataset, *cv_configs, k=3, seed=2)
        assert a.model_dump() == b.model_dump()

    def test_single_class_training_portion(self, cv_configs):
        dataset = [make_record(f"S{i}", label=1, seed=i) for i in range(4)]
        with pytest.raises(DatasetError):
            cross_validate(dataset, *cv_configs, k=2, seed=0)

    def test_single_class_fold_has_no_auc(self):
        report = build_report([0.9, 0.2], [1, 1], [], fold=0)
        assert report.auc is None
        assert report.metric("auc") is None

    def test_compare_reports(self, cv_dataset, cv_configs):
        a = cross_validate(cv_dataset, *cv_configs, k=3, seed=0)
        b = a.model_copy(deep=True)
        for i, fold in enumerate(b.folds):
            b.folds[i] = fold.model_copy(update={"acc": (fold.acc or 0.0) + 0.1 * (i + 1)})
        t, p = compare_reports(a, b, "acc")
        assert t < 0
        assert 0.0 <= p <= 1.0


def test_weight_sweep_rows(cv_dataset, cv_configs):
    rows, results = weight_sweep(cv_dataset, *cv_configs, w_values=[0.0, 1.0], k=3, seed=0)
    assert [r.w for r in rows] == [0.0, 1.0]
    assert [r.w for r in results] == [0.0, 1.0]
    # the decoder is untrained at w = 0 yet still produces a segmentation
    assert rows[0].dsc is not None


def test_weight_sweep_range(cv_dataset, cv_configs):
    with pytest.raises(DomainError):
        weight_sweep(cv_dataset, *cv_configs, w_values=[0.5, 1.5], k=3)


def test_metrics_report_serializes():
    report = MetricsReport(confusion=ConfusionCounts(tp=1, tn=1), acc=1.0, roc_points=[(0.0, 0.0), (1.0, 1.0)])
    assert MetricsReport.model_validate_json(report.model_dump_json()) == report
