"""Ranking metrics, IoU reports, and histograms against brute-force oracles."""

import numpy as np
import pytest
from jsonschema import ValidationError, validate

from owlseg.core import ClassRegistry, DomainError, LabelDomain, LabelSet
from owlseg.evaluation import (
    EVAL_REPORT_SCHEMA,
    HistogramRecord,
    aupr,
    auroc,
    export_histogram,
    histogram_to_csv,
    miou_report,
)


def auroc_pairwise(scores, is_unknown):
    """O(N^2) comparison count: wins 1, ties 1/2."""
    pos = scores[is_unknown]
    neg = scores[~is_unknown]
    total = 0.0
    for u in pos:
        for k in neg:
            total += 1.0 if u > k else (0.5 if u == k else 0.0)
    return total / (len(pos) * len(neg))


def aupr_sweep(scores, is_unknown):
    """Exhaustive threshold sweep over the distinct score values."""
    n_pos = is_unknown.sum()
    prev_recall, area = 0.0, 0.0
    for t in np.unique(scores)[::-1]:
        sel = scores >= t
        tp = is_unknown[sel].sum()
        precision = tp / sel.sum()
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def random_instance(rng, n=60, quantize=True):
    scores = rng.normal(size=n)
    if quantize:
        scores = np.round(scores, 1)  # force plenty of ties
    is_unknown = rng.uniform(size=n) < 0.35
    if not is_unknown.any():
        is_unknown[0] = True
    if is_unknown.all():
        is_unknown[-1] = False
    return scores, is_unknown


class TestAuroc:
    def test_perfect_separation(self):
        got = auroc(np.array([0.1, 0.2, 0.8, 0.9]),
                    np.array([False, False, True, True]))
        assert got == 1.0

    def test_half_right_hand_case(self):
        got = auroc(np.array([0.4, 0.6, 0.2]), np.array([False, True, True]))
        assert got == 0.5

    def test_all_equal_scores(self):
        assert auroc(np.ones(10), np.arange(10) % 2 == 0) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(DomainError):
            auroc(np.array([1.0, 2.0]), np.array([True, True]))
        with pytest.raises(DomainError):
            auroc(np.array([1.0, 2.0]), np.array([False, False]))

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            scores, is_unknown = random_instance(rng)
            assert auroc(scores, is_unknown) == pytest.approx(
                auroc_pairwise(scores, is_unknown), abs=1e-12
            )

    def test_negated_scores_complement(self):
        rng = np.random.default_rng(2)
        scores, is_unknown = random_instance(rng, quantize=False)
        assert auroc(scores, is_unknown) + auroc(-scores, is_unknown) == pytest.approx(
            1.0, abs=1e-12
        )

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(3)
        scores, is_unknown = random_instance(rng)
        assert auroc(np.exp(scores), is_unknown) == auroc(scores, is_unknown)

    def test_shape_validation(self):
        with pytest.raises(DomainError):
            auroc(np.ones((2, 2)), np.array([[True, False], [True, False]]))
        with pytest.raises(DomainError):
            auroc(np.ones(3), np.array([True, False]))


class TestAupr:
    def test_perfect_separation(self):
        got = aupr(np.array([0.1, 0.2, 0.8, 0.9]),
                   np.array([False, False, True, True]))
        assert got == 1.0

    def test_all_equal_gives_prevalence(self):
        is_unknown = np.zeros(20, dtype=bool)
        is_unknown[:7] = True
        assert aupr(np.ones(20), is_unknown) == pytest.approx(7 / 20, abs=1e-15)

    def test_no_positives_rejected(self):
        with pytest.raises(DomainError):
            aupr(np.array([1.0, 2.0]), np.array([False, False]))

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            scores, is_unknown = random_instance(rng)
            assert aupr(scores, is_unknown) == pytest.approx(
                aupr_sweep(scores, is_unknown), abs=1e-12
            )


def labelset(values, domain=LabelDomain.OPEN, void=None):
    return LabelSet(labels=np.asarray(values), domain=domain, void_mask=void)


class TestMiouReport:
    def test_two_class_hand_case(self):
        registry = ClassRegistry(old_classes=(1, 2))
        report = miou_report(
            labelset([1, 1, 2, 2]), labelset([1, 2, 2, 2], LabelDomain.FULL), registry
        )
        assert report.iou_per_class == {1: 0.5, 2: 2 / 3}
        assert report.miou == float(np.mean([0.5, 2 / 3]))
        assert report.miou_old == report.miou
        assert report.miou_novel == 0.0
        assert report.class_ids == (0, 1, 2)
        assert report.confusion == ((0, 0, 0), (0, 1, 0), (0, 1, 2))

    def test_identical_labels_score_one(self):
        registry = ClassRegistry(old_classes=(1, 2, 3))
        values = np.array([1, 2, 3, 1, 2, 3, 3])
        report = miou_report(
            labelset(values), labelset(values, LabelDomain.FULL), registry
        )
        assert report.miou == 1.0
        assert report.miou_old == 1.0
        assert all(v == 1.0 for v in report.iou_per_class.values())

    def test_unreached_novel_class_scores_zero_not_nan(self):
        # the evaluated set includes remaining-novel classes present in the
        # ground truth, so a model that cannot emit them scores zero there
        registry = ClassRegistry(old_classes=(1, 2), remaining_novel=frozenset({6}))
        report = miou_report(
            labelset([1, 2, 1, 2]),
            labelset([1, 2, 6, 6], LabelDomain.FULL),
            registry,
        )
        assert report.class_ids == (0, 1, 2, 6)
        assert report.miou_novel == 0.0
        assert report.iou_per_class[6] == 0.0
        assert report.miou == float(np.mean([report.iou_per_class[1],
                                             report.iou_per_class[2], 0.0]))

    def test_learned_novel_in_miou_novel(self):
        registry = ClassRegistry(
            old_classes=(1, 2), learned_novel=(7,), rc_total=3, rc_assigned=((0, 7),)
        )
        report = miou_report(
            labelset([1, 2, 7, 7]), labelset([1, 2, 7, 7], LabelDomain.FULL), registry
        )
        assert report.miou_novel == 1.0
        assert report.miou == 1.0

    def test_void_ground_truth_excluded(self):
        registry = ClassRegistry(old_classes=(1, 2))
        void = np.array([False, False, False, True])
        report = miou_report(
            labelset([1, 1, 2, 2]),
            labelset([1, 2, 2, 1], LabelDomain.FULL, void=void),
            registry,
        )
        # last point (pred 2, gt 1) never reaches the confusion matrix
        assert report.iou_per_class == {1: 0.5, 2: 0.5}

    def test_matches_counting_oracle_exactly(self):
        rng = np.random.default_rng(5)
        registry = ClassRegistry(old_classes=(1, 2, 3), remaining_novel=frozenset({6}))
        for trial in range(25):
            n = int(rng.integers(5, 120))
            gt = rng.choice([1, 2, 3, 6], size=n)
            pred = rng.choice([0, 1, 2, 3], size=n)
            report = miou_report(
                labelset(pred), labelset(gt, LabelDomain.FULL), registry
            )
            novel_eval = [6] if (gt == 6).any() else []
            ious = {}
            for cid in (0, 1, 2, 3, *novel_eval):
                tp = int(((pred == cid) & (gt == cid)).sum())
                fp = int(((pred == cid) & (gt != cid)).sum())
                fn = int(((pred != cid) & (gt == cid)).sum())
                if tp + fp + fn > 0:
                    ious[cid] = tp / (tp + fp + fn)
            assert report.iou_per_class == ious
            want_miou = float(np.mean([ious[c] for c in (1, 2, 3, *novel_eval)
                                       if c in ious]))
            assert report.miou == want_miou
            assert report.miou_old == float(
                np.mean([ious[c] for c in (1, 2, 3) if c in ious])
            )

    def test_guards(self):
        registry = ClassRegistry(old_classes=(1, 2))
        with pytest.raises(DomainError):
            miou_report(labelset([1, 2]), labelset([1, 2, 2], LabelDomain.FULL),
                        registry)
        with pytest.raises(DomainError):
            miou_report(
                labelset([1, 2]),
                labelset([1, 2], LabelDomain.FULL, void=np.array([True, True])),
                registry,
            )
        with pytest.raises(DomainError):
            miou_report(labelset([1, 9]), labelset([1, 2], LabelDomain.FULL), registry)
        with pytest.raises(DomainError):
            miou_report(labelset([1, 2]), labelset([1, 9], LabelDomain.FULL), registry)


class TestHistogram:
    def test_conservation_and_shared_edges(self):
        rng = np.random.default_rng(6)
        scores = rng.normal(size=300)
        is_unknown = rng.uniform(size=300) < 0.4
        rec = export_histogram(scores, is_unknown, bins=20)
        assert len(rec.bin_edges) == 21
        assert len(rec.count_known) == len(rec.count_unknown) == 20
        assert sum(rec.count_known) == int((~is_unknown).sum())
        assert sum(rec.count_unknown) == int(is_unknown.sum())

    def test_separated_populations_do_not_overlap(self):
        scores = np.concatenate([np.zeros(50), np.ones(50)])
        is_unknown = np.arange(100) >= 50
        rec = export_histogram(scores, is_unknown, bins=10)
        overlap = [k and u for k, u in zip(rec.count_known, rec.count_unknown)]
        assert not any(overlap)

    def test_constant_scores_still_bin(self):
        rec = export_histogram(np.full(9, 2.5), np.arange(9) % 3 == 0, bins=4)
        assert sum(rec.count_known) == 6
        assert sum(rec.count_unknown) == 3

    def test_min_bins(self):
        with pytest.raises(DomainError):
            export_histogram(np.ones(4), np.array([True, False, True, False]), bins=1)

    def test_csv_shape(self):
        rec = export_histogram(np.arange(10.0), np.arange(10) % 2 == 0, bins=5)
        lines = histogram_to_csv(rec).splitlines()
        assert lines[0] == "bin_left,bin_right,count_known,count_unknown"
        assert len(lines) == 6
        left, right, known, unknown = lines[1].split(",")
        assert float(left) == rec.bin_edges[0]
        assert float(right) == rec.bin_edges[1]

    def test_json_round_trip(self):
        rec = export_histogram(np.arange(10.0), np.arange(10) % 2 == 0, bins=5)
        assert HistogramRecord.from_json_dict(rec.to_json_dict()) == rec


class TestReportSchema:
    def _report(self):
        registry = ClassRegistry(old_classes=(1, 2))
        return miou_report(
            labelset([1, 1, 2, 2]), labelset([1, 2, 2, 2], LabelDomain.FULL), registry
        )

    def test_optional_fields_omitted_when_absent(self):
        doc = self._report().to_json_dict()
        assert "auroc" not in doc
        assert "aupr" not in doc
        assert "histogram" not in doc
        assert "score_stats" not in doc
        validate(doc, EVAL_REPORT_SCHEMA)

    def test_full_report_validates(self):
        from dataclasses import replace

        rec = export_histogram(np.arange(8.0), np.arange(8) % 2 == 0, bins=4)
        full = replace(
            self._report(),
            auroc=0.9,
            aupr=0.8,
            histogram=rec,
            score_stats={"mean_known": 0.1, "mean_unknown": 0.7},
        )
        doc = full.to_json_dict()
        assert set(doc) >= {"auroc", "aupr", "histogram", "score_stats"}
        validate(doc, EVAL_REPORT_SCHEMA)

    def test_schema_rejects_unknown_keys(self):
        doc = self._report().to_json_dict()
        doc["surprise"] = 1
        with pytest.raises(ValidationError):
            validate(doc, EVAL_REPORT_SCHEMA)
