"""Unknown scoring, thresholded inference, calibration, and score dumps."""

import csv
import io
import struct

import numpy as np
import pytest
import torch
from scipy.special import softmax
from scipy.stats import entropy

from helpers import make_scan, set_bias, small_model, small_registry, zero_params
from owlseg.core import (
    ClassRegistry,
    ConfigError,
    DomainError,
    FormatError,
    LabelDomain,
)
from owlseg.network import ArchConfig, PointSegmenter, Stage
from owlseg.openset import (
    SCORING_METHODS,
    InferenceConfig,
    calibrate_threshold,
    decode_scores_binary,
    encode_scores_binary,
    encode_scores_csv,
    predict_closed,
    predict_open,
    unknown_score,
)


def two_class_model(dropout=0.2):
    registry = ClassRegistry(old_classes=(1, 2), rc_total=3)
    return PointSegmenter(
        registry, ArchConfig(hidden_width=8, dropout_rate=dropout), seed=0, stage=Stage.OPEN
    )


class TestInferenceConfig:
    def test_invalid(self):
        with pytest.raises(ConfigError):
            InferenceConfig(scoring_method="energy")
        with pytest.raises(ConfigError):
            InferenceConfig(scoring_method="mcdropout", mc_passes=1)
        with pytest.raises(ConfigError):
            InferenceConfig(mc_passes=0)

    def test_json_round_trip(self):
        for cfg in (InferenceConfig(), InferenceConfig(lambda_th=1.25, mc_passes=4)):
            assert InferenceConfig.from_json_dict(cfg.to_json_dict()) == cfg

    def test_method_inventory(self):
        assert SCORING_METHODS == ("real", "msp", "maxlogit", "mcdropout")


class TestScoringHandValues:
    def test_msp_on_flat_two_class_logits(self):
        model = two_class_model()
        zero_params(model)
        scores = unknown_score(model, make_scan(5), InferenceConfig(scoring_method="msp"))
        assert np.allclose(scores, 0.5, atol=1e-15)

    def test_maxlogit_negates_top_logit(self):
        model = two_class_model()
        zero_params(model)
        set_bias(model.g_nm, [3.2, 1.0])
        scores = unknown_score(model, make_scan(5),
                               InferenceConfig(scoring_method="maxlogit"))
        assert np.allclose(scores, -3.2, atol=1e-15)

    def test_real_takes_max_over_unknown_slots(self):
        model = two_class_model()
        zero_params(model)
        set_bias(model.g_re, [0.2, 1.5, -0.3])
        scores = unknown_score(model, make_scan(5), InferenceConfig())
        assert np.allclose(scores, 1.5, atol=1e-15)

    def test_real_rejects_closed_models(self):
        with pytest.raises(DomainError):
            unknown_score(small_model(stage=Stage.CLOSED), make_scan(4),
                          InferenceConfig())


class TestScoringOracles:
    def setup_method(self):
        self.model = small_model(stage=Stage.OPEN)
        self.scan = make_scan(48, seed=2)
        with torch.no_grad():
            self.y_old = self.model(self.scan).y_old.numpy()

    def test_msp_matches_scipy(self):
        got = unknown_score(self.model, self.scan, InferenceConfig(scoring_method="msp"))
        want = 1.0 - softmax(self.y_old, axis=1).max(axis=1)
        assert np.allclose(got, want, atol=1e-12)

    def test_maxlogit_matches_numpy(self):
        got = unknown_score(self.model, self.scan,
                            InferenceConfig(scoring_method="maxlogit"))
        assert np.allclose(got, -self.y_old.max(axis=1), atol=0.0)

    def test_msp_range(self):
        got = unknown_score(self.model, self.scan, InferenceConfig(scoring_method="msp"))
        assert (got >= 0.0).all()
        assert (got <= 1.0 - 1.0 / 3.0 + 1e-12).all()

    def test_mcdropout_matches_manual_replay(self):
        cfg = InferenceConfig(scoring_method="mcdropout", mc_passes=5)
        got = unknown_score(self.model, self.scan, cfg,
                            rng=torch.Generator().manual_seed(9))
        gen = torch.Generator().manual_seed(9)
        probs = np.zeros_like(self.y_old)
        with torch.no_grad():
            for _ in range(5):
                out = self.model(self.scan, dropout_on=True, rng=gen)
                probs += softmax(out.y_old.numpy(), axis=1)
        probs /= 5
        assert np.allclose(got, entropy(probs, axis=1), atol=1e-12)

    def test_mcdropout_range_and_determinism(self):
        cfg = InferenceConfig(scoring_method="mcdropout", mc_passes=4)
        a = unknown_score(self.model, self.scan, cfg)
        b = unknown_score(self.model, self.scan, cfg)
        assert np.array_equal(a, b)  # default generator is derived, not global
        assert (a >= 0.0).all()
        assert (a <= np.log(3.0) + 1e-12).all()

    def test_mcdropout_needs_dropout(self):
        model = small_model(stage=Stage.OPEN, dropout=0.0)
        with pytest.raises(ConfigError):
            unknown_score(model, self.scan,
                          InferenceConfig(scoring_method="mcdropout"))


class TestPredictClosed:
    def test_tie_breaks_to_lowest_class(self):
        model = small_model(stage=Stage.OPEN)
        zero_params(model)
        set_bias(model.g_nm, [1.0, 1.0, 0.5])
        pred = predict_closed(model, make_scan(6))
        assert pred.labels.tolist() == [1] * 6
        assert pred.domain is LabelDomain.CLOSED_OLD

    def test_codomain_is_old_classes(self):
        model = small_model(stage=Stage.CLOSED)
        pred = predict_closed(model, make_scan(40))
        assert set(pred.labels.tolist()) <= {1, 2, 3}
        assert not pred.void_mask.any()

    def test_matches_argmax_oracle(self):
        model = small_model(stage=Stage.OPEN)
        scan = make_scan(30, seed=3)
        with torch.no_grad():
            y_old = model(scan).y_old.numpy()
        want = np.array([1, 2, 3])[y_old.argmax(axis=1)]
        assert np.array_equal(predict_closed(model, scan).labels, want)


class TestPredictOpen:
    def test_threshold_rule_hand_case(self):
        model = two_class_model()
        zero_params(model)
        set_bias(model.g_re, [0.2, 1.5, -0.3])
        set_bias(model.g_nm, [2.0, 1.0])
        scan = make_scan(4)
        at = predict_open(model, scan, InferenceConfig(lambda_th=1.5))
        assert at.labels.tolist() == [0, 0, 0, 0]  # conf == threshold flags unknown
        above = predict_open(model, scan, InferenceConfig(lambda_th=1.6))
        assert above.labels.tolist() == [1, 1, 1, 1]

    def test_infinite_thresholds(self):
        model = small_model(stage=Stage.OPEN)
        scan = make_scan(20)
        all_unknown = predict_open(model, scan, InferenceConfig(lambda_th=float("-inf")))
        assert (all_unknown.labels == 0).all()
        none_unknown = predict_open(model, scan, InferenceConfig(lambda_th=float("inf")))
        assert (none_unknown.labels != 0).all()
        assert np.array_equal(none_unknown.labels, predict_closed(model, scan).labels)

    def test_unknown_set_shrinks_as_threshold_rises(self):
        model = small_model(stage=Stage.OPEN)
        scan = make_scan(60, seed=5)
        conf = unknown_score(model, scan, InferenceConfig())
        lo, hi = np.quantile(conf, [0.3, 0.7])
        few = predict_open(model, scan, InferenceConfig(lambda_th=float(hi)))
        many = predict_open(model, scan, InferenceConfig(lambda_th=float(lo)))
        assert set(np.flatnonzero(few.labels == 0)) <= set(np.flatnonzero(many.labels == 0))

    def test_known_points_keep_closed_prediction(self):
        model = small_model(stage=Stage.OPEN)
        scan = make_scan(60, seed=6)
        conf = unknown_score(model, scan, InferenceConfig())
        th = float(np.median(conf))
        pred = predict_open(model, scan, InferenceConfig(lambda_th=th))
        closed = predict_closed(model, scan)
        known = pred.labels != 0
        assert known.any()
        assert np.array_equal(pred.labels[known], closed.labels[known])
        assert pred.domain is LabelDomain.OPEN

    def test_post_il_codomain_includes_learned_class(self):
        model = small_model(stage=Stage.POST_IL)
        pred = predict_open(model, make_scan(80, seed=7),
                            InferenceConfig(lambda_th=0.0))
        assert pred.domain is LabelDomain.POST_IL
        assert set(pred.labels.tolist()) <= {0, 1, 2, 3, 7}

    def test_guards(self):
        with pytest.raises(DomainError):
            predict_open(small_model(stage=Stage.CLOSED), make_scan(4),
                         InferenceConfig(lambda_th=0.0))
        with pytest.raises(ConfigError):
            predict_open(small_model(stage=Stage.OPEN), make_scan(4), InferenceConfig())


class TestCalibrateThreshold:
    def test_quartile_hand_case(self):
        assert calibrate_threshold(np.array([1.0, 2.0, 3.0, 4.0]), 0.75) == 3.25

    def test_median(self):
        assert calibrate_threshold(np.array([1.0, 2.0, 3.0, 4.0]), 0.5) == 2.5

    def test_constant_scores(self):
        assert calibrate_threshold(np.full(9, 1.7), 0.9) == 1.7

    def test_fraction_below_tracks_target(self):
        rng = np.random.default_rng(8)
        scores = rng.normal(size=4000)
        th = calibrate_threshold(scores, 0.95)
        assert 0.94 <= (scores < th).mean() <= 0.96

    def test_guards(self):
        with pytest.raises(DomainError):
            calibrate_threshold(np.array([]), 0.5)
        for tpr in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(DomainError):
                calibrate_threshold(np.array([1.0]), tpr)


class TestScoreDumps:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.scores = rng.normal(size=200)
        self.pred = rng.integers(0, 8, size=200)
        self.gt = rng.integers(0, 8, size=200)

    def test_csv_header_and_exact_floats(self):
        text = encode_scores_csv(self.scores, self.pred, self.gt)
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == list(("point_index", "score", "pred_label", "gt_label"))
        assert len(rows) == 201
        back = np.array([float(r[1]) for r in rows[1:]])
        assert np.array_equal(back, self.scores)  # repr round-trips exactly
        assert [int(r[0]) for r in rows[1:]] == list(range(200))

    def test_binary_round_trip_is_exact(self):
        blob = encode_scores_binary(self.scores, self.pred, self.gt)
        s, p, g = decode_scores_binary(blob)
        assert np.array_equal(s, self.scores)
        assert np.array_equal(p, self.pred)
        assert np.array_equal(g, self.gt)

    def test_binary_layout(self):
        blob = encode_scores_binary(np.array([0.5]), np.array([3]), np.array([4]))
        assert blob[:4] == b"OWSC"
        version, count = struct.unpack_from("<IQ", blob, 4)
        assert (version, count) == (1, 1)
        assert len(blob) == 16 + struct.calcsize("<Idii")

    def test_binary_format_errors(self):
        blob = encode_scores_binary(self.scores, self.pred, self.gt)
        with pytest.raises(FormatError):
            decode_scores_binary(b"XXXX" + blob[4:])
        bad_version = bytearray(blob)
        bad_version[4] = 9
        with pytest.raises(FormatError):
            decode_scores_binary(bytes(bad_version))
        with pytest.raises(FormatError):
            decode_scores_binary(blob[:-3])
        garbled = bytearray(blob)
        garbled[16] ^= 0xFF  # first record's point index
        with pytest.raises(FormatError):
            decode_scores_binary(bytes(garbled))
        with pytest.raises(FormatError):
            decode_scores_binary(b"OW")

    def test_argument_validation(self):
        with pytest.raises(DomainError):
            encode_scores_csv(self.scores, self.pred[:-1], self.gt)
        with pytest.raises(DomainError):
            encode_scores_binary(self.scores.reshape(2, -1),
                                 self.pred.reshape(2, -1), self.gt.reshape(2, -1))
