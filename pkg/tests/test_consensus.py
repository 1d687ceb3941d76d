import numpy as np
import pytest

from docadapt import consensus as cs
from docadapt.errors import ConfigurationError
from docadapt.geometry import Box, Detection, DetectionSet, iou
from tests.oracles import fuse_ref, random_detection_set


def det(box, cat, score, soft=None, k=3):
    if soft is None:
        soft = np.full(k, 0.05)
        soft[cat] = 1.0 - 0.05 * (k - 1)
    return Detection(box, cat, score, soft)


def cfg(**kw):
    return cs.ConsensusConfig(**kw)


class TestFuseRules:
    def test_identical_detection_becomes_boosted_consensus(self):
        d = det(Box(0, 0, 10, 10), 1, 0.8)
        out = cs.fuse(DetectionSet((d,)), DetectionSet((d,)), cfg(boost=1.1))
        assert len(out) == 1
        assert out.provenance == (cs.CONSENSUS,)
        got = out.detections[0]
        assert got.score == pytest.approx(0.88)
        assert np.allclose(got.box.as_array(), d.box.as_array())
        assert np.allclose(got.soft_label, d.soft_label)

    def test_score_weighted_box_average(self):
        a = det(Box(0, 0, 10, 10), 1, 0.6)
        b = det(Box(2, 0, 12, 10), 1, 0.2)
        out = cs.fuse(DetectionSet((a,)), DetectionSet((b,)), cfg(match_iou=0.5, keep_threshold=0.1))
        want = (0.6 * a.box.as_array() + 0.2 * b.box.as_array()) / 0.8
        assert np.allclose(out.detections[0].box.as_array(), want)

    def test_unmatched_penalized_and_dropped(self):
        d = det(Box(0, 0, 10, 10), 0, 0.9)
        out = cs.fuse(DetectionSet(()), DetectionSet((d,)), cfg(penalty=0.5, keep_threshold=0.6))
        assert len(out) == 0  # 0.45 < 0.6

    def test_unmatched_survives_above_threshold(self):
        d = det(Box(0, 0, 10, 10), 0, 0.9)
        out = cs.fuse(DetectionSet((d,)), DetectionSet(()), cfg(penalty=0.8, keep_threshold=0.6))
        assert len(out) == 1
        assert out.provenance == (cs.STATIC_ONLY,)
        assert out.detections[0].score == pytest.approx(0.72)

    def test_score_cap_at_one(self):
        d = det(Box(0, 0, 10, 10), 0, 0.95)
        out = cs.fuse(DetectionSet((d,)), DetectionSet((d,)), cfg(boost=1.5))
        assert out.detections[0].score == 1.0

    def test_empty_inputs_empty_output(self):
        out = cs.fuse(DetectionSet(()), DetectionSet(()), cfg())
        assert len(out) == 0

    def test_category_gate(self):
        a = det(Box(0, 0, 10, 10), 0, 0.9)
        b = det(Box(0, 0, 10, 10), 1, 0.9)
        out = cs.fuse(DetectionSet((a,)), DetectionSet((b,)), cfg(penalty=1.0, keep_threshold=0.5))
        assert set(out.provenance) == {cs.STATIC_ONLY, cs.DYNAMIC_ONLY}


class TestFuseOracle:
    def test_matches_pipeline_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        config = cfg(match_iou=0.4, boost=1.15, penalty=0.6, keep_threshold=0.35, nms_iou=0.45)
        for _ in range(120):
            r_s = random_detection_set(rng, int(rng.integers(0, 7)))
            r_d = random_detection_set(rng, int(rng.integers(0, 7)))
            out = cs.fuse(r_s, r_d, config)
            ref_dets, ref_prov = fuse_ref(r_s, r_d, config)
            assert len(out) == len(ref_dets)
            for got, (want, prov) in zip(out.detections, zip(ref_dets, ref_prov)):
                assert np.allclose(got.box.as_array(), want.box.as_array(), atol=1e-12)
                assert got.score == pytest.approx(want.score, abs=1e-12)
                assert got.category == want.category
                assert np.allclose(got.soft_label, want.soft_label, atol=1e-12)
            assert list(out.provenance) == ref_prov


class TestFuseInvariants:
    def test_consensus_outscores_either_teacher(self):
        # a fused detection's score is >= every overlapping same-category
        # teacher score, up to the cap at 1.0
        rng = np.random.default_rng(1)
        config = cfg(keep_threshold=0.05, penalty=0.9, match_iou=0.4)
        for _ in range(40):
            r_s = random_detection_set(rng, 5)
            r_d = random_detection_set(rng, 5)
            out = cs.fuse(r_s, r_d, config)
            for d, p in zip(out.detections, out.provenance):
                if p != cs.CONSENSUS:
                    continue
                parent_scores = [
                    t.score
                    for t in list(r_s) + list(r_d)
                    if t.category == d.category and iou(t.box, d.box) >= config.match_iou
                ]
                assert parent_scores, "consensus detection has no overlapping parents"
                assert d.score == 1.0 or d.score >= max(parent_scores) - 1e-12

    def test_output_count_bounded(self):
        rng = np.random.default_rng(2)
        config = cfg(keep_threshold=0.05, penalty=1.0)
        for _ in range(40):
            r_s = random_detection_set(rng, 6)
            r_d = random_detection_set(rng, 6)
            assert len(cs.fuse(r_s, r_d, config)) <= len(r_s) + len(r_d)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(3)
        config = cfg(match_iou=0.3, keep_threshold=0.2, penalty=0.7)
        for _ in range(100):
            r_s = random_detection_set(rng, int(rng.integers(0, 7)))
            r_d = random_detection_set(rng, int(rng.integers(0, 7)))
            ab = cs.fuse(r_s, r_d, config)
            ba = cs.fuse(r_d, r_s, config)
            cons_ab = [
                (tuple(d.box.as_array()), d.category, d.score)
                for d, p in zip(ab.detections, ab.provenance)
                if p == cs.CONSENSUS
            ]
            cons_ba = [
                (tuple(d.box.as_array()), d.category, d.score)
                for d, p in zip(ba.detections, ba.provenance)
                if p == cs.CONSENSUS
            ]
            assert sorted(cons_ab) == sorted(cons_ba)
            # single-teacher provenances swap labels only
            single_ab = sorted(
                (tuple(d.box.as_array()), p)
                for d, p in zip(ab.detections, ab.provenance)
                if p != cs.CONSENSUS
            )
            swap = {cs.STATIC_ONLY: cs.DYNAMIC_ONLY, cs.DYNAMIC_ONLY: cs.STATIC_ONLY}
            single_ba = sorted(
                (tuple(d.box.as_array()), swap[p])
                for d, p in zip(ba.detections, ba.provenance)
                if p != cs.CONSENSUS
            )
            assert single_ab == single_ba

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        r_s = random_detection_set(rng, 5)
        r_d = random_detection_set(rng, 5)
        a = cs.fuse(r_s, r_d, cfg())
        b = cs.fuse(r_s, r_d, cfg())
        assert [d.score for d in a.detections] == [d.score for d in b.detections]

    def test_scores_meet_floor_and_nms_clean(self):
        rng = np.random.default_rng(5)
        config = cfg(keep_threshold=0.3, penalty=0.8, nms_iou=0.4)
        for _ in range(30):
            out = cs.fuse(
                random_detection_set(rng, 6), random_detection_set(rng, 6), config
            )
            for d in out.detections:
                assert d.score >= config.keep_threshold
            for i in range(len(out)):
                for j in range(i + 1, len(out)):
                    di, dj = out.detections[i], out.detections[j]
                    if di.category == dj.category:
                        assert iou(di.box, dj.box) <= config.nms_iou + 1e-12


class TestHardSelect:
    def test_all_below_threshold_empty(self):
        dets = DetectionSet((det(Box(0, 0, 5, 5), 0, 0.3),))
        assert len(cs.hard_select(dets, 0.5)) == 0

    def test_tiny_threshold_keeps_everything(self):
        rng = np.random.default_rng(6)
        dets = random_detection_set(rng, 4)
        out = cs.hard_select(dets, 1e-9, nms_iou=0.99)
        assert len(out) == len(dets)
        assert set(out.provenance) == {cs.DYNAMIC_ONLY}

    def test_mixed_scores_filtered(self):
        dets = DetectionSet(
            (
                det(Box(0, 0, 5, 5), 0, 0.95),
                det(Box(20, 20, 30, 30), 1, 0.7),
                det(Box(40, 40, 50, 50), 2, 0.4),
            )
        )
        out = cs.hard_select(dets, 0.8)
        assert len(out) == 1 and out.detections[0].score == 0.95

    def test_threshold_validated(self):
        with pytest.raises(ConfigurationError):
            cs.hard_select(DetectionSet(()), 0.0)


class TestConfigValidation:
    def test_boost_below_one(self):
        with pytest.raises(ConfigurationError):
            cfg(boost=0.9)

    def test_penalty_above_one(self):
        with pytest.raises(ConfigurationError):
            cfg(penalty=1.2)

    def test_match_iou_range(self):
        with pytest.raises(ConfigurationError):
            cfg(match_iou=1.0)

    def test_per_category_floor(self):
        config = cfg(keep_threshold=0.5, keep_threshold_per_category=((1, 0.9),))
        assert config.floor_for(1) == 0.9
        assert config.floor_for(0) == 0.5
