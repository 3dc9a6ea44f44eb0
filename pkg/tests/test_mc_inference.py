"""Monte-Carlo averaging, consensus clustering, entropy bookkeeping."""

import math

import numpy as np
import pytest

from mcblock.errors import ConfigError
from mcblock.mc_inference import (
    McConfig,
    detection_entropy,
    mc_classify,
    mc_detect,
    merge_detections,
)
from mcblock.metrics import iou_xywh, nms
from mcblock.model import (
    Detection,
    classifier_hyper,
    decode,
    detector_forward,
    detector_hyper,
    init_classifier_params,
    init_detector_params,
)
from mcblock.rng import Rng
from mcblock.tensor import Tensor


def det(box, obj, probs, sigma=(0.1, 0.1, 0.1, 0.1)):
    return Detection(box, sigma, np.asarray(probs, np.float64), obj)


def random_image(seed=1):
    return Tensor(Rng(seed).uniform(size=(1, 3, 64, 64)).astype(np.float32))


class TestMcClassify:
    def test_method_none_equals_deterministic(self):
        from mcblock.model import classifier_forward

        params = init_classifier_params(Rng(0))
        img = random_image()
        probs, entropy = mc_classify(img, params, McConfig(method="none"), Rng(5))
        logits = classifier_forward(img, params, "disabled", None).data[0]
        z = logits.astype(np.float64)
        e = np.exp(z - z.max())
        np.testing.assert_array_equal(probs, e / e.sum())
        assert entropy == pytest.approx(-np.sum(probs * np.log(probs)))

    def test_two_sample_average(self):
        # hand case: samples [1,0] and [0,1] -> mean [0.5, 0.5], ln 2 entropy
        mean = np.array([0.5, 0.5])
        assert -float(np.sum(mean * np.log(mean))) == pytest.approx(math.log(2.0))

    def test_small_p_matches_disabled_within_tolerance(self):
        hyper = classifier_hyper(dropblock_p=1e-4)
        params = init_classifier_params(Rng(0), hyper)
        img = random_image()
        base, _ = mc_classify(img, params, McConfig(method="none"), Rng(0))
        mean, _ = mc_classify(img, params, McConfig(samples=1000), Rng(3))
        assert np.abs(mean - base).max() < 1e-3

    def test_probs_are_simplex(self):
        params = init_classifier_params(Rng(2))
        probs, entropy = mc_classify(random_image(), params, McConfig(samples=16), Rng(4))
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert 0.0 <= entropy <= math.log(3.0)

    def test_estimator_consistency_in_s(self):
        params = init_classifier_params(Rng(1))
        img = random_image(7)
        wins = 0
        for rep in range(5):
            rng = Rng(100 + rep)
            means = {
                s: mc_classify(img, params, McConfig(samples=s), rng)[0]
                for s in (10, 100, 1000)
            }
            gap_small = np.abs(means[10] - means[100]).sum()
            gap_big = np.abs(means[100] - means[1000]).sum()
            wins += gap_big < gap_small
        assert wins >= 4

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            McConfig(samples=0).validate()
        with pytest.raises(ConfigError):
            McConfig(merge_iou=1.0).validate()
        with pytest.raises(ConfigError):
            McConfig(method="bayes").validate()


class TestDetectionEntropy:
    def test_one_hot_is_zero(self):
        assert detection_entropy(det((0.5, 0.5, 0.1, 0.1), 1.0, [1.0, 0.0, 0.0])) == 0.0

    def test_uniform_twenty(self):
        d = det((0.5, 0.5, 0.1, 0.1), 1.0, [1 / 20.0] * 20)
        assert detection_entropy(d) == pytest.approx(math.log(20.0))

    def test_direct_evaluation(self):
        d = det((0.5, 0.5, 0.1, 0.1), 1.0, [0.7, 0.2, 0.1])
        expect = -(0.7 * math.log(0.7) + 0.2 * math.log(0.2) + 0.1 * math.log(0.1))
        assert detection_entropy(d) == pytest.approx(expect, abs=1e-9)
        assert expect == pytest.approx(0.8018, abs=1e-4)


class TestMergeDetections:
    def test_identical_boxes_across_samples(self):
        box = (0.4, 0.4, 0.2, 0.2)
        per_sample = [[det(box, 0.9, [0.8, 0.2])] for _ in range(8)]
        merged = merge_detections(per_sample, McConfig(samples=8))
        assert len(merged) == 1
        m = merged[0]
        assert m.support == 8
        assert m.objectness == pytest.approx(0.9)
        assert m.box == pytest.approx(box)
        assert m.epistemic_box_var == pytest.approx((0.0, 0.0, 0.0, 0.0))

    def test_hand_built_cluster_oracle(self):
        # two overlapping boxes plus a far outlier, three samples
        a0 = det((0.40, 0.40, 0.20, 0.20), 0.9, [0.9, 0.1])
        a1 = det((0.42, 0.40, 0.20, 0.20), 0.8, [0.7, 0.3])
        outlier = det((0.80, 0.80, 0.10, 0.10), 0.6, [0.5, 0.5])
        per_sample = [[a0], [a1, outlier], []]
        cfg = McConfig(samples=3, merge_iou=0.5, min_support_frac=0.3)
        merged = merge_detections(per_sample, cfg)
        # brute-force expectation: cluster {a0, a1} (IoU 0.82), outlier alone
        assert iou_xywh(a0.box, a1.box) >= 0.5
        clusters = {m.support: m for m in merged}
        big = clusters[2]
        np.testing.assert_allclose(
            big.box, np.mean([[0.40, 0.40, 0.20, 0.20], [0.42, 0.40, 0.20, 0.20]], 0)
        )
        np.testing.assert_allclose(
            big.epistemic_box_var,
            np.var([[0.40, 0.40, 0.20, 0.20], [0.42, 0.40, 0.20, 0.20]], 0),
        )
        np.testing.assert_allclose(big.class_probs, [0.8, 0.2])
        assert big.objectness == pytest.approx((0.9 + 0.8) / 3.0)
        lone = clusters[1]
        assert lone.objectness == pytest.approx(0.6 / 3.0)

    def test_one_vote_per_sample(self):
        # a sample with two members in one cluster contributes its best only
        strong = det((0.40, 0.40, 0.20, 0.20), 0.9, [1.0, 0.0])
        dup = det((0.41, 0.40, 0.20, 0.20), 0.5, [0.0, 1.0])
        per_sample = [[strong, dup], [strong]]
        merged = merge_detections(per_sample, McConfig(samples=2, merge_iou=0.5))
        assert len(merged) == 1
        m = merged[0]
        assert m.support == 2
        assert m.objectness <= 1.0
        assert m.objectness == pytest.approx(0.9)
        np.testing.assert_allclose(m.class_probs, [1.0, 0.0])

    def test_support_boundary_exact(self):
        box = (0.4, 0.4, 0.2, 0.2)
        cfg = McConfig(samples=10, min_support_frac=0.3)
        # support = ceil(0.3 * 10) = 3 retained, 2 dropped
        three = [[det(box, 0.9, [1, 0])]] * 3 + [[]] * 7
        two = [[det(box, 0.9, [1, 0])]] * 2 + [[]] * 8
        assert len(merge_detections(three, cfg)) == 1
        assert len(merge_detections(two, cfg)) == 0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        per_sample = []
        for _ in range(6):
            dets = [
                det(
                    (0.4 + rng.uniform(-0.02, 0.02), 0.4 + rng.uniform(-0.02, 0.02),
                     0.2, 0.2),
                    float(rng.uniform(0.5, 1.0)),
                    [0.6, 0.4],
                ),
                det((0.75, 0.75, 0.15, 0.15), float(rng.uniform(0.3, 0.9)), [0.2, 0.8]),
            ]
            per_sample.append(dets)
        cfg = McConfig(samples=6, merge_iou=0.5)
        a = merge_detections(per_sample, cfg)
        b = merge_detections([list(reversed(d)) for d in reversed(per_sample)], cfg)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert x.box == pytest.approx(y.box)
            assert x.objectness == pytest.approx(y.objectness)
            assert x.support == y.support

    def test_entropy_bounds_on_merged(self):
        rng = np.random.default_rng(1)
        per_sample = [
            [det((0.4, 0.4, 0.2, 0.2), 0.8, np.array(p) / sum(p))]
            for p in rng.uniform(0.05, 1.0, (5, 3))
        ]
        merged = merge_detections(per_sample, McConfig(samples=5))
        for m in merged:
            assert 0.0 <= m.entropy <= math.log(3.0) + 1e-12
            assert m.support <= 5


class TestMcDetect:
    def test_method_none_equals_decode_plus_nms(self):
        params = init_detector_params(Rng(0))
        img = random_image(3)
        got = mc_detect(img, params, McConfig(samples=1, method="none"), None,
                        conf_thresh=0.0, nms_iou=0.45)
        raw = detector_forward(img, params, "disabled", None)
        dets = decode(raw, params.hyper["anchors"], 0.0)
        entries = [(int(np.argmax(d.class_probs)), d.confidence, d.box, id(d))
                   for d in dets]
        kept = {e[3] for e in nms(entries, 0.45, class_aware=False)}
        expect = [d for d in dets if id(d) in kept]
        assert len(got) == len(expect)
        got_boxes = sorted(d.box for d in got)
        exp_boxes = sorted(d.box for d in expect)
        np.testing.assert_allclose(got_boxes, exp_boxes)
        assert all(d.epistemic_box_var == (0.0, 0.0, 0.0, 0.0) for d in got)
        assert all(d.support == 1 for d in got)

    def test_sequential_matches_threaded(self, monkeypatch):
        hyper = detector_hyper(dropblock_p=0.3)
        params = init_detector_params(Rng(0), hyper)
        img = random_image(5)
        cfg = McConfig(samples=8)
        seq = mc_detect(img, params, cfg, Rng(11), conf_thresh=0.05)
        monkeypatch.setenv("MCBLOCK_THREADS", "4")
        par = mc_detect(img, params, cfg, Rng(11), conf_thresh=0.05)
        assert len(seq) == len(par)
        for a, b in zip(seq, par):
            assert a.box == b.box and a.objectness == b.objectness

    def test_deterministic_given_seed(self):
        params = init_detector_params(Rng(0))
        img = random_image(6)
        cfg = McConfig(samples=5)
        a = mc_detect(img, params, cfg, Rng(3), conf_thresh=0.05)
        b = mc_detect(img, params, cfg, Rng(3), conf_thresh=0.05)
        assert [d.box for d in a] == [d.box for d in b]
