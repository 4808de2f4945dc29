from fractions import Fraction

import numpy as np
import pytest

from dronefuse.detections import Annotation, BBox, Detection
from dronefuse.metrics import (
    ConfusionCounts,
    MatchingConfig,
    average_precision,
    containment_rate,
    evaluate,
    fdr,
    fnr,
    match_detections,
    mean_ap,
)

from oracles import ap_from_pr_points, evaluate_ref, greedy_match_ref, max_assignment_tp, random_eval_fixture


def det(box, conf, cls=0):
    return Detection(BBox(*box), conf, cls)


def gt(box, cls=0):
    return Annotation(BBox(*box), cls)


def to_objects(dets, gts):
    return (
        {k: [det(b, c, cls) for c, cls, b in v] for k, v in dets.items()},
        {k: [gt(b, cls) for cls, b in v] for k, v in gts.items()},
    )


class TestMatching:
    def test_exact_hit(self):
        b = (0.5, 0.5, 0.2, 0.2)
        m = match_detections([det(b, 0.9)], [gt(b)], 0.5)
        assert (m.counts.tp, m.counts.fp, m.counts.fn) == (1, 0, 0)

    def test_no_detections(self):
        m = match_detections([], [gt((0.5, 0.5, 0.1, 0.1))] * 3, 0.5)
        assert m.counts == ConfusionCounts(0, 0, 3)

    def test_crafted_three_two(self):
        g = [(0, (0.3, 0.5, 0.2, 0.2)), (0, (0.7, 0.5, 0.2, 0.2))]
        d = [(0.9, 0, (0.32, 0.5, 0.2, 0.2)), (0.8, 0, (0.31, 0.5, 0.2, 0.2)), (0.7, 0, (0.69, 0.5, 0.2, 0.2))]
        m = match_detections([det(b, c, k) for c, k, b in d], [gt(b, k) for k, b in g], 0.5)
        assert m.matches == greedy_match_ref(d, g, 0.5) == [0, None, 1]
        assert m.counts.tp == max_assignment_tp(d, g, 0.5) == 2

    def test_class_must_agree(self):
        b = (0.5, 0.5, 0.2, 0.2)
        m = match_detections([det(b, 0.9, 1)], [gt(b, 0)], 0.5)
        assert m.counts == ConfusionCounts(0, 1, 1)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_against_reference(self, seed):
        dets, gts = random_eval_fixture(np.random.default_rng(seed), max_images=1)
        d, g = dets["img00"], gts["img00"]
        m = match_detections([det(b, c, k) for c, k, b in d], [gt(b, k) for k, b in g], 0.5)
        assert m.matches == greedy_match_ref(d, g, 0.5)


class TestRates:
    def test_simple(self):
        assert fnr(ConfusionCounts(tp=1, fn=1)) == 0.5
        assert fdr(ConfusionCounts(tp=3, fp=0)) == 0.0

    def test_rational(self):
        assert Fraction(fnr(ConfusionCounts(tp=37, fn=63))) == Fraction(0.63)
        assert Fraction(63, 100) == Fraction(fnr(ConfusionCounts(tp=37, fn=63))).limit_denominator(1000)

    def test_zero_denominator(self):
        assert fnr(ConfusionCounts()) == 0.0 and fdr(ConfusionCounts()) == 0.0


class TestAP:
    def test_all_tp(self):
        assert average_precision([(0.9, True), (0.5, True)], 2) == 1.0

    def test_all_fp(self):
        assert average_precision([(0.9, False), (0.5, False)], 2) == 0.0

    def test_no_gt(self):
        assert average_precision([], 0) == 1.0
        assert average_precision([(0.5, False)], 0) == 0.0

    def test_five_mixed(self):
        scored = [(0.9, True), (0.8, False), (0.7, True), (0.6, False), (0.5, True)]
        assert average_precision(scored, 4) == pytest.approx(ap_from_pr_points(scored, 4), abs=1e-15)
        # hand: recall steps .25@1, .5@2/3, .75@3/5
        assert average_precision(scored, 4) == pytest.approx(0.25 * (1 + 2 / 3 + 3 / 5), abs=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_random(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 15))
        scored = [(float(rng.choice([0.2, 0.4, 0.6])), bool(rng.random() < 0.5)) for _ in range(n)]
        gt_count = sum(t for _, t in scored) + int(rng.integers(0, 3))
        assert average_precision(scored, gt_count) == pytest.approx(ap_from_pr_points(scored, gt_count), abs=1e-12)

    def test_mean_ap(self, rng):
        assert mean_ap([0.7]) == 0.7
        assert mean_ap({0: 0.4, 1: 0.6}) == 0.5
        v = rng.uniform(size=7)
        assert mean_ap(list(v)) == pytest.approx(sum(v) / 7, abs=1e-15)
        with pytest.raises(ValueError):
            mean_ap([])


class TestContainmentRate:
    def test_all_inside(self):
        g = [gt((0.5, 0.5, 0.4, 0.4))]
        d = [det((0.5, 0.5, 0.2, 0.2), 0.9)]
        assert containment_rate(d, g, match_detections(d, g, 0.2)) == 1.0

    def test_none_inside(self):
        g = [gt((0.5, 0.5, 0.2, 0.2))]
        d = [det((0.5, 0.5, 0.3, 0.3), 0.9)]
        assert containment_rate(d, g, match_detections(d, g, 0.2)) == 0.0

    def test_no_pairs(self):
        assert containment_rate([], [], match_detections([], [], 0.5)) == 0.0


class TestEvaluate:
    def test_perfect(self):
        gts = {"a": [gt((0.3, 0.3, 0.2, 0.2))], "b": [gt((0.6, 0.6, 0.1, 0.1))]}
        dets = {k: [Detection(a.bbox, 0.9)] for k, v in gts.items() for a in v}
        r = evaluate(dets, gts)
        assert r.map_at == {0.25: 1.0, 0.5: 1.0}
        assert (r.fnr, r.fdr) == (0.0, 0.0)

    def test_empty_predictions(self):
        r = evaluate({"a": []}, {"a": [gt((0.3, 0.3, 0.2, 0.2))]})
        assert r.fnr == 1.0 and r.map_at[0.5] == 0.0

    def test_missing_key_named(self):
        with pytest.raises(KeyError, match="frame7"):
            evaluate({}, {"frame7": []})

    def test_order_independent(self):
        dets, gts = to_objects(*random_eval_fixture(np.random.default_rng(3)))
        rev = dict(reversed(list(dets.items())))
        assert evaluate(dets, gts).lines() == evaluate(rev, gts).lines()

    @pytest.mark.parametrize("seed", range(10))
    def test_reference_evaluator(self, seed):
        raw_d, raw_g = random_eval_fixture(np.random.default_rng(100 + seed))
        dets, gts = to_objects(raw_d, raw_g)
        r = evaluate(dets, gts, (0.25, 0.5), MatchingConfig(0.5, 0.25))
        ref = evaluate_ref(raw_d, raw_g, (0.25, 0.5), 0.25, 0.5)
        assert (r.counts.tp, r.counts.fp, r.counts.fn) == (ref["tp"], ref["fp"], ref["fn"])
        for t in (0.25, 0.5):
            assert abs(r.map_at[t] - ref["map"][t]) <= 1e-12
        assert r.containment_rate == pytest.approx(ref["containment"], abs=1e-15)

    def test_lines_format(self):
        r = evaluate({"a": []}, {"a": []})
        assert r.lines()[:2] == ["map@0.25=1", "map@0.5=1"]
        assert r.to_dict()["counts"] == {"tp": 0, "fp": 0, "fn": 0}
