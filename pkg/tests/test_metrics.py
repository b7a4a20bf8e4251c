import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdgraph.errors import BoxError, EmptySetError, NoPositiveError
from hdgraph.metrics import (
    BoxRecord,
    RankedResult,
    average_precision_from_flags,
    detection_ap_recall,
    iou,
    map_and_cmc,
    match_detections,
    ranked_results,
    retrieval_ap,
)

from oracles import average_precision, map_cmc


def result(flags, qid=0):
    return RankedResult(qid, tuple(range(len(flags))), tuple(flags))


def det(box, score, frame=0):
    return BoxRecord(frame, box, score)


def gt(box, frame=0, identity=1):
    return BoxRecord(frame, box, identity=identity)


class TestIou:
    def test_identical(self):
        assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_half_overlap(self):
        assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)

    def test_invalid(self):
        with pytest.raises(BoxError):
            iou((0, 0, 0, 1), (0, 0, 1, 1))


class TestMatching:
    def test_exact(self):
        assert match_detections([det((0, 0, 2, 2), 0.9)], [gt((0, 0, 2, 2))]) == [0]

    def test_two_dets_one_gt(self):
        dets = [det((0, 0, 2, 2), 0.4), det((0, 0, 2, 2), 0.8)]
        assert match_detections(dets, [gt((0, 0, 2, 2))]) == [None, 0]

    def test_below_threshold(self):
        # IoU 0.4: det area 8 inside gt area 20
        d, g = (0, 0, 4, 2), (0, 0, 4, 5)
        assert iou(d, g) == pytest.approx(0.4)
        assert match_detections([det(d, 0.9)], [gt(g)]) == [None]

    def test_other_frame_never_matches(self):
        assert match_detections([det((0, 0, 2, 2), 0.9, frame=1)], [gt((0, 0, 2, 2))]) == [None]

    @settings(max_examples=50)
    @given(st.integers(0, 10**6))
    def test_gt_used_once(self, seed):
        rng = np.random.default_rng(seed)

        def box():
            x, y = rng.uniform(0, 10, 2)
            return (x, y, x + rng.uniform(1, 4), y + rng.uniform(1, 4))

        dets = [det(box(), rng.random(), int(rng.integers(2))) for _ in range(12)]
        gts = [gt(box(), int(rng.integers(2))) for _ in range(5)]
        m = [x for x in match_detections(dets, gts, 0.3) if x is not None]
        assert len(m) == len(set(m))


class TestDetectionAp:
    def test_crafted(self):
        ap = average_precision_from_flags([1, 0, 1], 2)
        assert ap == pytest.approx(1 * 0.5 + (2 / 3) * 0.5, abs=1e-9)

    def test_crafted_boxes(self):
        g1, g2 = (0, 0, 2, 2), (10, 10, 12, 12)
        dets = [det(g1, 0.9), det((5, 5, 6, 6), 0.8), det(g2, 0.7)]
        ap, rec = detection_ap_recall(dets, [gt(g1), gt(g2)])
        assert ap == pytest.approx(5 / 6, abs=1e-9)
        assert rec == 1.0

    def test_perfect(self):
        boxes = [(0, 0, 1, 1), (3, 3, 4, 4)]
        ap, rec = detection_ap_recall([det(b, 1.0) for b in boxes], [gt(b) for b in boxes])
        assert (ap, rec) == (1.0, 1.0)

    def test_none_matched(self):
        ap, rec = detection_ap_recall([det((0, 0, 1, 1), 0.5)], [gt((5, 5, 6, 6))])
        assert (ap, rec) == (0.0, 0.0)

    def test_no_gts(self):
        with pytest.raises(EmptySetError):
            detection_ap_recall([det((0, 0, 1, 1), 0.5)], [])

    @settings(max_examples=30)
    @given(st.integers(0, 10**6))
    def test_monotone_score_transform(self, seed):
        rng = np.random.default_rng(seed)
        boxes = [(float(i), 0.0, i + 1.0, 1.0) for i in range(8)]
        gts = [gt(b) for b in boxes[:5]]
        scores = rng.random(8)
        dets = [det(boxes[int(rng.integers(8))], s) for s in scores]
        warped = [det(d.box, float(d.score ** 3 * 0.5)) for d in dets]
        assert detection_ap_recall(dets, gts) == detection_ap_recall(warped, gts)


class TestRetrievalAp:
    @pytest.mark.parametrize("flags, expected", [
        ([1], 1.0),
        ([0, 1], 0.5),
        ([1, 0, 1], 5 / 6),
    ])
    def test_worked(self, flags, expected):
        assert retrieval_ap(result(flags)) == expected

    def test_no_positive(self):
        with pytest.raises(NoPositiveError):
            retrieval_ap(result([0, 0]))

    def test_map_example(self):
        m, cmc, excluded = map_and_cmc([result([1]), result([0, 1])])
        assert m == 0.75 and cmc[1] == 0.5 and excluded == 0

    def test_excluded_counted(self):
        m, _, excluded = map_and_cmc([result([1]), result([0, 0])])
        assert m == 1.0 and excluded == 1

    def test_all_invalid(self):
        with pytest.raises(EmptySetError):
            map_and_cmc([result([0])])

    def test_rank1_equals_map_single_item(self):
        res = [result([1]), result([1]), result([1])]
        m, cmc, _ = map_and_cmc(res, ks=(1,))
        assert m == cmc[1] == 1.0

    @settings(max_examples=50)
    @given(st.lists(st.booleans(), min_size=1, max_size=20).filter(any), st.randoms())
    def test_negatives_below_last_positive(self, flags, rnd):
        last = max(i for i, f in enumerate(flags) if f)
        tail = flags[last + 1:]
        rnd.shuffle(tail)
        assert retrieval_ap(result(flags)) == retrieval_ap(result(flags[:last + 1] + tail))

    @settings(max_examples=50)
    @given(st.lists(st.lists(st.booleans(), min_size=1, max_size=20), min_size=1, max_size=6))
    def test_matches_oracle(self, lists):
        if not any(any(f) for f in lists):
            return
        m, cmc, _ = map_and_cmc([result(f) for f in lists])
        m_ref, cmc_ref = map_cmc(lists)
        assert abs(m - m_ref) < 1e-12
        for k in cmc:
            assert abs(cmc[k] - cmc_ref[k]) < 1e-12
        for f in lists:
            if any(f):
                assert abs(retrieval_ap(result(f)) - average_precision(f)) < 1e-12


class TestRankedResults:
    def test_same_frame_excluded(self):
        res = ranked_results([7], [1], [100], [10, 11, 12], [1, 2, 1], [100, 101, 102],
                             [[0, 1, 2]], exclude_same_frame=True)
        assert res[0].gallery_ids == (11, 12)
        assert res[0].relevant == (False, True)

    def test_same_frame_kept(self):
        res = ranked_results([7], [1], [100], [10, 11], [1, 2], [100, 101], [[0, 1]],
                             exclude_same_frame=False)
        assert res[0].relevant == (True, False)
