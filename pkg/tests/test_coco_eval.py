import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabod.coco_eval import (
    IOU_THRESHOLDS,
    ApSummary,
    DetRecord,
    GroundTruth,
    average_precision,
    detection_line,
    iou,
    match_greedy,
    read_detections,
    read_ground_truth,
    summarize,
    write_detections,
)

from oracles import evaluate_brute, match_brute


def gt(image, box, cls):
    return GroundTruth(image, tuple(float(v) for v in box), cls)


def det(image, box, cls, score):
    return DetRecord(image, tuple(float(v) for v in box), cls, score)


def random_instance(rng, images=3, classes=3, n_gt=4, n_det=6, spread=40.0):
    gts, dets = [], []
    for i in range(images):
        name = f"img{i}"
        for _ in range(n_gt):
            x1, y1 = rng.uniform(0, spread, 2)
            w, h = rng.uniform(2, 20, 2)
            gts.append(gt(name, (x1, y1, x1 + w, y1 + h), int(rng.integers(0, classes))))
        for _ in range(n_det):
            if rng.uniform() < 0.6 and gts:
                base = gts[int(rng.integers(0, len(gts)))]
                jitter = rng.uniform(-3, 3, 4)
                box = (
                    base.box[0] + jitter[0],
                    base.box[1] + jitter[1],
                    base.box[2] + jitter[2],
                    base.box[3] + jitter[3],
                )
                if box[2] <= box[0] or box[3] <= box[1]:
                    continue
                cls = base.class_id
            else:
                x1, y1 = rng.uniform(0, spread, 2)
                w, h = rng.uniform(2, 20, 2)
                box = (x1, y1, x1 + w, y1 + h)
                cls = int(rng.integers(0, classes))
            dets.append(det(name, box, cls, float(rng.uniform(0.05, 0.95))))
    return dets, gts


# --- iou ----------------------------------------------------------------------


def test_iou_identical_boxes():
    assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0


def test_iou_disjoint_boxes():
    assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0


def test_iou_forced_third():
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)


def test_iou_rejects_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        iou((0, 0, 0, 2), (0, 0, 1, 1))


def test_ground_truth_rejects_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        gt("a", (3, 0, 3, 2), 0)


# --- matching -------------------------------------------------------------------


def test_match_single_perfect_pair():
    g = [gt("a", (0, 0, 10, 10), 1)]
    d = [det("a", (0, 0, 10, 10), 1, 0.9)]
    result = match_greedy(d, g, 0.5)
    assert result.matched == (True,) and result.num_gt == 1


def test_match_two_dets_one_gt():
    g = [gt("a", (0, 0, 10, 10), 1)]
    d = [det("a", (0, 0, 10, 10), 1, 0.9), det("a", (0, 0, 10, 10), 1, 0.8)]
    result = match_greedy(d, g, 0.5)
    assert result.matched == (True, False)


def test_match_respects_class():
    g = [gt("a", (0, 0, 10, 10), 1)]
    d = [det("a", (0, 0, 10, 10), 2, 0.9)]
    assert match_greedy(d, g, 0.5).matched == (False,)


def test_match_prefers_highest_iou():
    g = [gt("a", (0, 0, 10, 10), 1), gt("a", (1, 1, 10, 10), 1)]
    d = [
        det("a", (1, 1, 10, 10), 1, 0.9),  # overlaps both; must take the exact g[1]
        det("a", (0, 0, 10, 6), 1, 0.8),  # only clears the bar against g[0]
    ]
    result = match_greedy(d, g, 0.5)
    assert result.matched == (True, True)


def test_match_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        dets, gts = random_instance(rng, images=1, n_gt=4, n_det=6)
        dets.sort(key=lambda d: -d.score)
        ours = match_greedy(dets, gts, 0.5).matched
        brute = tuple(match_brute(dets, gts, 0.5))
        assert ours == brute


# --- average precision ----------------------------------------------------------


def test_ap_perfect_detections():
    assert average_precision([True, True, True], 3) == 1.0


def test_ap_no_detections():
    assert average_precision([], 3) == 0.0


def test_ap_two_point_curve_hand_values():
    # TP then FP on one GT: full recall at precision 1 -> interpolated AP 1.0
    assert average_precision([True, False], 1) == pytest.approx(1.0)
    # FP then TP: every recall sample sees precision 0.5
    assert average_precision([False, True], 1) == pytest.approx(0.5)


@given(st.lists(st.booleans(), max_size=12), st.integers(min_value=0, max_value=8))
@settings(max_examples=200, deadline=None)
def test_ap_is_between_zero_and_one(flags, num_gt):
    assert 0.0 <= average_precision(flags, num_gt) <= 1.0


# --- summarize -------------------------------------------------------------------


def test_perfect_detections_score_one_everywhere():
    gts = [gt("a", (0, 0, 10, 10), 0), gt("a", (20, 20, 40, 45), 1), gt("b", (5, 5, 9, 9), 0)]
    dets = [det(g.image, g.box, g.class_id, 0.9) for g in gts]
    summary = summarize(dets, gts)
    assert summary.ap50 == 1.0
    assert summary.ap75 == 1.0
    assert summary.ap50_95 == 1.0


def test_empty_detections_score_zero():
    gts = [gt("a", (0, 0, 10, 10), 0)]
    summary = summarize([], gts)
    assert summary.ap50 == 0.0 and summary.ap50_95 == 0.0


def test_class_without_gt_is_excluded_from_mean():
    gts = [gt("a", (0, 0, 10, 10), 0)]
    dets = [det("a", (0, 0, 10, 10), 0, 0.9), det("a", (50, 50, 60, 60), 7, 0.95)]
    summary = summarize(dets, gts)
    assert set(summary.per_class) == {0}
    assert summary.ap50 == 1.0


def test_summary_matches_brute_force_evaluator():
    rng = np.random.default_rng(2)
    for _ in range(8):
        dets, gts = random_instance(rng, images=3, n_gt=2, n_det=4)
        summary = summarize(dets, gts)
        brute = evaluate_brute(dets, gts, IOU_THRESHOLDS)
        assert set(summary.per_class) == set(brute)
        for cls in brute:
            assert np.allclose(summary.per_class[cls], brute[cls], atol=1e-12)


def test_score_permutation_invariance():
    rng = np.random.default_rng(3)
    dets, gts = random_instance(rng, images=2, n_gt=3, n_det=5)
    base = summarize(dets, gts)
    for seed in range(3):
        perm = list(dets)
        np.random.default_rng(seed).shuffle(perm)
        other = summarize(perm, gts)
        assert other.to_json() == base.to_json()


def test_removing_a_false_positive_never_hurts():
    rng = np.random.default_rng(4)
    for _ in range(10):
        dets, gts = random_instance(rng, images=2, n_gt=2, n_det=5)
        base = summarize(dets, gts)
        # find one false positive at the loosest threshold and drop it
        for i, d in enumerate(dets):
            gg = [g for g in gts if g.image == d.image and g.class_id == d.class_id]
            from oracles import box_iou

            if all(box_iou(d.box, g.box) < 0.5 for g in gg):
                reduced = summarize(dets[:i] + dets[i + 1 :], gts)
                assert reduced.ap50 >= base.ap50 - 1e-12
                assert reduced.ap50_95 >= base.ap50_95 - 1e-12
                break


def test_ap_ladder_non_increasing_over_thresholds():
    rng = np.random.default_rng(5)
    for _ in range(20):
        dets, gts = random_instance(rng, images=2, n_gt=3, n_det=5)
        summary = summarize(dets, gts)
        for values in summary.per_class.values():
            assert all(a >= b - 1e-12 for a, b in zip(values, values[1:])), values


def test_ap5095_is_exact_mean_of_ladder():
    rng = np.random.default_rng(6)
    dets, gts = random_instance(rng)
    summary = summarize(dets, gts)
    count = len(summary.iou_thresholds)
    per_threshold = [
        sum(v[i] for v in summary.per_class.values()) / len(summary.per_class)
        for i in range(count)
    ]
    assert summary.ap50_95 == pytest.approx(float(np.mean(per_threshold)), abs=0)
    assert all(0.0 <= v <= 1.0 for v in per_threshold)


def test_all_summary_values_in_unit_interval():
    rng = np.random.default_rng(7)
    dets, gts = random_instance(rng)
    s = summarize(dets, gts)
    for v in (s.ap50, s.ap75, s.ap50_95, s.ap_small, s.ap_medium, s.ap_large):
        assert 0.0 <= v <= 1.0


def test_size_buckets_filter_both_sides():
    # one small (16 area) and one medium (50x50) object, each found perfectly
    gts = [gt("a", (0, 0, 4, 4), 0), gt("a", (10, 10, 60, 60), 0)]
    dets = [det("a", g.box, g.class_id, 0.9) for g in gts]
    summary = summarize(dets, gts)
    assert summary.ap_small == 1.0
    assert summary.ap_medium == 1.0
    # a medium-only miss cannot disturb the small bucket
    dets_small_only = [det("a", (0, 0, 4, 4), 0, 0.9)]
    reduced = summarize(dets_small_only, gts)
    assert reduced.ap_small == 1.0
    assert reduced.ap_medium == 0.0


def test_empty_bucket_scores_zero():
    gts = [gt("a", (0, 0, 4, 4), 0)]
    dets = [det("a", (0, 0, 4, 4), 0, 0.9)]
    summary = summarize(dets, gts)
    assert summary.ap_small == 1.0 and summary.ap_medium == 0.0 and summary.ap_large == 0.0


def test_max_dets_cap_applies_per_image():
    gts = [gt("a", (0, 0, 10, 10), 0)]
    clutter = [det("a", (30 + i, 30, 41 + i, 41), 0, 0.5 + i * 1e-4) for i in range(120)]
    hit = [det("a", (0, 0, 10, 10), 0, 0.01)]  # lowest score: capped away
    summary = summarize(clutter + hit, gts, max_dets=100)
    assert summary.ap50 == 0.0


def test_threads_env_does_not_change_results(monkeypatch):
    rng = np.random.default_rng(8)
    dets, gts = random_instance(rng)
    base = summarize(dets, gts)
    monkeypatch.setenv("COLLABOD_THREADS", "4")
    threaded = summarize(dets, gts)
    assert threaded.to_json() == base.to_json()


# --- jsonl io --------------------------------------------------------------------


def test_detection_line_has_six_decimal_boxes():
    line = detection_line(det("img", (1.23456789, 2, 3.000000049, 4), 1, 0.87654321))
    assert '"box": [1.234568, 2.0, 3.0, 4.0]' in line
    assert '"score": 0.876543' in line


def test_jsonl_round_trip(tmp_path):
    records = [
        det("a", (1.5, 2.5, 10.25, 20.125), 0, 0.75),
        det("b", (0.0, 0.0, 5.0, 5.0), 3, 0.5),
    ]
    path = tmp_path / "dets.jsonl"
    with open(path, "w") as f:
        write_detections(f, records)
    back = read_detections(str(path))
    assert back == records


def test_ground_truth_reader(tmp_path):
    path = tmp_path / "gt.jsonl"
    path.write_text('{"image": "a", "box": [0, 0, 4, 4], "class": 2}\n')
    records = read_ground_truth(str(path))
    assert records == [gt("a", (0, 0, 4, 4), 2)]


def test_reader_reports_bad_lines(tmp_path):
    path = tmp_path / "gt.jsonl"
    path.write_text('{"image": "a", "box": [0, 0, 4, 4]}\n')
    with pytest.raises(ValueError, match="gt.jsonl:1"):
        read_ground_truth(str(path))


def test_summary_serialization_shapes():
    gts = [gt("a", (0, 0, 10, 10), 0)]
    dets = [det("a", (0, 0, 10, 10), 0, 0.9)]
    summary = summarize(dets, gts)
    payload = summary.to_json()
    assert payload["AP50"] == 1.0
    assert len(payload["iou_thresholds"]) == 10
    assert isinstance(summary.to_text(), str)
    assert isinstance(summary, ApSummary)
