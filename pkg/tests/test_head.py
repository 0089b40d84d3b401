import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabod import head as H
from collabod import ops
from collabod.ops import ConvParams
from collabod.tensor import ShapeError, Tensor

from oracles import conv_loops, dfl_row, nms_brute


def u(rng, shape):
    return rng.uniform(-1.0, 1.0, shape).astype(np.float32)


# --- DFL decode --------------------------------------------------------------


def test_dfl_config_needs_two_bins():
    with pytest.raises(ValueError):
        H.DflConfig(1)


def test_dfl_one_hot_recovers_bin_index():
    r = H.DflConfig(8)
    logits = np.full((1, 32, 1, 1), -30.0, dtype=np.float32)
    for side in range(4):
        logits[0, side * 8 + 3, 0, 0] = 30.0
    out = H.dfl_decode(Tensor(logits), r).data
    assert np.abs(out - 3.0).max() <= 1e-4


def test_dfl_uniform_logits_give_midpoint():
    r = H.DflConfig(16)
    out = H.dfl_decode(Tensor(np.zeros((1, 64, 2, 2))), r).data
    assert np.abs(out - 7.5).max() <= 1e-4


def test_dfl_matches_expectation_oracle():
    rng = np.random.default_rng(0)
    r = H.DflConfig(16)
    logits = u(rng, (1, 64, 3, 2)) * 4
    out = H.dfl_decode(Tensor(logits), r).data
    for y in range(3):
        for x in range(2):
            expected = dfl_row(logits[0, :, y, x], 16)
            assert np.abs(out[0, :, y, x] - expected).max() <= 1e-5


def test_dfl_shift_invariance():
    rng = np.random.default_rng(1)
    r = H.DflConfig(4)
    logits = u(rng, (1, 16, 2, 2))
    shifted = logits.copy()
    shifted[0, 4:8] += np.float32(3.0)  # one full side shifted by a constant
    a = H.dfl_decode(Tensor(logits), r).data
    b = H.dfl_decode(Tensor(shifted), r).data
    assert np.abs(a - b).max() <= 1e-6


def test_dfl_channel_validation():
    r = H.DflConfig(4)
    with pytest.raises(ShapeError, match="4"):
        H.dfl_decode(Tensor(np.zeros((1, 10, 1, 1))), r)
    with pytest.raises(ShapeError, match="bins"):
        H.dfl_decode(Tensor(np.zeros((1, 8, 1, 1))), r)


@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_dfl_distances_stay_in_range(seed):
    rng = np.random.default_rng(seed)
    r = H.DflConfig(16)
    logits = rng.uniform(-40, 40, (1, 64, 2, 2)).astype(np.float32)
    out = H.dfl_decode(Tensor(logits), r).data
    assert (out >= 0.0).all() and (out <= 15.0).all()


# --- anchors & box recovery --------------------------------------------------


def grid(extents):
    return H.make_anchors(extents, {"xs": 4, "s": 8, "m": 16, "l": 32})


def test_make_anchors_single_cell():
    a = grid({"xs": (1, 1), "s": (1, 1), "m": (1, 1), "l": (1, 1)})
    assert np.array_equal(a.centers["xs"], [[0.5, 0.5]])


def test_make_anchors_2x2_order():
    a = grid({"xs": (2, 2), "s": (1, 1), "m": (1, 1), "l": (1, 1)})
    assert np.array_equal(
        a.centers["xs"], [[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]]
    )


def test_make_anchors_flatten_order_oracle():
    extents = {"xs": (16, 16), "s": (8, 8), "m": (4, 4), "l": (2, 2)}
    a = grid(extents)
    assert a.count == 340
    flat = a.flat_centers()
    row = 0
    for s in H.SCALES:
        hh, ww = extents[s]
        for y in range(hh):
            for x in range(ww):
                assert flat[row, 0] == x + 0.5 and flat[row, 1] == y + 0.5
                row += 1


def test_anchor_strides_must_increase():
    with pytest.raises(ShapeError, match="increasing"):
        H.make_anchors(
            {s: (2, 2) for s in H.SCALES}, {"xs": 8, "s": 4, "m": 16, "l": 32}
        )


def test_dist2bbox_zero_distances_degenerate_at_center():
    a = grid({"xs": (1, 1), "s": (1, 1), "m": (1, 1), "l": (1, 1)})
    boxes = H.dist2bbox(np.zeros((4, 4)), a)
    assert np.array_equal(boxes[0], [2.0, 2.0, 2.0, 2.0])  # (0.5, 0.5) * stride 4


def test_dist2bbox_forced_arithmetic():
    a = H.AnchorGrid(("xs",), {"xs": np.array([[10.0, 10.0]])}, {"xs": 1})
    boxes = H.dist2bbox(np.array([[2.0, 3.0, 4.0, 5.0]]), a)
    assert np.array_equal(boxes[0], [8.0, 7.0, 14.0, 15.0])


def test_dist2bbox_stride_scaling():
    a = H.AnchorGrid(("xs",), {"xs": np.array([[0.5, 0.5]])}, {"xs": 8})
    boxes = H.dist2bbox(np.array([[1.0, 1.0, 1.0, 1.0]]), a)
    assert np.array_equal(boxes[0], [-4.0, -4.0, 12.0, 12.0])


def test_dist2bbox_rejects_negative_distances():
    a = H.AnchorGrid(("xs",), {"xs": np.array([[0.5, 0.5]])}, {"xs": 1})
    with pytest.raises(ValueError, match="negative"):
        H.dist2bbox(np.array([[-0.1, 0.0, 0.0, 0.0]]), a)


@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_dist2bbox_corners_ordered(seed):
    rng = np.random.default_rng(seed)
    a = H.AnchorGrid(("xs",), {"xs": rng.uniform(0, 10, (5, 2))}, {"xs": 4})
    d = rng.uniform(0, 15, (5, 4))
    boxes = H.dist2bbox(d, a)
    assert (boxes[:, 2] >= boxes[:, 0]).all() and (boxes[:, 3] >= boxes[:, 1]).all()


# --- detail conv & re-parameterization ---------------------------------------


def test_central_diff_kernel_sums_to_zero():
    rng = np.random.default_rng(2)
    b = H.DetailBranch("central_diff", ops.rand_conv(rng, 3, 3, kernel=3))
    eff = b.effective_kernel()
    assert np.abs(eff.sum(axis=(2, 3))).max() <= 1e-6


def test_single_branch_merge_is_exact():
    rng = np.random.default_rng(3)
    conv = ops.rand_conv(rng, 3, 3, kernel=3)
    d = H.DetailConv(branches=(H.DetailBranch("standard", conv),))
    merged = H.reparameterize(d).merged
    assert np.array_equal(merged.kernel.data, conv.kernel.data)
    assert np.array_equal(merged.bias, conv.bias)


def test_negated_branch_pair_merges_to_bias():
    rng = np.random.default_rng(4)
    k = u(rng, (3, 2, 3, 3))
    b1 = np.array([0.5, -1.0, 2.0], dtype=np.float32)
    b2 = np.array([0.25, 0.5, -0.75], dtype=np.float32)
    d = H.DetailConv(
        branches=(
            H.DetailBranch("standard", ConvParams(Tensor(k), b1, padding=1)),
            H.DetailBranch("standard", ConvParams(Tensor(-k), b2, padding=1)),
        )
    )
    merged = H.reparameterize(d)
    assert np.all(merged.merged.kernel.data == 0.0)
    x = Tensor(u(rng, (1, 2, 4, 4)))
    out = H.detail_forward(x, merged).data
    expected = (b1 + b2)[None, :, None, None]
    assert np.abs(out - expected).max() <= 1e-6


def test_three_branch_equivalence_over_100_inputs():
    rng = np.random.default_rng(5)
    d = H.DetailConv(
        branches=(
            H.DetailBranch("standard", ops.rand_conv(rng, 4, 4, kernel=3)),
            H.DetailBranch("central_diff", ops.rand_conv(rng, 4, 4, kernel=3)),
            H.DetailBranch("standard", ops.rand_conv(rng, 4, 4, kernel=1)),
        )
    )
    merged = H.reparameterize(d)
    assert merged.merged.kernel_extent == (3, 3)  # 1x1 lifted into 3x3 support
    worst = 0.0
    for _ in range(100):
        x = Tensor(u(rng, (1, 4, 6, 6)))
        a = H.detail_forward(x, d).data
        b = H.detail_forward(x, merged).data
        worst = max(worst, float(np.abs(a - b).max()))
    assert worst <= 1e-5


def test_reparameterize_returns_new_record():
    rng = np.random.default_rng(6)
    d = H.make_detail_conv(rng, 3)
    merged = H.reparameterize(d)
    assert d.merged is None and merged.merged is not None
    assert merged.branches is d.branches


def test_incompatible_branch_geometry_errors():
    rng = np.random.default_rng(7)
    with pytest.raises(ShapeError, match="incompatible"):
        H.DetailConv(
            branches=(
                H.DetailBranch("standard", ops.rand_conv(rng, 3, 3, kernel=3)),
                H.DetailBranch("standard", ops.rand_conv(rng, 3, 4, kernel=3)),
            )
        )


def test_branch_kind_validated():
    rng = np.random.default_rng(8)
    with pytest.raises(ValueError, match="kind"):
        H.DetailBranch("fancy", ops.rand_conv(rng, 3, 3, kernel=3))


# --- forward & decode --------------------------------------------------------


def tiny_head(rng, bins=16, classes=4, hidden=8, c_in=6):
    return H.make_uda_head(rng, {s: c_in for s in H.SCALES}, hidden, classes, bins)


def tiny_features(rng, extents, c_in=6):
    return {s: Tensor(u(rng, (1, c_in, extents[s][0], extents[s][1]))) for s in H.SCALES}


def test_zero_box_scale_gives_uniform_expectation():
    rng = np.random.default_rng(9)
    p = tiny_head(rng)
    p = H.UdaHeadParams(
        shared_proj=p.shared_proj,
        detail_block=p.detail_block,
        box_head=p.box_head,
        cls_head=p.cls_head,
        box_scales={s: 0.0 for s in H.SCALES},
        dfl=p.dfl,
    )
    extents = {"xs": (4, 4), "s": (2, 2), "m": (2, 2), "l": (1, 1)}
    # strides just need to increase; extents may repeat at toy size
    anchors = H.make_anchors(extents, {"xs": 2, "s": 4, "m": 8, "l": 16})
    boxes, _ = H.uda_forward(tiny_features(rng, extents), p, anchors)
    centers = anchors.flat_centers()
    strides = anchors.flat_strides()[:, None]
    expected = np.concatenate(
        [centers[:, :1] - 7.5, centers[:, 1:] - 7.5, centers[:, :1] + 7.5, centers[:, 1:] + 7.5],
        axis=1,
    ) * strides
    assert np.abs(boxes - expected).max() <= 1e-4


def test_single_cell_maps_give_four_rows():
    rng = np.random.default_rng(10)
    p = tiny_head(rng)
    extents = {s: (1, 1) for s in H.SCALES}
    anchors = H.make_anchors(extents, {"xs": 4, "s": 8, "m": 16, "l": 32})
    boxes, scores = H.uda_forward(tiny_features(rng, extents), p, anchors)
    assert boxes.shape == (4, 4) and scores.shape == (4, p.num_classes)


def test_full_decode_matches_rowwise_oracle():
    rng = np.random.default_rng(11)
    p = tiny_head(rng)
    extents = {"xs": (16, 16), "s": (8, 8), "m": (4, 4), "l": (2, 2)}
    anchors = H.make_anchors(extents, {"xs": 4, "s": 8, "m": 16, "l": 32})
    features = tiny_features(rng, extents)
    boxes, scores = H.uda_forward(features, p, anchors)
    assert boxes.shape == (340, 4)

    maps = H.uda_scale_maps(features, p)
    row = 0
    centers = anchors.flat_centers()
    strides = anchors.flat_strides()
    for s in H.SCALES:
        p_map = maps[s][0].data
        hh, ww = p_map.shape[2], p_map.shape[3]
        for y in range(hh):
            for x in range(ww):
                logits = p_map[0, : 4 * p.dfl.bins, y, x]
                dists = dfl_row(logits, p.dfl.bins)
                cx, cy = centers[row]
                st_ = strides[row]
                expected = [
                    (cx - dists[0]) * st_,
                    (cy - dists[1]) * st_,
                    (cx + dists[2]) * st_,
                    (cy + dists[3]) * st_,
                ]
                assert np.abs(boxes[row] - expected).max() <= 1e-3
                cls_logits = p_map[0, 4 * p.dfl.bins :, y, x].astype(np.float64)
                expected_scores = 1.0 / (1.0 + np.exp(-cls_logits))
                assert np.abs(scores[row] - expected_scores).max() <= 1e-6
                row += 1
    assert row == 340


def test_missing_scale_errors():
    rng = np.random.default_rng(12)
    p = tiny_head(rng)
    extents = {s: (2, 2) for s in H.SCALES}
    anchors = H.make_anchors(extents, {"xs": 4, "s": 8, "m": 16, "l": 32})
    features = tiny_features(rng, extents)
    del features["m"]
    with pytest.raises(ShapeError, match="missing scale"):
        H.uda_forward(features, p, anchors)


def test_anchor_feature_mismatch_errors():
    rng = np.random.default_rng(13)
    p = tiny_head(rng)
    extents = {s: (2, 2) for s in H.SCALES}
    anchors = H.make_anchors({s: (3, 3) for s in H.SCALES}, {"xs": 4, "s": 8, "m": 16, "l": 32})
    with pytest.raises(ShapeError, match="anchors inconsistent"):
        H.uda_forward(tiny_features(rng, extents), p, anchors)


def test_row_order_stable_across_runs():
    rng = np.random.default_rng(14)
    p = tiny_head(rng)
    extents = {"xs": (4, 4), "s": (2, 2), "m": (2, 2), "l": (1, 1)}
    anchors = H.make_anchors(extents, {"xs": 2, "s": 4, "m": 8, "l": 16})
    features = tiny_features(rng, extents)
    b1, s1 = H.uda_forward(features, p, anchors)
    b2, s2 = H.uda_forward(features, p, anchors)
    assert np.array_equal(b1, b2) and np.array_equal(s1, s2)


# --- detections & NMS --------------------------------------------------------


def det(box, cls, score):
    return H.Detection(tuple(float(v) for v in box), cls, score)


def test_detection_invariants():
    with pytest.raises(ValueError):
        det((5, 0, 4, 1), 0, 0.5)
    with pytest.raises(ValueError):
        det((0, 0, 1, 1), 0, 1.0)


def test_nms_identical_boxes_same_class():
    kept = H.nms([det((0, 0, 10, 10), 1, 0.9), det((0, 0, 10, 10), 1, 0.8)], 0.5, 0.1)
    assert len(kept) == 1 and kept[0].score == pytest.approx(0.9)


def test_nms_identical_boxes_different_classes_survive():
    kept = H.nms([det((0, 0, 10, 10), 1, 0.9), det((0, 0, 10, 10), 2, 0.8)], 0.5, 0.1)
    assert len(kept) == 2


def test_nms_iou_exactly_at_threshold_is_retained():
    # IoU((0,0,2,2), (1,0,3,2)) = 1/3; threshold 1/3 keeps both ("above" only)
    kept = H.nms([det((0, 0, 2, 2), 0, 0.9), det((1, 0, 3, 2), 0, 0.8)], 1 / 3, 0.0)
    assert len(kept) == 2


def test_nms_sorted_descending_and_thresholded():
    rng = np.random.default_rng(15)
    dets = [
        det(np.sort(rng.uniform(0, 20, 2)).tolist() + [25, 25], int(rng.integers(0, 2)), float(rng.uniform(0.05, 0.95)))
        for _ in range(15)
    ]
    dets = [det((b.box[0], b.box[1], b.box[0] + 5, b.box[1] + 5), b.class_id, b.score) for b in dets]
    kept = H.nms(dets, 0.5, 0.3)
    assert all(k.score > 0.3 for k in kept)
    assert all(kept[i].score >= kept[i + 1].score for i in range(len(kept) - 1))


@given(st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    dets = []
    for _ in range(20):
        x1, y1 = rng.uniform(0, 30, 2)
        w, h = rng.uniform(1, 15, 2)
        dets.append(det((x1, y1, x1 + w, y1 + h), int(rng.integers(0, 3)), float(rng.uniform(0.05, 0.95))))
    a = H.nms(dets, 0.5, 0.2)
    b = nms_brute(dets, 0.5, 0.2)
    assert a == b


def test_detections_from_rows_order_and_threshold():
    boxes = np.array([[0, 0, 1, 1], [1, 1, 2, 2]], dtype=np.float32)
    scores = np.array([[0.9, 0.1], [0.3, 0.6]], dtype=np.float32)
    out = H.detections_from_rows(boxes, scores, score_threshold=0.25)
    assert [(d.class_id, round(d.score, 2)) for d in out] == [(0, 0.9), (0, 0.3), (1, 0.6)]


# --- complexity --------------------------------------------------------------


def test_head_complexity_scales_linearly_in_locations():
    rng = np.random.default_rng(16)
    p = tiny_head(rng)
    base = {"xs": (8, 8), "s": (4, 4), "m": (2, 2), "l": (1, 1)}
    doubled = {s: (h * 2, w * 2) for s, (h, w) in base.items()}
    r1 = H.head_complexity(p, base)
    r2 = H.head_complexity(p, doubled)
    for e1, e2 in zip(r1.entries, r2.entries):
        assert e2.macs == 4 * e1.macs
    for k in r1.memory:
        assert r2.memory[k] == 4 * r1.memory[k]


def test_head_complexity_shared_term_quadruples_with_hidden_width():
    rng = np.random.default_rng(17)
    extents = {"xs": (8, 8), "s": (4, 4), "m": (2, 2), "l": (1, 1)}
    t1 = H.head_complexity(tiny_head(np.random.default_rng(0), hidden=8), extents).term_totals()
    t2 = H.head_complexity(tiny_head(np.random.default_rng(0), hidden=16), extents).term_totals()
    assert t2["shared_block"] == 4 * t1["shared_block"]


def test_head_complexity_matches_loop_count_oracle():
    rng = np.random.default_rng(18)
    p = tiny_head(rng, bins=4, classes=3, hidden=4, c_in=5)
    extents = {"xs": (4, 4), "s": (2, 2), "m": (2, 2), "l": (1, 1)}
    report = H.head_complexity(p, extents)

    def loop_macs(conv, h, w):
        x = np.zeros((1, conv.in_channels, h, w), dtype=np.float32)
        _, macs = conv_loops(
            x, conv.kernel.data, conv.bias, conv.stride, conv.padding, conv.groups, count_macs=True
        )
        return macs

    expected = 0
    for s in H.SCALES:
        h, w = extents[s]
        expected += loop_macs(p.shared_proj[s], h, w)
        for b in p.detail_block.branches:
            expected += loop_macs(b.conv, h, w)
        for conv in p.box_head + p.cls_head:
            expected += loop_macs(conv, h, w)
    n_total = sum(h * w for h, w in extents.values())
    expected += n_total * 4 * p.dfl.bins
    assert report.total_macs == expected


def test_head_dominant_term_exceeds_rest_in_wide_regime():
    rng = np.random.default_rng(19)
    extents = {"xs": (8, 8), "s": (4, 4), "m": (2, 2), "l": (1, 1)}
    bins, classes = 4, 3
    hidden = 4 * max(bins, classes)
    p = H.make_uda_head(rng, {s: hidden for s in H.SCALES}, hidden, classes, bins)
    terms = H.head_complexity(p, extents).term_totals()
    assert terms["shared_block"] > terms["projection"] + terms["dfl"]


def test_head_parameter_footprint_shared_across_scales():
    def param_bytes(p):
        total = 0
        for proj in p.shared_proj.values():
            total += 4 * (proj.kernel.size + proj.bias.size)
        for b in p.detail_block.branches:
            total += 4 * (b.conv.kernel.size + b.conv.bias.size)
        for conv in p.box_head + p.cls_head:
            total += 4 * (conv.kernel.size + conv.bias.size)
        total += 4 * len(p.box_scales)
        return total

    def proj_and_scale_bytes(p):
        total = 4 * len(p.box_scales)
        for proj in p.shared_proj.values():
            total += 4 * (proj.kernel.size + proj.bias.size)
        return total

    four = H.make_uda_head(np.random.default_rng(0), {s: 6 for s in H.SCALES}, 8, 4)
    two = H.make_uda_head(np.random.default_rng(0), {"xs": 6, "s": 6}, 8, 4)
    assert param_bytes(four) - param_bytes(two) == proj_and_scale_bytes(four) - proj_and_scale_bytes(two)
