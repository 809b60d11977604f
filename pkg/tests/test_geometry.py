import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from occdet.geometry import (
    IGNORED, NEGATIVE, AnchorSet, Box, DegenerateBoxError, GTObject, MatchAssignment,
    build_aggregation_groups, decode_box, decode_boxes, densify_small_anchors, encode_box,
    encode_boxes, generate_anchors, intersection, iou, iou_matrix, match_anchors,
    occlusion_fraction,
)


coord = st.floats(-500, 500, allow_nan=False)
size = st.floats(0.5, 300, allow_nan=False)


@st.composite
def boxes(draw):
    return Box.from_xywh(draw(coord), draw(coord), draw(size), draw(size))


class TestBox:
    def test_rejects_inverted(self):
        with pytest.raises(ValueError):
            Box(10, 0, 5, 5)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Box(0, 0, float("nan"), 1)

    def test_zero_area_allowed(self):
        assert Box(1, 1, 1, 5).area == 0

    def test_xywh_round_trip(self):
        b = Box.from_xywh(3, 4, 10, 20)
        assert b.to_xywh() == [3, 4, 10, 20]
        assert b.center == (8, 14)


class TestIoU:
    def test_hand_value(self):
        # inter 50, union 150
        assert iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_disjoint_and_touching(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0
        assert iou(Box(0, 0, 1, 1), Box(1, 0, 2, 1)) == 0.0
        assert intersection(Box(0, 0, 1, 1), Box(1, 0, 2, 1)) is None

    def test_degenerate_union_is_zero(self):
        assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou(b, a))

    @given(boxes())
    def test_self_iou_is_one(self, a):
        assert iou(a, a) == pytest.approx(1.0)

    @given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
    def test_matrix_matches_scalar(self, xs, ys):
        mat = iou_matrix(np.array([b.as_array() for b in xs]), np.array([b.as_array() for b in ys]))
        ref = np.array([[iou(a, b) for b in ys] for a in xs])
        np.testing.assert_allclose(mat, ref, rtol=1e-12, atol=1e-15)


class TestOcclusionFraction:
    def test_hand_value(self):
        assert occlusion_fraction(Box(0, 0, 10, 10), Box(0, 0, 10, 6)) == pytest.approx(0.6)

    def test_zero_area_part_raises(self):
        with pytest.raises(DegenerateBoxError):
            occlusion_fraction(Box(0, 0, 0, 10), Box(0, 0, 10, 10))

    @given(boxes(), boxes())
    def test_in_unit_interval(self, part, vis):
        assert 0.0 <= occlusion_fraction(part, vis) <= 1.0 + 1e-12


class TestEncoding:
    def test_shift_by_one_width(self):
        a = Box(0, 0, 10, 20)
        d = encode_box(a, Box(10, 0, 20, 20))
        assert (d.tx, d.ty, d.tw, d.th) == (1.0, 0.0, 0.0, 0.0)

    def test_log_scale(self):
        d = encode_box(Box(0, 0, 10, 10), Box(-5, -5, 15, 15))
        assert d.tw == pytest.approx(math.log(2))
        assert d.tx == pytest.approx(0.0)

    def test_degenerate_anchor(self):
        with pytest.raises(DegenerateBoxError):
            encode_box(Box(0, 0, 0, 10), Box(0, 0, 1, 1))

    @given(boxes(), boxes())
    def test_round_trip(self, anchor, gt):
        back = decode_box(anchor, encode_box(anchor, gt))
        np.testing.assert_allclose(back.as_array(), gt.as_array(), rtol=1e-9, atol=1e-9)

    def test_vector_form_agrees(self):
        rng = np.random.default_rng(3)
        a = np.column_stack([rng.uniform(0, 50, 20), rng.uniform(0, 50, 20)])
        a = np.column_stack([a, a + rng.uniform(1, 40, (20, 2))])
        g = np.column_stack([rng.uniform(0, 50, 20), rng.uniform(0, 50, 20)])
        g = np.column_stack([g, g + rng.uniform(1, 40, (20, 2))])
        enc = encode_boxes(a, g)
        ref = np.array([encode_box(Box(*x), Box(*y)).as_array() for x, y in zip(a, g)])
        np.testing.assert_allclose(enc, ref, rtol=1e-12)
        np.testing.assert_allclose(decode_boxes(a, enc), g, rtol=1e-10)


class TestAnchors:
    def test_layout_and_order(self):
        a = generate_anchors((32, 16), 16, (20, 40), aspect_ratio=0.5)
        assert len(a) == 2 * 1 * 2
        # first cell centre (8, 8), scales in order
        np.testing.assert_allclose(a.anchors[0], [3, -2, 13, 18])
        np.testing.assert_allclose(a.anchors[1], [-2, -12, 18, 28])
        # second cell shifts by one stride in x
        np.testing.assert_allclose(a.anchors[2] - a.anchors[0], [16, 0, 16, 0])

    def test_aspect_is_width_over_height(self):
        a = generate_anchors((16, 16), 16, (100,))
        w, h = a.anchors[0, 2] - a.anchors[0, 0], a.anchors[0, 3] - a.anchors[0, 1]
        assert h == pytest.approx(100) and w / h == pytest.approx(0.41)

    def test_non_tiling_stride_rejected(self):
        with pytest.raises(ValueError):
            generate_anchors((30, 16), 16, (20,))

    def test_read_only(self):
        a = generate_anchors((16, 16), 16, (20,))
        with pytest.raises(ValueError):
            a.anchors[0, 0] = 1.0


class TestDensify:
    def test_tall_anchor_unchanged(self):
        a = AnchorSet(np.array([[0.0, 0.0, 49.2, 120.0]]), 16)
        out = densify_small_anchors(a, 100, 2)
        np.testing.assert_array_equal(out.anchors, a.anchors)

    def test_short_anchor_four_copies(self):
        a = AnchorSet(np.array([[0.0, 0.0, 32.8, 80.0]]), 16)
        out = densify_small_anchors(a, 100, 2)
        assert len(out) == 4
        centres = np.column_stack([(out.anchors[:, 0] + out.anchors[:, 2]) / 2,
                                   (out.anchors[:, 1] + out.anchors[:, 3]) / 2])
        np.testing.assert_allclose(centres - [16.4, 40.0], [[-4, -4], [4, -4], [-4, 4], [4, 4]])

    def test_order_preserved(self):
        a = AnchorSet(np.array([[0, 0, 10, 120.0], [0, 0, 10, 50.0], [5, 0, 15, 130.0]]), 8)
        out = densify_small_anchors(a, 100, 3)
        assert len(out) == 1 + 9 + 1
        np.testing.assert_array_equal(out.anchors[0], a.anchors[0])
        np.testing.assert_array_equal(out.anchors[-1], a.anchors[2])

    def test_factor_one_is_identity(self):
        a = generate_anchors((32, 32), 16, (40, 120))
        np.testing.assert_array_equal(densify_small_anchors(a, 100, 1).anchors, a.anchors)


def _gt(x0, y0, x1, y1, ignore=False):
    b = Box(x0, y0, x1, y1)
    return GTObject(b, b, ignore)


class TestMatching:
    def test_positive_with_target(self):
        a = AnchorSet(np.array([[0, 0, 10, 10.0]]), 16)
        g = _gt(0, 0, 10, 11)          # IoU 10/11
        m = match_anchors(a, [g])
        assert m.labels[0] == 0
        np.testing.assert_allclose(m.targets[0], encode_box(Box(0, 0, 10, 10), g.full).as_array())

    def test_negative(self):
        a = AnchorSet(np.array([[0, 0, 10, 10.0], [100, 100, 110, 110.0]]), 16)
        m = match_anchors(a, [_gt(0, 0, 10, 10)])
        assert m.labels[1] == NEGATIVE
        assert np.isnan(m.targets[1]).all()

    def test_best_match_rule(self):
        # IoU 0.4 only: still positive through the best-anchor rule
        a = AnchorSet(np.array([[0, 0, 10, 10.0], [50, 50, 60, 60.0]]), 16)
        m = match_anchors(a, [_gt(0, 0, 10, 25)])
        assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 25)) == pytest.approx(0.4)
        assert m.labels[0] == 0

    def test_in_between_is_ignored(self):
        a = AnchorSet(np.array([[0, 0, 10, 10.0], [0, 0, 10, 10.5]]), 16)
        # second anchor takes the best-match slot; the first sits at IoU 0.4
        m = match_anchors(a, [_gt(0, 0, 10, 25)])
        assert m.labels[0] == IGNORED

    def test_ignore_region_blocks_negatives(self):
        a = AnchorSet(np.array([[0, 0, 10, 10.0]]), 16)
        m = match_anchors(a, [_gt(0, 0, 10, 10, ignore=True)])
        assert m.labels[0] == IGNORED
        assert not m.positive.any()


def _assignment(labels, num_gts):
    labels = np.asarray(labels)
    targets = np.full((len(labels), 4), np.nan)
    pos = labels >= 0
    targets[pos] = np.arange(pos.sum() * 4, dtype=float).reshape(-1, 4)
    return MatchAssignment(labels, targets, num_gts)


class TestGroups:
    def test_singletons_give_no_groups(self):
        g = build_aggregation_groups(_assignment([0, 1, 2, -1], 3))
        assert g.rho == 0 and len(g) == 0

    def test_three_one_two(self):
        m = _assignment([0, 0, 1, 0, 2, 2, -1, -2], 3)
        g = build_aggregation_groups(m)
        assert g.rho == 2
        assert sorted(len(x.members) for x in g) == [2, 3]
        first = next(x for x in g if x.gt_index == 0)
        assert first.members == (0, 1, 3)
        np.testing.assert_allclose(first.target, m.targets[[0, 1, 3]].mean(axis=0))

    @given(st.lists(st.integers(-2, 4), min_size=0, max_size=30))
    def test_groups_partition_multi_anchor_positives(self, labels):
        g = build_aggregation_groups(_assignment(labels, 5))
        counts = np.bincount([x for x in labels if x >= 0], minlength=5)
        assert g.rho == int((counts >= 2).sum())
        members = [j for x in g for j in x.members]
        assert len(members) == len(set(members))
        assert all(labels[j] == x.gt_index for x in g for j in x.members)
