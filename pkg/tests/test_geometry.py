import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrpn import geometry as G
from oracles import naive_nms, random_boxes, raster_iou


coord = st.floats(min_value=-50, max_value=150, allow_nan=False)


@st.composite
def boxes(draw):
    return G.Box.make(draw(coord), draw(coord), draw(coord), draw(coord))


class TestIoU:
    def test_identity(self):
        assert G.iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert G.iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0

    def test_partial_overlap(self):
        # intersection 5x5 = 25, union 100 + 100 - 25 = 175
        assert G.iou((0, 0, 10, 10), (5, 5, 15, 15)) == pytest.approx(25 / 175, abs=1e-15)

    def test_zero_area(self):
        assert G.iou((3, 3, 3, 3), (3, 3, 3, 3)) == 0.0
        assert G.iou((0, 0, 0, 10), (0, 0, 10, 10)) == 0.0

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = G.iou(a, b)
        assert v == G.iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes())
    def test_self_iou(self, a):
        if a.area > 0:
            assert G.iou(a, a) == 1.0

    def test_matches_rasterization(self):
        rng = np.random.default_rng(0)
        a = random_boxes(rng, 500, hi=40, integer=True)
        b = random_boxes(rng, 500, hi=40, integer=True)
        for x, y in zip(a, b):
            assert G.iou(x, y) == raster_iou(x, y)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(1)
        a = random_boxes(rng, 30)
        b = random_boxes(rng, 20)
        m = G.iou_matrix(a, b)
        assert m.shape == (30, 20)
        for i in range(30):
            for j in range(20):
                assert m[i, j] == G.iou(a[i], b[j])


class TestAnchors:
    def test_single_cell(self):
        a = G.generate_anchors(1, 1, 16, [32], [1.0])
        assert len(a) == 1
        anc = a[0]
        assert (anc.center_x, anc.center_y, anc.width, anc.height) == (8, 8, 32, 32)

    def test_count(self):
        assert len(G.generate_anchors(2, 2, 16, [8, 16, 32], [0.5, 1, 2])) == 36

    def test_shape_of_scale_ratio(self):
        a = G.generate_anchors(1, 1, 16, [16], [2.0])[0]
        assert a.height == pytest.approx(16 * math.sqrt(2), rel=1e-12)
        assert a.width == pytest.approx(16 / math.sqrt(2), rel=1e-12)
        assert a.width * a.height == pytest.approx(256, rel=1e-6)
        assert a.height / a.width == pytest.approx(2.0, rel=1e-6)

    def test_row_major_order(self):
        scales, ratios = [8, 16], [0.5, 1, 2]
        a = G.generate_anchors(3, 4, 8, scales, ratios)
        k = 0
        for i in range(3):
            for j in range(4):
                for s in scales:
                    for r in ratios:
                        anc = a[k]
                        assert anc.center_x == pytest.approx((j + 0.5) * 8)
                        assert anc.center_y == pytest.approx((i + 0.5) * 8)
                        assert anc.width * anc.height == pytest.approx(s * s, rel=1e-6)
                        assert anc.height / anc.width == pytest.approx(r, rel=1e-6)
                        k += 1

    def test_deterministic(self):
        a = G.generate_anchors(5, 7, 8, [16, 32], [0.5, 1, 2])
        b = G.generate_anchors(5, 7, 8, [16, 32], [0.5, 1, 2])
        assert a.boxes.tobytes() == b.boxes.tobytes()

    @pytest.mark.parametrize("kw", [dict(stride=0), dict(scales=[-1]), dict(ratios=[0]), dict(scales=[])])
    def test_rejects_bad_params(self, kw):
        args = dict(feature_h=2, feature_w=2, stride=8, scales=[16], ratios=[1])
        args.update(kw)
        with pytest.raises(ValueError):
            G.generate_anchors(**args)


class TestRegression:
    anchor = G.Anchor(8.0, 8.0, 32.0, 32.0, 0)

    def test_encode_identity(self):
        assert G.encode_regression(self.anchor, self.anchor.box()) == (0, 0, 0, 0)

    def test_encode_double_size(self):
        t = G.encode_regression(self.anchor, (-24, -24, 40, 40))
        assert t.tx == 0 and t.ty == 0
        assert t.tw == pytest.approx(math.log(2)) and t.th == pytest.approx(math.log(2))

    def test_decode_zero(self):
        assert G.decode_regression(self.anchor, (0, 0, 0, 0)) == self.anchor.box()

    def test_decode_shift(self):
        b = G.decode_regression(self.anchor, (1, 0, 0, 0))
        assert (0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2)) == (40, 8)

    def test_rejects_degenerate_gt(self):
        with pytest.raises(ValueError):
            G.encode_regression(self.anchor, (0, 0, 0, 10))

    def test_round_trip_random(self):
        rng = np.random.default_rng(3)
        anchors = random_boxes(rng, 1000, min_size=4)
        gts = random_boxes(rng, 1000, min_size=1)
        back = G.decode(anchors, G.encode(anchors, gts))
        scale = np.maximum(np.abs(gts), 1.0)
        assert np.max(np.abs(back - gts) / scale) < 1e-6


class TestClip:
    def test_inside(self):
        assert G.clip_box((1, 2, 3, 4), 128, 128) == (1, 2, 3, 4)

    def test_negative(self):
        assert G.clip_box((-5, -5, 10, 10), 128, 128) == (0, 0, 10, 10)

    def test_overflow(self):
        assert G.clip_box((120, 120, 140, 140), 128, 128) == (120, 120, 128, 128)


class TestNMS:
    def test_single(self):
        assert list(G.nms(np.array([[0, 0, 5, 5]]), np.array([0.3]), 0.5)) == [0]

    def test_empty(self):
        assert len(G.nms(np.zeros((0, 4)), np.zeros(0), 0.5)) == 0

    def test_duplicates(self):
        b = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
        assert list(G.nms(b, np.array([0.8, 0.9]), 0.5)) == [1]

    def test_tie_break_by_index(self):
        b = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [50, 50, 60, 60]], dtype=float)
        assert list(G.nms(b, np.array([0.5, 0.5, 0.5]), 0.5)) == [0, 2]

    def test_matches_naive(self):
        rng = np.random.default_rng(11)
        for trial in range(100):
            b = random_boxes(rng, 50)
            s = rng.random(50)
            if trial % 10 == 0:
                s = np.round(s, 1)  # force ties
            thr = rng.uniform(0.2, 0.8)
            max_out = int(rng.integers(1, 60))
            assert list(G.nms(b, s, thr, max_out)) == naive_nms(b, s, thr, max_out)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.floats(0.1, 0.9), st.integers(1, 40))
    def test_properties(self, seed, thr, max_out):
        rng = np.random.default_rng(seed)
        b = random_boxes(rng, 30)
        s = rng.random(30)
        keep = G.nms(b, s, thr, max_out)
        assert len(keep) <= max_out
        assert len(set(keep.tolist())) == len(keep)
        assert np.all(np.diff(s[keep]) <= 0)
        m = G.iou_matrix(b[keep], b[keep])
        np.fill_diagonal(m, 0)
        assert np.all(m <= thr)
