import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ccspnet.boxes import Box, Detection, Label
from ccspnet.detector import (
    AnchorSet,
    DetectionHead,
    Detector,
    assign_targets,
    decode_grid,
    encode_box,
    nms,
)
from ccspnet.errors import ConfigurationError, InputError

SINGLE = AnchorSet((((0.1, 0.1), (0.2, 0.2), (0.4, 0.4)),))


def test_head_grid_shape():
    head = DetectionHead([8], SINGLE, num_classes=3)
    out = head([torch.randn(1, 8, 8, 8)])
    assert out.scales[0].shape == (1, 8, 8, 3, 8)


def test_zero_logits_decode_to_cell_centers_and_priors():
    raw = torch.zeros(1, 8, 8, 3, 8, dtype=torch.float64)
    out = decode_grid(raw, SINGLE.tensor(0))
    assert torch.all(out[..., 4:] == 0.5)
    rows = torch.arange(8, dtype=torch.float64)
    assert torch.allclose(out[0, :, 0, 0, 1], (rows + 0.5) / 8)
    assert torch.allclose(out[0, 0, :, 0, 0], (rows + 0.5) / 8)
    for a, (w, h) in enumerate(SINGLE.priors[0]):
        assert torch.allclose(out[..., a, 2], torch.tensor(w, dtype=torch.float64))
        assert torch.allclose(out[..., a, 3], torch.tensor(h, dtype=torch.float64))


def test_decoded_centers_stay_in_their_cell():
    gen = torch.Generator().manual_seed(0)
    raw = torch.randn(4, 6, 5, 3, 8, generator=gen, dtype=torch.float64) * 8
    out = decode_grid(raw, SINGLE.tensor(0))
    col = torch.arange(5, dtype=torch.float64).view(1, 1, 5, 1)
    row = torch.arange(6, dtype=torch.float64).view(1, 6, 1, 1)
    assert torch.all((out[..., 0] * 5 >= col) & (out[..., 0] * 5 <= col + 1))
    assert torch.all((out[..., 1] * 6 >= row) & (out[..., 1] * 6 <= row + 1))
    assert torch.all(out[..., 2:4] > 0)
    assert torch.all((out[..., 4:] >= 0) & (out[..., 4:] <= 1))


def test_head_channel_mismatch():
    head = DetectionHead([8], SINGLE, num_classes=3)
    with pytest.raises(ConfigurationError):
        head([torch.randn(1, 4, 8, 8)])


def test_assign_center_cell_and_best_anchor():
    t = assign_targets([Label(2, Box(0.5, 0.5, 0.2, 0.2))], SINGLE, [(8, 8)], 3)
    assert t.obj[0].sum() == 1
    assert t.obj[0][4, 4, 1] == 1
    assert torch.equal(t.cls[0][4, 4, 1], torch.tensor([0.0, 0.0, 1.0]))
    assert torch.allclose(t.box[0][4, 4, 1], torch.tensor([0.5, 0.5, 0.2, 0.2]))


def test_assign_empty_labels():
    t = assign_targets([], AnchorSet(), [(8, 8), (4, 4), (2, 2)], 3)
    assert all(o.sum() == 0 for o in t.obj)
    assert all(torch.all(n == 1) for n in t.noobj)


def test_degenerate_box_rejected():
    with pytest.raises(InputError):
        Box(0.5, 0.5, 0.0, 0.1)


def test_assign_tie_prefers_smaller_scale_then_anchor():
    anchors = AnchorSet((((0.2, 0.2), (0.2, 0.2)), ((0.2, 0.2), (0.2, 0.2))))
    t = assign_targets([Label(0, Box(0.3, 0.3, 0.2, 0.2))], anchors, [(4, 4), (2, 2)], 1)
    assert t.obj[0][1, 1, 0] == 1 and t.count() == 1


def test_assign_collision_falls_back_to_next_slot():
    labels = [Label(0, Box(0.5, 0.5, 0.2, 0.2)), Label(1, Box(0.51, 0.51, 0.2, 0.2))]
    t = assign_targets(labels, SINGLE, [(8, 8)], 3)
    assert t.count() == 2
    assert t.obj[0][4, 4].tolist() == [1.0, 1.0, 0.0]


def test_assignment_completeness_and_complementarity(rng):
    anchors = AnchorSet()
    grids = Detector.grid_sizes(64, 64)
    for _ in range(50):
        n = int(rng.integers(0, 8))
        labels = [
            Label(int(rng.integers(0, 3)), Box(*rng.uniform(0.05, 0.95, 2), *rng.uniform(0.05, 0.6, 2)))
            for _ in range(n)
        ]
        t = assign_targets(labels, anchors, grids, 3)
        assert t.count() == n
        for o, no in zip(t.obj, t.noobj):
            assert torch.all(o + no == 1)


def test_encode_decode_round_trip(rng):
    anchors = AnchorSet()
    grids = Detector.grid_sizes(64, 64)
    for _ in range(100):
        box = Box(*rng.uniform(0.0, 1.0, 2), *rng.uniform(0.08, 0.9, 2))
        t = assign_targets([Label(0, box)], anchors, grids, 3, dtype=torch.float64)
        s, (row, col, a) = next((s, tuple(torch.nonzero(o)[0].tolist())) for s, o in enumerate(t.obj) if o.sum())
        r, c, raw = encode_box(box, anchors.priors[s][a], grids[s])
        assert (r, c) == (row, col)
        grid = torch.zeros(1, *grids[s], anchors.per_scale, 8, dtype=torch.float64)
        grid[0, row, col, a, :4] = torch.from_numpy(raw)
        decoded = decode_grid(grid, anchors.tensor(s))[0, row, col, a, :4].numpy()
        assert np.abs(decoded - np.array([box.cx, box.cy, box.w, box.h])).max() < 1e-6


def _det(x1, y1, x2, y2, cls, conf):
    return Detection(Box.from_xyxy(x1, y1, x2, y2), cls, conf)


def test_nms_full_overlap_same_class():
    out = nms([_det(0, 0, 0.5, 0.5, 0, 0.8), _det(0, 0, 0.5, 0.5, 0, 0.9)], 0.5, 0.0)
    assert [d.confidence for d in out] == [0.9]


def test_nms_is_per_class():
    out = nms([_det(0, 0, 0.5, 0.5, 0, 0.9), _det(0, 0, 0.5, 0.5, 1, 0.8)], 0.5, 0.0)
    assert len(out) == 2


def test_nms_keeps_boxes_at_one_third_iou():
    out = nms([_det(0, 0, 0.5, 0.5, 0, 0.9), _det(0.25, 0, 0.75, 0.5, 0, 0.8)], 0.5, 0.0)
    assert len(out) == 2


def test_nms_conf_threshold_and_stable_order():
    dets = [_det(0, 0, 0.1, 0.1, 0, 0.5), _det(0.5, 0.5, 0.6, 0.6, 0, 0.5), _det(0.2, 0.2, 0.3, 0.3, 0, 0.1)]
    out = nms(dets, 0.5, 0.25)
    assert out == dets[:2]
    assert nms([], 0.5, 0.25) == []


box_st = st.builds(
    lambda cx, cy, w, h: Box(cx, cy, w, h),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0.01, 0.5),
    st.floats(0.01, 0.5),
)
det_st = st.builds(Detection, box_st, st.integers(0, 2), st.floats(0, 1))


@settings(max_examples=100, deadline=None)
@given(st.lists(det_st, max_size=25), st.floats(0, 1), st.floats(0, 1))
def test_nms_idempotent_and_sorted(dets, iou_thr, conf_thr):
    once = nms(dets, iou_thr, conf_thr)
    assert nms(once, iou_thr, conf_thr) == once
    confs = [d.confidence for d in once]
    assert confs == sorted(confs, reverse=True)


def test_detector_end_to_end_shapes():
    model = Detector()
    out = model(torch.rand(2, 3, 64, 64))
    assert [tuple(s.shape) for s in out] == [(2, 8, 8, 3, 8), (2, 4, 4, 3, 8), (2, 2, 2, 3, 8)]
