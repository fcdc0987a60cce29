import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_ap, brute_force_map

from ccspnet.boxes import Box, Detection, Label
from ccspnet.errors import InputError
from ccspnet.metrics import (
    MetricsReport,
    average_precision,
    count_parameters,
    evaluate,
    iou,
    match_detections,
)


def _box(x1, y1, x2, y2):
    return Box.from_xyxy(x1, y1, x2, y2)


def test_iou_examples():
    a, b = _box(0, 0, 2, 2), _box(1, 0, 3, 2)
    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, _box(5, 5, 6, 6)) == 0.0
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-12)


box_st = st.builds(
    lambda x, y, w, h: _box(x, y, x + w, y + h),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0.001, 1),
    st.floats(0.001, 1),
)


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert 0.0 <= iou(a, b) <= 1.0 + 1e-12
    assert iou(a, a) == pytest.approx(1.0, abs=1e-9)


def test_matching_examples():
    truth = [Label(0, _box(0, 0, 0.5, 0.5))]
    assert match_detections([Detection(_box(0, 0, 0.5, 0.5), 0, 0.9)], truth, 0.5) == [True]
    two = [Detection(_box(0, 0, 0.5, 0.5), 0, 0.4), Detection(_box(0, 0, 0.5, 0.5), 0, 0.9)]
    assert match_detections(two, truth, 0.5) == [False, True]
    third = [Detection(_box(0.25, 0, 0.75, 0.5), 0, 0.9)]
    assert match_detections(third, truth, 0.5) == [False]
    other_class = [Detection(_box(0, 0, 0.5, 0.5), 1, 0.9)]
    assert match_detections(other_class, truth, 0.5) == [False]


def test_ap_examples():
    assert average_precision([True], [0.9], 1) == 1.0
    assert average_precision([False, True], [0.9, 0.8], 1) == pytest.approx(0.5, abs=1e-12)
    assert average_precision([False, False], [0.9, 0.8], 2) == 0.0
    assert average_precision([False], [0.5], 0) == 0.0
    assert average_precision([], [], 0) == 1.0
    with pytest.raises(InputError):
        average_precision([], [], -1)


def test_ap_matches_brute_force_staircase(rng):
    for _ in range(1000):
        n = int(rng.integers(0, 21))
        truths = int(rng.integers(0, 11))
        flags = list(rng.random(n) < 0.5)
        # a class can't have more TPs than truths
        hits = 0
        for i, f in enumerate(flags):
            if f and hits < truths:
                hits += 1
            else:
                flags[i] = False
        confs = list(rng.integers(0, 5, n) / 4.0) if rng.random() < 0.3 else list(rng.random(n))
        assert abs(average_precision(flags, confs, truths) - brute_force_ap(flags, confs, truths)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.booleans(), st.floats(0, 1)), max_size=15),
    st.integers(0, 5),
    st.floats(0, 1),
)
def test_adding_a_true_positive_never_decreases_ap(pairs, spare, conf):
    hits = sum(f for f, _ in pairs)
    truths = hits + 1 + spare
    flags, confs = [f for f, _ in pairs], [c for _, c in pairs]
    before = average_precision(flags, confs, truths)
    after = average_precision(flags + [True], confs + [conf], truths)
    assert 0.0 <= before <= 1.0
    assert after >= before - 1e-12


def _random_instance(rng, images=10):
    preds, truths = [], []
    for _ in range(images):
        gts = []
        for _ in range(int(rng.integers(0, 4))):
            x, y = rng.uniform(0, 0.7, 2)
            w, h = rng.uniform(0.1, 0.3, 2)
            gts.append((x, y, x + w, y + h, int(rng.integers(0, 3))))
        dets = []
        for t in gts:
            for _ in range(int(rng.integers(0, 3))):
                j = rng.normal(0, 0.04, 4)
                x1, y1 = t[0] + j[0], t[1] + j[1]
                dets.append((x1, y1, max(t[2] + j[2], x1 + 0.01), max(t[3] + j[3], y1 + 0.01), t[4], float(rng.random())))
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(0, 0.8, 2)
            dets.append((x, y, x + 0.15, y + 0.15, int(rng.integers(0, 3)), float(rng.random())))
        preds.append(dets)
        truths.append(gts)
    return preds, truths


def _objects(preds, truths):
    p = [[Detection(_box(*d[:4]), d[4], d[5]) for d in dets] for dets in preds]
    t = [[Label(g[4], _box(*g[:4])) for g in gts] for gts in truths]
    return p, t


def test_map_matches_brute_force_and_threshold_monotonicity(rng):
    checked = 0
    for _ in range(200):
        preds, truths = _random_instance(rng)
        if not any(truths):
            continue
        report = evaluate(*_objects(preds, truths))
        assert abs(report.map50 - brute_force_map(preds, truths, 0.5)) < 1e-9
        assert abs(report.map75 - brute_force_map(preds, truths, 0.75)) < 1e-9
        assert report.map75 <= report.map50 + 1e-12
        checked += 1
    assert checked > 150


def test_oracle_and_silent_detectors():
    truths = [[Label(0, _box(0.1, 0.1, 0.3, 0.3)), Label(2, _box(0.5, 0.5, 0.9, 0.8))], [Label(1, _box(0, 0, 1, 1))]]
    perfect = [[Detection(t.box, t.class_id, 1.0) for t in gts] for gts in truths]
    r = evaluate(perfect, truths)
    assert (r.precision, r.recall, r.map50, r.map75) == (1.0, 1.0, 1.0, 1.0)
    assert set(r.per_class_ap) == {"0", "1", "2"}
    silent = evaluate([[], []], truths)
    assert (silent.recall, silent.map50, silent.map75) == (0.0, 0.0, 0.0)


def test_precision_recall_use_confidence_threshold():
    truths = [[Label(0, _box(0, 0, 0.5, 0.5))]]
    dets = [[Detection(_box(0, 0, 0.5, 0.5), 0, 0.1)]]
    r = evaluate(dets, truths)
    assert r.recall == 0.0 and r.map50 == 1.0


def test_classes_absent_from_truth_are_not_averaged():
    truths = [[Label(0, _box(0, 0, 0.5, 0.5))]]
    dets = [[Detection(_box(0, 0, 0.5, 0.5), 0, 0.9), Detection(_box(0.5, 0.5, 1, 1), 2, 0.9)]]
    r = evaluate(dets, truths)
    assert r.map50 == 1.0 and set(r.per_class_ap) == {"0"}


def test_evaluate_rejects_empty_dataset():
    with pytest.raises(InputError):
        evaluate([], [])


def test_count_parameters():
    conv = torch.nn.Conv2d(8, 8, 1)
    assert count_parameters(conv) == 72
    with torch.no_grad():
        conv.weight.fill_(3.0)
    assert count_parameters(conv) == 72
    assert count_parameters(torch.nn.Sequential()) == 0
    assert count_parameters(None) == 0


def test_report_json_round_trip(tmp_path):
    report = MetricsReport(0.5, 0.25, 0.75, 0.5, 12.5, 72, {"0": {"ap50": 0.75, "ap75": 0.5}})
    assert MetricsReport.from_json(report.to_json()) == report
    report.save(tmp_path / "m.json")
    assert MetricsReport.load(tmp_path / "m.json") == report
    keys = set(json.loads(report.to_json()))
    assert {"precision", "recall", "map50", "map75", "fps", "parameter_count", "per_class_ap"} <= keys
