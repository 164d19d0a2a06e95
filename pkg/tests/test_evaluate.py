import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reefbench.core import CLASS_ORDER, Detection, ObjectAnnotation, ObjectClass, save_annotations
from reefbench.evaluate import (
    EvaluationError,
    average_precision,
    evaluate,
    evaluate_dataset,
    match,
    pr_curve,
    write_report,
)


def oracle_ap(dets, gts, thr):
    """Independent AP for one class: explicit matching, explicit envelope, 101 recall samples."""
    if not gts:
        return math.nan
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], dets[i][0], dets[i][1]))
    free = set(range(len(gts)))
    tp = []
    for i in order:
        x, y, _ = dets[i]
        cands = [(math.hypot(x - gts[j][0], y - gts[j][1]), j) for j in free]
        cands = [c for c in cands if c[0] <= thr]
        if cands:
            free.discard(min(cands)[1])
            tp.append(1)
        else:
            tp.append(0)
    points = []
    for k in range(1, len(tp) + 1):
        hits = sum(tp[:k])
        points.append((hits / len(gts), hits / k))
    total = 0.0
    for s in range(101):
        r = s / 100
        cands = [p for rec, p in points if rec >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 101


def dets_of(rows, cls="reef_cone"):
    return [Detection(cls, (x, y, 0.0), 0.0, s) for x, y, s in rows]


def gts_of(rows, cls="reef_cone"):
    return [ObjectAnnotation(cls, (x, y, 0.0)) for x, y in rows]


def test_tp_fp_tp_example():
    gts = gts_of([(0, 0), (5, 0)])
    dets = dets_of([(0.1, 0, 0.9), (20, 20, 0.8), (5.2, 0, 0.7)])
    rep = evaluate([dets], [gts])
    assert rep.ap("reef_cone") == pytest.approx(0.83498, abs=1e-5)
    assert rep.ap("reef_cone") == pytest.approx(oracle_ap([(0.1, 0, 0.9), (20, 20, 0.8), (5.2, 0, 0.7)], [(0, 0), (5, 0)], 0.5))


def test_pr_curve_values():
    ms = match(dets_of([(0.1, 0, 0.9), (20, 20, 0.8), (5.2, 0, 0.7)]), gts_of([(0, 0), (5, 0)]))
    pr = pr_curve(ms.per_class[ObjectClass.REEF_CONE])
    np.testing.assert_allclose(pr.recall, [0.5, 0.5, 1.0])
    np.testing.assert_allclose(pr.precision, [1.0, 0.5, 2 / 3])


def test_perfect_predictions_score_one():
    gts = [ObjectAnnotation(c, (i * 3.0, 1.0, 0.5)) for i, c in enumerate(CLASS_ORDER * 2)]
    dets = [Detection(g.cls, g.center, 0.0, 1.0) for g in gts]
    rep = evaluate([dets], [gts])
    assert rep.mAP == 1.0
    assert all(rep.ap(c) == 1.0 for c in CLASS_ORDER)


def test_empty_predictions_score_zero():
    rep = evaluate([[]], [gts_of([(0, 0)])])
    assert rep.ap("reef_cone") == 0.0
    assert rep.mAP == 0.0


def test_class_without_ground_truth_is_nan_and_excluded():
    rep = evaluate([dets_of([(0, 0, 0.9)]) + dets_of([(9, 9, 0.5)], "reef_ring")], [gts_of([(0, 0)])])
    assert math.isnan(rep.ap("reef_ring"))
    assert rep.mAP == 1.0
    assert rep.to_dict()["per_threshold"]["0.5"]["AP"]["reef_ring"] is None


def test_no_ground_truth_anywhere():
    rep = evaluate([[]], [[]])
    assert math.isnan(rep.mAP)
    assert "n/a" in rep.table()


def test_class_must_agree():
    rep = evaluate([dets_of([(0, 0, 0.9)], "reef_ring")], [gts_of([(0, 0)])])
    assert rep.ap("reef_cone") == 0.0


def test_distance_threshold_inclusive_and_2d():
    gts = gts_of([(0, 0)])
    assert evaluate([dets_of([(0.5, 0, 0.9)])], [gts]).mAP == 1.0
    assert evaluate([dets_of([(0.5001, 0, 0.9)])], [gts]).mAP == 0.0
    lifted = [Detection("reef_cone", (0, 0, 3.0), 0.0, 0.9)]
    assert evaluate([lifted], [gts]).mAP == 1.0
    assert evaluate([lifted], [gts], distance_3d=True).mAP == 0.0


def test_each_ground_truth_matched_once():
    ms = match(dets_of([(0, 0, 0.9), (0.1, 0, 0.8)]), gts_of([(0, 0)]))
    assert ms.per_class[ObjectClass.REEF_CONE].matched_gt == [0, None]


def test_multi_threshold():
    gts = gts_of([(0, 0), (10, 0)])
    dets = dets_of([(0.2, 0, 0.9), (11.5, 0, 0.8)])
    rep = evaluate([dets], [gts], thresholds=[0.5, 1.0, 2.0, 4.0], multi_threshold=True)
    assert rep.map[0.5] == pytest.approx(oracle_ap([(0.2, 0, 0.9), (11.5, 0, 0.8)], [(0, 0), (10, 0)], 0.5))
    assert rep.map[2.0] == 1.0 and rep.map[4.0] == 1.0
    assert rep.mAP == pytest.approx(np.mean([rep.map[t] for t in (0.5, 1.0, 2.0, 4.0)]))


def test_scene_pooling_keeps_scenes_apart():
    # a detection cannot match ground truth from another scene
    rep = evaluate([dets_of([(0, 0, 0.9)]), []], [[], gts_of([(0, 0)])])
    assert rep.mAP == 0.0


def test_mismatched_scene_counts():
    with pytest.raises(EvaluationError):
        evaluate([[]], [[], []])


pts = st.tuples(st.integers(0, 6), st.integers(0, 3))


@settings(max_examples=200, deadline=None)
@given(
    gts=st.lists(pts, max_size=4),
    dets=st.lists(st.tuples(st.integers(0, 6), st.integers(0, 3), st.integers(1, 50)), max_size=6),
    thr=st.sampled_from([0.5, 1.0, 2.0]),
)
def test_ap_matches_oracle(gts, dets, thr):
    d = [(x * 0.7, y * 0.7, s / 50) for x, y, s in dets]
    g = [(x * 0.7, y * 0.7) for x, y in gts]
    ap = evaluate([dets_of(d)], [gts_of(g)], thresholds=[thr]).ap("reef_cone", thr)
    want = oracle_ap(d, g, thr)
    if math.isnan(want):
        assert math.isnan(ap)
    else:
        assert ap == pytest.approx(want, abs=1e-12)
        assert 0.0 <= ap <= 1.0


@settings(max_examples=100, deadline=None)
@given(
    gts=st.lists(pts, min_size=1, max_size=4),
    dets=st.lists(st.tuples(st.integers(0, 6), st.integers(0, 3), st.integers(1, 50)), max_size=6),
)
def test_ap_invariant_under_monotone_score_map(gts, dets):
    d = [(x * 0.7, y * 0.7, s / 50) for x, y, s in dets]
    g = gts_of([(x * 0.7, y * 0.7) for x, y in gts])
    squashed = [(x, y, s**3 * 0.5) for x, y, s in d]
    assert evaluate([dets_of(d)], [g]).mAP == evaluate([dets_of(squashed)], [g]).mAP


def test_dataset_roundtrip_and_missing_scene(tmp_path):
    gt_dir, pred_dir = tmp_path / "gt", tmp_path / "pred"
    gt_dir.mkdir()
    pred_dir.mkdir()
    for i in range(3):
        save_annotations(gts_of([(i, 0), (i + 5, 2)]), gt_dir / f"scene_{i:04d}.json")
        save_annotations(dets_of([(i, 0, 0.9)]), pred_dir / f"scene_{i:04d}.json")
    rep = evaluate_dataset(pred_dir, gt_dir, report_path=tmp_path / "report.json")
    assert rep.scenes == 3 and rep.ground_truths == 6 and rep.predictions == 3
    assert rep.mAP == pytest.approx(oracle_ap([(0, 0, 0.9)], [(0, 0), (5, 2)], 0.5))
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["mAP"] == pytest.approx(rep.mAP)
    assert (tmp_path / "report.txt").read_text().startswith("Threshold")
    # ground truth scored against itself
    assert evaluate_dataset(gt_dir, gt_dir).mAP == 1.0
    (pred_dir / "scene_0002.json").unlink()
    with pytest.raises(EvaluationError, match="scene_0002.json"):
        evaluate_dataset(pred_dir, gt_dir)


def test_write_report_nan_is_null(tmp_path):
    rep = evaluate([[]], [[]])
    write_report(rep, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["mAP"] is None


def test_empty_pr_curve_ap():
    ms = match([], gts_of([(0, 0)]))
    assert average_precision(pr_curve(ms.per_class[ObjectClass.REEF_CONE])) == 0.0
