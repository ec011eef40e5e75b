import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormmeta.skillmetrics import (
    ConfusionCounts,
    SkillReport,
    binarize,
    confusion,
    evaluate_archive,
    skill,
)


def test_binarize_boundary_and_extremes():
    img = np.array([[0.0, 50.0], [74.0, 255.0]])
    assert binarize(img, 0.0).all()
    assert not binarize(np.full((3, 3), 50.0), 74.0).any()
    mask = binarize(img, 74.0)
    assert mask.tolist() == [[False, False], [True, True]]


def test_binarize_rejects_bad_inputs():
    with pytest.raises(ValueError):
        binarize(np.zeros((2, 2)), -1.0)
    with pytest.raises(ValueError):
        binarize(np.zeros((2, 2)), 255.5)
    with pytest.raises(ValueError):
        binarize(np.array([[np.nan, 0.0]]), 74.0)


def test_confusion_identical_and_complement():
    mask = np.array([[True, False], [True, True]])
    same = confusion(mask, mask)
    assert (same.hits, same.misses, same.false_alarms) == (3, 0, 0)
    opp = confusion(~mask, mask)
    assert (opp.hits, opp.false_alarms, opp.misses) == (0, 1, 3)


def test_confusion_hand_enumerated_example():
    pred = np.array([[True, True], [False, True]])
    true = np.array([[True, False], [False, True]])
    c = confusion(pred, true)
    assert (c.hits, c.false_alarms, c.misses, c.true_negatives) == (2, 1, 0, 1)
    assert c.total == 4


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


def test_counts_reject_negative():
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


def test_skill_direct_arithmetic():
    s = skill(ConfusionCounts(2, 0, 1, 5))
    assert s["CSI"] == pytest.approx(2 / 3)
    assert s["POD"] == pytest.approx(1.0)
    assert s["SUCR"] == pytest.approx(2 / 3)


def test_skill_perfect_and_undefined():
    assert skill(ConfusionCounts(4, 0, 0, 0)) == {"CSI": 1.0, "POD": 1.0, "SUCR": 1.0}
    empty = skill(ConfusionCounts(0, 0, 0, 9))
    assert empty == {"CSI": None, "POD": None, "SUCR": None}


def test_skill_partial_undefined():
    # Positives in truth but an empty forecast: precision has no denominator.
    s = skill(ConfusionCounts(0, 3, 0, 1))
    assert s["POD"] == 0.0 and s["CSI"] == 0.0
    assert s["SUCR"] is None


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
@settings(max_examples=100, deadline=None)
def test_csi_bounded_by_pod_and_sucr(h, m, f):
    s = skill(ConfusionCounts(h, m, f, 0))
    if all(v is not None for v in s.values()):
        assert s["CSI"] <= min(s["POD"], s["SUCR"]) + 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_counts_match_per_pixel_enumeration(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0, 255, (16, 16))
    true = rng.uniform(0, 255, (16, 16))
    thr = float(rng.uniform(0, 255))
    c = confusion(binarize(pred, thr), binarize(true, thr))
    h = m = f = tn = 0
    for i in range(16):
        for j in range(16):
            p, t = pred[i, j] >= thr, true[i, j] >= thr
            if p and t:
                h += 1
            elif p:
                f += 1
            elif t:
                m += 1
            else:
                tn += 1
    assert (c.hits, c.misses, c.false_alarms, c.true_negatives) == (h, m, f, tn)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_metrics_invariant_under_shared_permutation(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0, 255, 64)
    true = rng.uniform(0, 255, 64)
    perm = rng.permutation(64)
    a = confusion(binarize(pred, 74), binarize(true, 74))
    b = confusion(binarize(pred[perm], 74), binarize(true[perm], 74))
    assert a == b


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_raising_threshold_shrinks_forecast_area(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0, 255, (8, 8))
    true = rng.uniform(0, 255, (8, 8))
    lo = confusion(binarize(pred, 74), binarize(true, 74))
    hi = confusion(binarize(pred, 133), binarize(true, 133))
    assert hi.hits + hi.false_alarms <= lo.hits + lo.false_alarms


def test_evaluate_archive_perfect_prediction():
    rng = np.random.default_rng(0)
    frames = [rng.uniform(0, 255, (8, 8)) for _ in range(4)]
    report = evaluate_archive(frames, [f.copy() for f in frames])
    assert report.mae == 0.0
    for thr in report.thresholds:
        assert report.metrics[thr] == {"CSI": 1.0, "POD": 1.0, "SUCR": 1.0}


def _frame_with_counts(h, m, f, size=2):
    # Lay out hit/miss/false-alarm pixels explicitly; the rest stay negative.
    pred = np.zeros(size * size)
    true = np.zeros(size * size)
    i = 0
    for _ in range(h):
        pred[i] = true[i] = 100.0
        i += 1
    for _ in range(m):
        true[i] = 100.0
        i += 1
    for _ in range(f):
        pred[i] = 100.0
        i += 1
    return pred.reshape(size, size), true.reshape(size, size)


def test_aggregation_modes_diverge_on_uneven_frames():
    p1, t1 = _frame_with_counts(1, 1, 0)
    p2, t2 = _frame_with_counts(1, 0, 1)
    pooled = evaluate_archive([p1, p2], [t1, t2], thresholds=(74.0,), aggregation="pooled")
    mean = evaluate_archive([p1, p2], [t1, t2], thresholds=(74.0,), aggregation="per-frame-mean")
    assert pooled.metrics[74.0]["CSI"] == pytest.approx(0.5)
    assert mean.metrics[74.0]["CSI"] == pytest.approx(0.5)
    assert pooled.metrics[74.0]["POD"] == pytest.approx(2 / 3)
    assert mean.metrics[74.0]["POD"] == pytest.approx(0.75)


def test_aggregation_modes_agree_on_identical_frames():
    p, t = _frame_with_counts(1, 1, 1)
    pooled = evaluate_archive([p, p], [t, t], aggregation="pooled")
    mean = evaluate_archive([p, p], [t, t], aggregation="per-frame-mean")
    for thr in pooled.thresholds:
        for name, value in pooled.metrics[thr].items():
            other = mean.metrics[thr][name]
            if value is None:
                assert other is None
            else:
                assert other == pytest.approx(value)


def test_per_frame_mean_skips_undefined_frames():
    p1, t1 = _frame_with_counts(1, 0, 0)
    p2, t2 = _frame_with_counts(0, 0, 0)  # all-negative frame: nothing defined
    report = evaluate_archive([p1, p2], [t1, t2], thresholds=(74.0,), aggregation="per-frame-mean")
    assert report.metrics[74.0]["CSI"] == pytest.approx(1.0)
    assert report.defined_frames[74.0]["CSI"] == 1


def test_evaluate_archive_mae_pooled():
    p = [np.full((2, 2), 10.0), np.full((2, 2), 20.0)]
    t = [np.full((2, 2), 12.0), np.full((2, 2), 26.0)]
    report = evaluate_archive(p, t, thresholds=(74.0,))
    assert report.mae == pytest.approx(4.0)


def test_evaluate_archive_validation():
    frame = np.zeros((2, 2))
    with pytest.raises(ValueError):
        evaluate_archive([frame], [frame, frame])
    with pytest.raises(ValueError):
        evaluate_archive([frame], [np.zeros((2, 3))])
    with pytest.raises(ValueError):
        evaluate_archive([], [])
    with pytest.raises(ValueError):
        evaluate_archive([frame], [frame], aggregation="median")


def test_counts_merge_by_addition():
    rng = np.random.default_rng(7)
    preds = [rng.uniform(0, 255, (8, 8)) for _ in range(6)]
    trues = [rng.uniform(0, 255, (8, 8)) for _ in range(6)]
    whole = evaluate_archive(preds, trues, thresholds=(133.0,))
    first = evaluate_archive(preds[:3], trues[:3], thresholds=(133.0,))
    second = evaluate_archive(preds[3:], trues[3:], thresholds=(133.0,))
    assert first.counts[133.0] + second.counts[133.0] == whole.counts[133.0]


def test_report_round_trips_through_text(tmp_path):
    p, t = _frame_with_counts(1, 1, 1)
    report = evaluate_archive([p], [t])
    path = tmp_path / "skill.txt"
    report.write(path)
    parsed = SkillReport.parse_lines(path.read_text().splitlines())
    assert parsed["aggregation"] == "pooled"
    assert parsed["n_frames"] == 1.0
    assert parsed["CSI74"] == pytest.approx(report.metrics[74.0]["CSI"], abs=1e-4)
    assert parsed["CSI133"] is None  # only negatives at the high threshold


def test_report_line_format():
    p, t = _frame_with_counts(2, 0, 1)
    report = evaluate_archive([p], [t], thresholds=(74.0,))
    lines = report.to_lines()
    assert "CSI74=0.6667" in lines
    assert "POD74=1.0000" in lines
    assert "SUCR74=0.6667" in lines
