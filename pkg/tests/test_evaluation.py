import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_multispectral
from forestseg.evaluation import (
    MACC_FOOTER,
    ConfusionMatrix,
    EvaluationError,
    WiouWeights,
    ablation_report,
    confusion_matrix,
    iou_summary,
    metrics,
    report_for,
    resolve_scenarios,
    run_ablation,
)
from forestseg.forest import ForestParams
from forestseg.geometry import FULL_MASK
from oracles import counting_confusion
from reference_rows import ROWS, TOLERANCE


@pytest.mark.parametrize("name", list(ROWS))
def test_reported_rows_reproduce(name):
    ious, miou, wiou = ROWS[name]
    m, w = iou_summary(np.array(ious) / 100)
    assert abs(100 * m - miou) <= TOLERANCE
    assert abs(100 * w - wiou) <= TOLERANCE


def test_perfect_prediction():
    y = np.repeat(np.arange(6), 10)
    rep = metrics(confusion_matrix(y, y))
    assert rep.oa == rep.miou == rep.wiou == rep.macc == 1.0


def test_single_off_diagonal_cell():
    counts = np.diag([10, 10, 0, 0, 0, 0])
    counts[0, 1] = 10
    rep = metrics(ConfusionMatrix(counts))
    assert rep.per_class_iou[0] == pytest.approx(0.5)
    assert rep.per_class_iou[1] == pytest.approx(0.5)
    assert rep.oa == pytest.approx(2 / 3)
    assert rep.macc == pytest.approx(0.75)
    assert math.isnan(rep.per_class_iou[2])


def test_confusion_matches_counting_oracle(rng):
    truth = rng.integers(0, 6, 10_000)
    pred = np.where(rng.random(10_000) < 0.7, truth, rng.integers(0, 6, 10_000))
    np.testing.assert_array_equal(confusion_matrix(truth, pred).counts, counting_confusion(truth, pred))


labels = st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=300)


@given(labels)
def test_uniform_weights_collapse_to_miou(pairs):
    t, p = map(np.array, zip(*pairs))
    rep = metrics(confusion_matrix(t, p), WiouWeights.uniform())
    assert rep.wiou == pytest.approx(rep.miou, abs=1e-15)


@given(labels, st.integers(2, 50))
def test_scores_are_scale_invariant(pairs, k):
    t, p = map(np.array, zip(*pairs))
    cm = confusion_matrix(t, p)
    a, b = metrics(cm), metrics(ConfusionMatrix(k * cm.counts))
    for name in ("oa", "miou", "wiou", "macc"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), rel=1e-12)


@given(labels)
def test_scores_bounded_and_iou_below_recall(pairs):
    t, p = map(np.array, zip(*pairs))
    rep = metrics(confusion_matrix(t, p))
    for v in (rep.oa, rep.miou, rep.wiou, rep.macc):
        assert 0 <= v <= 1
    for c in range(6):
        if not math.isnan(rep.per_class_recall[c]):
            assert rep.per_class_iou[c] <= rep.per_class_recall[c] + 1e-15
    diagonal = np.all(t == p)
    assert (rep.miou == 1.0) == diagonal


def test_predicted_but_absent_class_counts_as_zero():
    rep = metrics(confusion_matrix([0, 0, 0], [0, 0, 3]))
    assert rep.per_class_iou[3] == 0.0
    assert rep.miou == pytest.approx((2 / 3) / 2)
    assert rep.macc == pytest.approx(2 / 3)


def test_absent_class_excluded():
    rep = metrics(confusion_matrix([0, 1], [0, 1]))
    assert rep.miou == 1.0 and np.isnan(rep.per_class_iou[2:]).all()


def test_input_errors():
    with pytest.raises(EvaluationError):
        confusion_matrix([0, 1], [0])
    with pytest.raises(EvaluationError):
        confusion_matrix([0, 7], [0, 1])
    with pytest.raises(EvaluationError, match="empty"):
        metrics(ConfusionMatrix(np.zeros((6, 6))))
    with pytest.raises(ValueError):
        WiouWeights.parse("1 1 2")


def test_weights_parse():
    assert WiouWeights.parse("1,1,2,2,2,2") == WiouWeights()


def test_resolve_scenarios():
    assert len(resolve_scenarios("all")) == 9
    assert resolve_scenarios(["+NIR"])[0][0] == "+NIR"
    assert resolve_scenarios([FULL_MASK])[0][1] == FULL_MASK


def _clouds(rng, k):
    return [random_multispectral(rng, 300, labeled=True, z_norm=True) for _ in range(k)]


SMALL = ForestParams(n_estimators=5, min_samples_leaf=2, seed=3)


def test_ablation_row_per_scenario_and_deterministic(rng):
    train, test = _clouds(rng, 2), _clouds(rng, 1)
    a = run_ablation(train, test, ["Coordinates", "+SWIR"], SMALL)
    b = run_ablation(train, test, ["Coordinates", "+SWIR"], SMALL)
    assert [r.scenario for r in a] == ["Coordinates", "+SWIR"]
    assert ablation_report(a, key_values=True) == ablation_report(b, key_values=True)
    np.testing.assert_array_equal(a[1].confusion.counts, b[1].confusion.counts)


def test_ablation_with_geometry(rng):
    rows = run_ablation(_clouds(rng, 1), _clouds(rng, 1), [FULL_MASK], SMALL)
    assert rows[0].report.n_points == 300


def test_ablation_needs_labels(rng):
    with pytest.raises(EvaluationError, match="labeled"):
        run_ablation([random_multispectral(rng, 30, labeled=False, z_norm=True)], _clouds(rng, 1), "Coordinates", SMALL)


def test_report_formatting():
    text = report_for([0, 1, 1], [0, 1, 0], label="demo")
    lines = text.splitlines()
    assert lines[0].split()[:2] == ["Feature", "vector"]
    assert lines[1].startswith("demo") and "66.67" in lines[1] and lines[1].count("-") == 4
    assert lines[2] == MACC_FOOTER
