import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecglite.errors import EmptyEvaluation, ShapeError
from ecglite.eval import (METRIC_COLUMNS, LEAD_ARMS, ConfusionMatrix, bar_chart_svg,
                          compute_metrics, confusion_csv, confusion_matrix, confusion_svg,
                          line_chart_svg, metrics_csv, run_lead_experiments)
from ecglite.nn import ModelConfig, TrainConfig
from ecglite.synthetic import make_dataset
from ecglite.wfdb_ingest import STANDARD_LEADS

counts = st.integers(0, 500)


def test_perfect_predictions():
    labels = np.array([0, 1, 1, 0, 1])
    cm = confusion_matrix(labels.astype(float), labels)
    assert cm.fp == cm.fn == 0 and cm.tp == 3 and cm.tn == 2
    m = compute_metrics(cm)
    assert (m.accuracy, m.precision, m.recall, m.f1) == (100.0, 100.0, 100.0, 100.0)
    assert m.degenerate == ()


def test_threshold_is_inclusive():
    cm = confusion_matrix(np.full(6, 0.5), [0, 1, 0, 1, 1, 0])
    assert cm.tp + cm.fp == 6 and cm.tn + cm.fn == 0


def test_four_cases_by_hand():
    cm = confusion_matrix([0.9, 0.2, 0.6, 0.4], [1, 1, 0, 0])
    assert (cm.tp, cm.fn, cm.fp, cm.tn) == (1, 1, 1, 1)


def test_metrics_by_hand():
    m = compute_metrics(ConfusionMatrix(tp=3, fp=1, tn=4, fn=2))
    assert m.accuracy == pytest.approx(70.0)
    assert m.precision == pytest.approx(75.0)
    assert m.recall == pytest.approx(60.0)
    assert m.f1 == pytest.approx(66.6667, abs=1e-4)


def test_degenerate_flags():
    m = compute_metrics(ConfusionMatrix(tp=0, fp=0, tn=5, fn=0))
    assert m.accuracy == 100.0 and m.precision == m.recall == m.f1 == 0.0
    assert set(m.degenerate) == {"precision", "recall", "f1"}
    m = compute_metrics(ConfusionMatrix(tp=0, fp=3, tn=0, fn=2))
    assert m.precision == m.recall == m.f1 == 0.0 and m.degenerate == ("f1",)


def test_empty_and_mismatch():
    with pytest.raises(EmptyEvaluation):
        compute_metrics(ConfusionMatrix(0, 0, 0, 0))
    with pytest.raises(ShapeError):
        confusion_matrix([0.1, 0.2], [1])


@given(counts, counts, counts, counts)
def test_metric_invariants(tp, fp, tn, fn):
    cm = ConfusionMatrix(tp, fp, tn, fn)
    if cm.total == 0:
        return
    m = compute_metrics(cm)
    for v in (m.accuracy, m.precision, m.recall, m.f1):
        assert 0.0 <= v <= 100.0
    assert (m.f1 == 0.0) == (tp == 0)
    if m.precision + m.recall > 0:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
    swapped = compute_metrics(ConfusionMatrix(tn, fn, tp, fp))
    assert swapped.accuracy == pytest.approx(m.accuracy)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.data())
def test_threshold_monotone(probs, data):
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(probs), max_size=len(probs)))
    t1, t2 = sorted(data.draw(st.tuples(st.floats(0, 1), st.floats(0, 1))))
    a, b = confusion_matrix(probs, labels, t1), confusion_matrix(probs, labels, t2)
    assert b.tp <= a.tp and b.tn >= a.tn
    assert a.total == b.total == len(probs)


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=60),
       st.integers(1, 59))
def test_confusion_additive_over_shards(pairs, cut):
    probs, labels = map(np.array, zip(*pairs))
    cut = min(cut, len(pairs) - 1)
    whole = confusion_matrix(probs, labels)
    assert confusion_matrix(probs[:cut], labels[:cut]) + confusion_matrix(probs[cut:], labels[cut:]) == whole


def test_metrics_csv_columns():
    text = metrics_csv([(12, 60705, compute_metrics(ConfusionMatrix(3, 1, 4, 2)))])
    lines = text.splitlines()
    assert lines[0].split(",") == list(METRIC_COLUMNS)
    assert lines[1] == "12,60705,70.00,75.00,60.00,66.67"


def test_confusion_reports():
    cm = ConfusionMatrix(tp=5, fp=2, tn=7, fn=1)
    assert confusion_csv(cm) == ("actual,predicted_normal,predicted_abnormal\n"
                                 "normal,7,2\nabnormal,1,5\n")
    svg = confusion_svg(cm, "a < b")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert "a &lt; b" in svg and ">5<" in svg and ">7<" in svg
    assert bar_chart_svg({"NORM": 3, "MI": 0}, "x").count("<rect") == 2
    line = line_chart_svg({"loss": [1.0, float("nan"), 0.5]}, "h")
    assert line.count("<polyline") == 1


def test_lead_experiments_run_every_arm():
    records, y, _ = make_dataset(n_records=48, fs=100, seconds=0.64, seed=5)
    x = np.stack([r.samples for r in records])
    mc = ModelConfig(in_channels=12, input_length=64, conv_filters=(2, 2, 3, 3, 4, 4),
                     conv_kernels=(3, 3, 3, 3, 3, 3), dense_hidden=3)
    tc = TrainConfig(epochs=1, batch_size=16)
    results = run_lead_experiments((x[:36], y[:36]), (x[36:], y[36:]), STANDARD_LEADS, mc, tc)
    assert [r.arm for r in results] == list(LEAD_ARMS)
    assert [len(r.leads) for r in results] == [1, 3, 6, 12]
    assert all(r.confusion.total == 12 for r in results)
    assert results[0].train_params < results[-1].train_params
    with pytest.raises(ShapeError):
        run_lead_experiments((x[:36, :1], y[:36]), (x[36:, :1], y[36:]), ["I"], mc, tc, arms=("all",))
