import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from edgeinfer.errors import MetricsError
from edgeinfer.metrics import (ConfusionMatrix, MetricsReport, aggregate_folds,
                               confusion, metrics, render_confusion)


def _cm(tp, fp, fn, tn, classes=("neg", "pos")):
    # rows = actual, columns = predicted; class 1 is positive
    counts = np.array([[tn, fp], [fn, tp]], dtype=np.int64)
    return ConfusionMatrix(counts=counts, classes=list(classes))


def test_binary_oracle_3_1_1_5():
    # tp=3 fp=1 fn=1 tn=5: acc 8/10, precision 3/4, recall 3/4, f1 3/4
    r = metrics(_cm(3, 1, 1, 5))
    assert r.values["accuracy"] == pytest.approx(0.8)
    assert r.values["precision"] == pytest.approx(0.75)
    assert r.values["recall"] == pytest.approx(0.75)
    assert r.values["f1"] == pytest.approx(0.75)
    assert r.positive_class == "pos"
    assert not r.absent


def test_f1_is_harmonic_mean():
    r = metrics(_cm(6, 2, 4, 8))
    p, rec = r.values["precision"], r.values["recall"]
    assert r.values["f1"] == pytest.approx(2 / (1 / p + 1 / rec))


def test_confusion_from_labels_and_binary_counts():
    actual = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    predicted = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0]
    cm = confusion(actual, predicted, ["neg", "pos"])
    assert cm.binary_counts(positive=1) == (3, 1, 1, 5)
    assert cm.total == 10
    np.testing.assert_array_equal(cm.counts, [[5, 1], [1, 3]])


def test_swapping_positive_class_swaps_roles():
    cm = _cm(3, 1, 1, 5)
    r = metrics(cm, positive=0)
    tp, fp, fn, tn = cm.binary_counts(0)
    assert (tp, fp, fn, tn) == (5, 1, 1, 3)
    assert r.values["precision"] == pytest.approx(5 / 6)
    assert r.values["accuracy"] == pytest.approx(0.8)  # invariant under swap
    assert r.positive_class == "neg"


def test_absent_reason_no_predicted_positives():
    r = metrics(_cm(0, 0, 2, 8))
    assert "precision" not in r.values
    assert r.absent["precision"] == "no-predicted-positives"
    assert r.absent["f1"] == "precision-or-recall-absent"
    assert r.values["recall"] == 0.0


def test_absent_reason_no_actual_positives():
    r = metrics(_cm(0, 1, 0, 9))
    assert r.absent["recall"] == "no-actual-positives"
    assert r.values["precision"] == 0.0
    assert r.absent["f1"] == "precision-or-recall-absent"


def test_absent_reason_zero_precision_and_recall():
    # predicted positives and actual positives exist but never overlap
    r = metrics(_cm(0, 3, 4, 3))
    assert r.values["precision"] == 0.0 and r.values["recall"] == 0.0
    assert r.absent["f1"] == "zero-precision-and-recall"


def test_empty_matrix_rejected():
    with pytest.raises(MetricsError) as err:
        metrics(ConfusionMatrix(np.zeros((2, 2), dtype=np.int64), ["a", "b"]))
    assert err.value.code == "empty-matrix"


def test_confusion_input_validation():
    with pytest.raises(MetricsError) as err:
        confusion([0, 1], [0], ["a", "b"])
    assert err.value.code == "length-mismatch"
    with pytest.raises(MetricsError) as err:
        confusion([0, 2], [0, 1], ["a", "b"])
    assert err.value.code == "label-out-of-range"


@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
@settings(max_examples=100)
def test_binary_metrics_bounds_property(tp, fp, fn, tn):
    if tp + fp + fn + tn == 0:
        return
    r = metrics(_cm(tp, fp, fn, tn))
    for v in r.values.values():
        assert 0.0 <= v <= 1.0
    assert r.values["accuracy"] == pytest.approx((tp + tn) / (tp + fp + fn + tn))
    # every headline metric is either present or has a reason, never both
    for name in ("precision", "recall", "f1"):
        assert (name in r.values) != (name in r.absent)


def test_multiclass_accuracy_is_trace_over_total():
    counts = np.array([[5, 1, 0], [2, 7, 1], [0, 0, 4]], dtype=np.int64)
    cm = ConfusionMatrix(counts, ["a", "b", "c"])
    r = metrics(cm)
    assert r.values["accuracy"] == pytest.approx(16 / 20)
    assert set(r.per_class) == {"a", "b", "c"}
    # macro average is the unweighted mean of defined per-class values
    per = [r.per_class[c]["values"]["precision"] for c in ("a", "b", "c")]
    assert r.values["macro_precision"] == pytest.approx(np.mean(per))


def test_multiclass_macro_skips_undefined_classes():
    # class "c" never predicted and never actual: its precision/recall absent
    counts = np.array([[5, 1, 0], [1, 6, 0], [0, 0, 0]], dtype=np.int64)
    r = metrics(ConfusionMatrix(counts, ["a", "b", "c"]))
    assert r.per_class["c"]["absent"]["precision"] == "no-predicted-positives"
    per = [r.per_class[c]["values"]["precision"] for c in ("a", "b")]
    assert r.values["macro_precision"] == pytest.approx(np.mean(per))


def test_render_confusion_grid():
    text = render_confusion(_cm(3, 1, 1, 5))
    lines = text.splitlines()
    assert len(lines) == 3
    assert lines[1].split() == ["neg", "5", "1"]
    assert lines[2].split() == ["pos", "1", "3"]


def test_aggregate_folds_oracle():
    # accuracies (0.9 x4, 0.95): mean 0.91, sample std ~0.02236
    reports = [MetricsReport(values={"accuracy": a})
               for a in (0.9, 0.9, 0.9, 0.9, 0.95)]
    mean, std, absent = aggregate_folds(reports)
    assert mean["accuracy"] == pytest.approx(0.91)
    assert std["accuracy"] == pytest.approx(0.02236, abs=5e-6)
    assert absent == {}


def test_aggregate_folds_propagates_absence():
    reports = [
        MetricsReport(values={"accuracy": 1.0, "f1": 1.0}),
        MetricsReport(values={"accuracy": 0.9},
                      absent={"f1": "precision-or-recall-absent"}),
    ]
    mean, std, absent = aggregate_folds(reports)
    assert "f1" not in mean
    assert absent["f1"] == "absent-in-some-fold"
    assert mean["accuracy"] == pytest.approx(0.95)


def test_aggregate_single_fold_std_is_zero():
    mean, std, _ = aggregate_folds([MetricsReport(values={"accuracy": 0.8})])
    assert std["accuracy"] == 0.0
