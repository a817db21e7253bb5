import math

import pandas as pd
import pytest

import stats_utils as su


def runs_frame():
    return pd.DataFrame({
        "seed": [0, 1, 2, 0, 1, 2],
        "method": ["baseline"] * 3 + ["ssd"] * 3,
        "accuracy": [0.90, 0.88, 0.91, 0.92, 0.93, 0.90],
        "macro_f1": [0.89, 0.87, 0.90, 0.91, 0.92, 0.89],
    })


def test_accuracy_of_an_empty_split_is_nan():
    assert math.isnan(su.accuracy([], []))
    assert su.accuracy([0, 1, 1, 2], [0, 1, 2, 2]) == 0.75


def test_metrics_count_classes_that_never_appear():
    metrics = su.compute_metrics([0, 0, 1], [0, 0, 1], class_count=3)
    assert metrics["confusion_matrix"] == [[2, 0, 0], [0, 1, 0], [0, 0, 0]]
    # the absent class scores 0 and still counts towards the macro mean
    assert metrics["macro_f1"] == pytest.approx(2 / 3)
    assert metrics["weighted_f1"] == 1.0


def test_median_over_seeds():
    summary = su.median_over_seeds(runs_frame(), "method", ["accuracy", "macro_f1"]).set_index("method")
    assert summary.loc["baseline", "accuracy"] == pytest.approx(0.90)
    assert summary.loc["ssd", "accuracy"] == pytest.approx(0.92)
    assert summary.loc["ssd", "macro_f1"] == pytest.approx(0.91)
    assert summary["n_seeds"].tolist() == [3, 3]


def test_describe_runs_has_one_row_per_column():
    table = su.describe_runs(runs_frame(), ["accuracy", "macro_f1"])
    assert list(table.index) == ["accuracy", "macro_f1"]
    assert table.loc["accuracy", "count"] == 6
    assert table.loc["accuracy", "max"] == pytest.approx(0.93)


@pytest.mark.parametrize("values, strict, expected", [
    ([0.1, 0.2, 0.5], True, True),
    ([0.1, 0.1, 0.5], True, False),
    ([0.1, 0.1, 0.5], False, True),
    ([0.3, 0.2], False, False),
    ([1.0], True, True),
])
def test_is_monotone_increasing(values, strict, expected):
    assert su.is_monotone_increasing(values, strict) is expected


def test_sweep_table_keeps_insertion_order():
    table = su.sweep_table([{"eps": 50.0, "accuracy": 0.9}, {"eps": 90.0, "accuracy": 0.92}])
    assert list(table.columns) == ["eps", "accuracy"]
    assert table["eps"].tolist() == [50.0, 90.0]
