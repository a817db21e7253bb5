import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score


def accuracy(labels, predictions):
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(accuracy_score(labels, predictions))


def compute_metrics(labels, predictions, class_count):
    """ Accuracy, macro/weighted F1 and the confusion matrix (rows = true class) """
    classes = list(range(class_count))
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    return {
        "accuracy": accuracy(labels, predictions),
        "macro_f1": float(f1_score(labels, predictions, labels=classes, average="macro", zero_division=0)),
        "weighted_f1": float(f1_score(labels, predictions, labels=classes, average="weighted", zero_division=0)),
        "confusion_matrix": confusion_matrix(labels, predictions, labels=classes).tolist(),
    }


def median_over_seeds(df, by, value_cols):
    """ Median of every value column per group, plus how many seeds went in """
    grouped = df.groupby(by)
    summary = grouped[value_cols].median()
    summary["n_seeds"] = grouped.size()
    return summary.reset_index()


def describe_runs(df, value_cols):
    return df[value_cols].describe().transpose()


def is_monotone_increasing(values, strict=True):
    diffs = np.diff(np.asarray(values, dtype=float))
    return bool(np.all(diffs > 0) if strict else np.all(diffs >= 0))


def sweep_table(rows):
    """ One row per grid point, columns in insertion order """
    return pd.DataFrame.from_records(rows)
