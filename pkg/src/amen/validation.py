"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .data import DatasetMeta, ImpressionTable


def check_impressions(X, *, allow_empty: bool = False, validate: bool = True) -> ImpressionTable:
    """Return ``X`` as a validated ImpressionTable or raise TypeError/ValueError."""
    if not isinstance(X, ImpressionTable):
        raise TypeError(f"expected an ImpressionTable, got {type(X).__name__}")
    if not allow_empty and len(X) == 0:
        raise ValueError("found an empty impression table; at least one row is required")
    if validate:
        X.validate()
    return X


def check_labels(X: ImpressionTable, y=None) -> np.ndarray:
    """Labels to train on: ``y`` when given (must be binary and aligned), else ``X.label``."""
    if y is None:
        return X.label.astype(np.int64)
    y = np.asarray(y)
    if y.shape != (len(X),):
        raise ValueError(f"y has shape {y.shape}, expected ({len(X)},)")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("y must contain only 0 and 1")
    return y.astype(np.int64)


def check_same_meta(expected_digest: str, meta: DatasetMeta) -> None:
    if meta.digest() != expected_digest:
        raise ValueError("impressions come from a dataset with different metadata than the fit data")
