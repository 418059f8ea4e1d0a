"""Classification metrics."""

from __future__ import annotations

import math

import numpy as np


def accuracy(pred, gold) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.size == 0:
        raise ValueError("accuracy of an empty split")
    return float((pred == gold).mean())


def matthews_corrcoef(pred, gold) -> float:
    """Binary Matthews correlation; 0 when any marginal is empty."""
    pred, gold = np.asarray(pred).astype(bool), np.asarray(gold).astype(bool)
    if pred.size == 0:
        raise ValueError("Matthews correlation of an empty split")
    tp = int((pred & gold).sum())
    tn = int((~pred & ~gold).sum())
    fp = int((pred & ~gold).sum())
    fn = int((~pred & gold).sum())
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return 0.0 if denom == 0 else (tp * tn - fp * fn) / denom
