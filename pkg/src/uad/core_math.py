"""Softmax and margin primitives.

The margin of a probability vector is the gap between its two largest
entries; it is the confidence score used for every teacher choice in the
package.
"""
import numpy as np

from uad import kernels
from uad.errors import InvalidInput


def as_logit_matrix(logits, name="logits"):
    """Validate and return ``logits`` as a C-contiguous float64 n×K array."""
    a = np.ascontiguousarray(logits, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D (n x K), got shape {a.shape}")
    n, k = a.shape
    if n < 1:
        raise InvalidInput(f"{name} has no rows")
    if k < 2:
        raise InvalidInput(f"{name} needs at least 2 classes, got {k}")
    bad = ~np.isfinite(a)
    if bad.any():
        row = int(np.flatnonzero(bad.any(axis=1))[0])
        raise InvalidInput(f"{name} row {row} contains non-finite values")
    return a


def softmax(logits_row):
    """Probability vector for one row of logits (max-subtracted, overflow safe)."""
    row = np.asarray(logits_row, dtype=np.float64)
    if row.ndim != 1:
        raise InvalidInput("softmax expects a single row of logits")
    return kernels.softmax_rows(as_logit_matrix(row[None, :], "logits_row"))[0]


def softmax_rows(logits):
    return kernels.softmax_rows(as_logit_matrix(logits))


def margin(p):
    """Top-1 minus top-2 probability of ``p``; exactly 0 on a tie."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise InvalidInput("margin needs a probability vector with K >= 2")
    if not np.all(np.isfinite(p)) or (p < 0).any():
        raise InvalidInput("margin needs finite, non-negative probabilities")
    first = second = -1.0
    for v in p:
        if v > first:
            first, second = v, first
        elif v > second:
            second = v
    return min(float(first - second), kernels.MARGIN_CAP)


def margin_matrix(logits):
    """Per-row margin of softmax(logits); shape (n,)."""
    return kernels.margin_rows(as_logit_matrix(logits), 1.0)


def mean_margin(margins):
    """Arithmetic mean, summed strictly left to right."""
    m = np.ascontiguousarray(margins, dtype=np.float64)
    if m.ndim != 1 or m.shape[0] == 0:
        raise InvalidInput("mean_margin needs a non-empty 1-D vector")
    return kernels.seq_sum(m) / m.shape[0]
