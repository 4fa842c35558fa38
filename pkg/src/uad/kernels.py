"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a loop form compiled with numba (``nb_*``) and a
vectorised numpy form (``np_*``). The unprefixed names dispatch to one of
them according to :data:`uad._accel.USE_NUMBA`. Inputs are assumed to be
validated by the caller; kernels do no argument checking.
"""
import math

import numpy as np

from uad._accel import USE_NUMBA, njit

# Largest double strictly below 1; keeps saturated margins inside [0, 1).
MARGIN_CAP = float(np.nextafter(1.0, 0.0))


# ---------------------------------------------------------------- numba path


@njit
def nb_softmax_rows(logits):
    n, k = logits.shape
    out = np.empty((n, k))
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, k):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(k):
            e = math.exp(logits[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(k):
            out[i, j] /= s
    return out


@njit
def nb_margin_gap_rows(logits, temperature):
    """Margins and their complements 1 - margin, each computed without cancellation."""
    n, k = logits.shape
    marg = np.empty(n)
    gap = np.empty(n)
    z = np.empty(k)
    for i in range(n):
        top = 0
        for j in range(k):
            z[j] = logits[i, j] / temperature
            if z[j] > z[top]:
                top = j
        m = z[top]
        rest = 0.0
        e2 = -1.0
        for j in range(k):
            if j == top:
                continue
            e = math.exp(z[j] - m)
            rest += e
            if e > e2:
                e2 = e
        s = 1.0 + rest
        r = (1.0 - e2) / s
        marg[i] = r if r < MARGIN_CAP else MARGIN_CAP
        gap[i] = (rest + e2) / s
    return marg, gap


@njit
def nb_margin_rows(logits, temperature):
    return nb_margin_gap_rows(logits, temperature)[0]


@njit
def nb_top1_rows(logits, temperature):
    n, k = logits.shape
    conf = np.empty(n)
    pred = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        m = logits[i, 0] / temperature
        for j in range(1, k):
            v = logits[i, j] / temperature
            if v > m:
                m = v
                best = j
        s = 0.0
        for j in range(k):
            s += math.exp(logits[i, j] / temperature - m)
        conf[i] = 1.0 / s
        pred[i] = best
    return conf, pred


@njit
def nb_bin_index(conf, n_bins):
    n = conf.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = conf[i]
        b = int(math.ceil(c * n_bins))
        if b < 1:
            b = 1
        if b > n_bins:
            b = n_bins
        # c*M can round across an edge; re-check against the float edges
        if b > 1 and c <= (b - 1) / n_bins:
            b -= 1
        elif b < n_bins and c > b / n_bins:
            b += 1
        out[i] = b
    return out


@njit
def nb_bin_stats(conf, correct, n_bins):
    idx = nb_bin_index(conf, n_bins)
    counts = np.zeros(n_bins, dtype=np.int64)
    conf_sums = np.zeros(n_bins)
    correct_sums = np.zeros(n_bins)
    for i in range(conf.shape[0]):
        b = idx[i] - 1
        counts[b] += 1
        conf_sums[b] += conf[i]
        correct_sums[b] += correct[i]
    return counts, conf_sums, correct_sums


@njit
def nb_ece_at(logits, correct, temperature, n_bins):
    conf, _ = nb_top1_rows(logits, temperature)
    counts, conf_sums, correct_sums = nb_bin_stats(conf, correct, n_bins)
    total = 0.0
    for b in range(n_bins):
        total += abs(correct_sums[b] - conf_sums[b])
    return total / conf.shape[0]


@njit
def nb_seq_sum(x):
    s = 0.0
    for i in range(x.shape[0]):
        s += x[i]
    return s


@njit
def nb_zoo_margins(stack, temperatures):
    n_models = stack.shape[0]
    marg = np.empty((n_models, stack.shape[1]))
    gap = np.empty((n_models, stack.shape[1]))
    for j in range(n_models):
        marg[j], gap[j] = nb_margin_gap_rows(stack[j], temperatures[j])
    return marg, gap


@njit
def nb_select_cols(marg, gap):
    """Per column: largest margin, then smallest complement, then first row."""
    rows, cols = marg.shape
    out = np.zeros(cols, dtype=np.int64)
    for c in range(cols):
        b = 0
        for r in range(1, rows):
            if marg[r, c] > marg[b, c] or (marg[r, c] == marg[b, c] and gap[r, c] < gap[b, c]):
                b = r
        out[c] = b
    return out


# ---------------------------------------------------------------- numpy path


def np_softmax_rows(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def np_margin_gap_rows(logits, temperature):
    z = logits / temperature
    n = z.shape[0]
    top = np.argmax(z, axis=1)
    e = np.exp(z - z[np.arange(n), top][:, None])
    e[np.arange(n), top] = 0.0
    rest = e.sum(axis=1)
    e2 = e.max(axis=1)
    s = 1.0 + rest
    return np.minimum((1.0 - e2) / s, MARGIN_CAP), (rest + e2) / s


def np_margin_rows(logits, temperature):
    return np_margin_gap_rows(logits, temperature)[0]


def np_top1_rows(logits, temperature):
    z = logits / temperature
    pred = np.argmax(z, axis=1)
    m = z[np.arange(z.shape[0]), pred]
    s = np.exp(z - m[:, None]).sum(axis=1)
    return 1.0 / s, pred.astype(np.int64)


def np_bin_index(conf, n_bins):
    b = np.clip(np.ceil(conf * n_bins).astype(np.int64), 1, n_bins)
    down = (b > 1) & (conf <= (b - 1) / n_bins)
    up = ~down & (b < n_bins) & (conf > b / n_bins)
    return b - down + up


def np_bin_stats(conf, correct, n_bins):
    idx = np_bin_index(conf, n_bins) - 1
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    conf_sums = np.bincount(idx, weights=conf, minlength=n_bins)
    correct_sums = np.bincount(idx, weights=correct, minlength=n_bins)
    return counts, conf_sums, correct_sums


def np_ece_at(logits, correct, temperature, n_bins):
    conf, _ = np_top1_rows(logits, temperature)
    _, conf_sums, correct_sums = np_bin_stats(conf, correct, n_bins)
    return float(np.abs(correct_sums - conf_sums).sum() / conf.shape[0])


def np_seq_sum(x):
    # cumsum accumulates strictly left to right, unlike np.sum's pairwise tree
    return float(np.cumsum(x)[-1]) if x.shape[0] else 0.0


def np_zoo_margins(stack, temperatures):
    pairs = [np_margin_gap_rows(stack[j], temperatures[j]) for j in range(stack.shape[0])]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def np_select_cols(marg, gap):
    # rows tied on the top margin compete on the smallest gap; argmax keeps the first row
    top = marg == marg.max(axis=0)
    g = np.where(top, gap, np.inf)
    return np.argmax(top & (g == g.min(axis=0)), axis=0).astype(np.int64)


# ---------------------------------------------------------------- dispatch

if USE_NUMBA:
    softmax_rows = nb_softmax_rows
    margin_rows = nb_margin_rows
    top1_rows = nb_top1_rows
    bin_stats = nb_bin_stats
    ece_at = nb_ece_at
    seq_sum = nb_seq_sum
    zoo_margins = nb_zoo_margins
    select_cols = nb_select_cols
else:
    softmax_rows = np_softmax_rows
    margin_rows = np_margin_rows
    top1_rows = np_top1_rows
    bin_stats = np_bin_stats
    ece_at = np_ece_at
    seq_sum = np_seq_sum
    zoo_margins = np_zoo_margins
    select_cols = np_select_cols

BACKEND = "numba" if USE_NUMBA else "numpy"


def warmup():
    """Trigger compilation of every dispatched kernel on tiny inputs."""
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    softmax_rows(x)
    margin_rows(x, 1.0)
    top1_rows(x, 1.0)
    c = np.array([0.5, 1.0])
    bin_stats(c, np.array([1.0, 0.0]), 10)
    ece_at(x, np.array([1.0, 0.0]), 1.0, 10)
    seq_sum(c)
    zoo_margins(x[None], np.array([1.0]))
    select_cols(x, x)
