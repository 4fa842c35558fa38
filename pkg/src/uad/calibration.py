"""Temperature scaling fitted by ECE minimisation, and reliability binning."""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from uad import kernels
from uad.core_math import as_logit_matrix
from uad.errors import InvalidConfig, InvalidInput, InvalidTemperature

ORACLE = "oracle"
PROXY_CONSENSUS = "proxy-consensus"
LABEL_SOURCES = (ORACLE, PROXY_CONSENSUS)

# Initial temperatures used for the two reference benchmarks; log(1/1.5) is a
# log-temperature, i.e. T = 2/3.
ANCHOR_TEMPERATURES = (math.exp(math.log(1 / 1.5)), 1.5)

_INV_PHI = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class Temperature:
    """Positive logit divisor, stored with its log so either can seed a search."""

    value: float
    log_value: float = field(init=False)

    def __post_init__(self):
        v = float(self.value)
        if not (math.isfinite(v) and v > 0):
            raise InvalidTemperature(f"temperature must be positive and finite, got {self.value!r}")
        object.__setattr__(self, "value", v)
        object.__setattr__(self, "log_value", math.log(v))

    @classmethod
    def from_log(cls, t):
        return cls(math.exp(t))


IDENTITY = Temperature(1.0)


@dataclass
class ReliabilityBins:
    bin_count: int
    counts: np.ndarray
    conf_sums: np.ndarray
    correct_sums: np.ndarray

    @property
    def n(self):
        return int(self.counts.sum())

    def edges(self):
        m = self.bin_count
        return [((b - 1) / m, b / m) for b in range(1, m + 1)]


@dataclass
class CalibrationReport:
    model_id: str
    temperature: Temperature
    ece_before: float
    ece_after: float
    label_source: str
    warning: str | None = None

    def to_dict(self):
        d = {
            "model_id": self.model_id,
            "temperature": self.temperature.value,
            "ece_before": self.ece_before,
            "ece_after": self.ece_after,
            "label_source": self.label_source,
        }
        if self.warning:
            d["warning"] = self.warning
        return d


@dataclass
class CalibrationConfig:
    n_bins: int = 10
    grid_min: float = 0.05
    grid_max: float = 10.0
    grid_size: int = 200
    refine_iters: int = 40
    grid: tuple | None = None

    def __post_init__(self):
        if int(self.n_bins) < 1:
            raise InvalidConfig("n_bins must be >= 1")
        self.build_grid()

    def build_grid(self):
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=np.float64)
        else:
            if not (0 < self.grid_min < self.grid_max) or self.grid_size < 2:
                raise InvalidConfig("temperature grid needs 0 < grid_min < grid_max and grid_size >= 2")
            g = np.geomspace(self.grid_min, self.grid_max, self.grid_size)
            g = np.concatenate([g, [1.0], ANCHOR_TEMPERATURES])
        return np.unique(g)


def apply_temperature(logits, temperature):
    """Divide every logit by the temperature value."""
    t = temperature.value if isinstance(temperature, Temperature) else float(temperature)
    if not (t > 0):
        raise InvalidTemperature(f"temperature must be positive, got {t!r}")
    return np.asarray(logits, dtype=np.float64) / t


def assign_bins(confidences, correct, n_bins=10):
    """Group samples into M equal-width confidence intervals ((m-1)/M, m/M].

    A confidence of exactly 0 goes into the first bin.
    """
    if int(n_bins) < 1:
        raise InvalidInput("need at least one bin")
    conf = np.ascontiguousarray(confidences, dtype=np.float64)
    corr = np.ascontiguousarray(correct, dtype=np.float64)
    if conf.ndim != 1 or conf.shape != corr.shape:
        raise InvalidInput("confidences and correct must be 1-D and equally long")
    if not np.all(np.isfinite(conf)) or (conf < 0).any() or (conf > 1).any():
        raise InvalidInput("confidences must lie in [0, 1]")
    counts, conf_sums, correct_sums = kernels.bin_stats(conf, corr, int(n_bins))
    return ReliabilityBins(int(n_bins), counts, conf_sums, correct_sums)


def compute_ece(bins):
    n = bins.n
    if n < 1:
        raise InvalidInput("ECE of an empty bin set is undefined")
    # |B_m|/n * |acc - conf| == |sum(correct) - sum(conf)| / n; empty bins add 0
    return float(np.abs(bins.correct_sums - bins.conf_sums).sum() / n)


def reliability(logits, labels, temperature=IDENTITY, n_bins=10):
    """Reliability bins of top-1 calibrated confidence against ``labels``."""
    logits = as_logit_matrix(logits)
    labels = _check_labels(labels, logits)
    t = temperature.value if isinstance(temperature, Temperature) else float(temperature)
    conf, pred = kernels.top1_rows(logits, t)
    return assign_bins(np.minimum(conf, 1.0), pred == labels, n_bins)


def ece(logits, labels, temperature=IDENTITY, n_bins=10):
    return compute_ece(reliability(logits, labels, temperature, n_bins))


def _check_labels(labels, logits):
    y = np.asarray(labels)
    if y.shape != (logits.shape[0],):
        raise InvalidInput(f"expected {logits.shape[0]} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise InvalidInput("labels out of range [0, K)")
    return y.astype(np.int64)


def _golden_min(f, a, b, iters):
    """Golden-section search on [a, b]; returns (x, f(x)) for the best point seen."""
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    best = (c, fc) if fc <= fd else (d, fd)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
            if fc < best[1]:
                best = (c, fc)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
            if fd < best[1]:
                best = (d, fd)
    return best


def fit_temperature(logits, labels, cfg=None):
    """Temperature minimising ECE on (logits, labels).

    Exhaustive search over the grid, then golden-section refinement (in log T)
    inside the two grid cells around the best point. A refined value replaces
    the grid optimum only if it is strictly better. Among equal ECE values the
    temperature closest to 1 wins.
    """
    cfg = cfg or CalibrationConfig()
    grid = cfg.build_grid()
    if grid.size == 0:
        raise InvalidConfig("temperature grid is empty")
    if not np.all(np.isfinite(grid)) or (grid <= 0).any():
        raise InvalidTemperature("temperature grid entries must be positive")
    logits = as_logit_matrix(logits)
    labels = _check_labels(labels, logits)
    n_bins = int(cfg.n_bins)
    if n_bins < 1:
        raise InvalidConfig("n_bins must be >= 1")

    # argmax is temperature invariant, so correctness is computed once
    correct = (np.argmax(logits, axis=1) == labels).astype(np.float64)

    def objective(t):
        return kernels.ece_at(logits, correct, t, n_bins)

    eces = np.array([objective(t) for t in grid])
    lo = eces.min()
    ties = np.flatnonzero(eces == lo)
    i = int(ties[np.argmin(np.abs(grid[ties] - 1.0))])
    best_t, best_e = float(grid[i]), float(lo)

    if grid.size > 1 and cfg.refine_iters > 0 and best_e > 0:
        a = math.log(grid[max(i - 1, 0)])
        b = math.log(grid[min(i + 1, grid.size - 1)])
        x, fx = _golden_min(lambda s: objective(math.exp(s)), a, b, cfg.refine_iters)
        if fx < best_e:
            best_t = math.exp(x)
    return Temperature(best_t)


def consensus_labels(logit_list):
    """Per-instance majority vote of argmax predictions; ties go to the smallest class."""
    preds = np.stack([np.argmax(l, axis=1) for l in logit_list])
    k = logit_list[0].shape[1]
    votes = np.zeros((preds.shape[1], k), dtype=np.int64)
    for p in preds:
        votes[np.arange(p.shape[0]), p] += 1
    return np.argmax(votes, axis=1)


def calibrate_zoo(zoo, label_source=PROXY_CONSENSUS, labels=None, cfg=None):
    """Fit one temperature per zoo entry.

    ``label_source="oracle"`` uses the supplied ``labels``; ``"proxy-consensus"``
    labels every instance by majority vote of the uncalibrated predictions of
    all zoo members. Returns one :class:`CalibrationReport` per entry, in zoo
    order. Apply them with ``zoo.with_temperatures``.
    """
    cfg = cfg or CalibrationConfig()
    if label_source not in LABEL_SOURCES:
        raise InvalidConfig(f"unknown label source {label_source!r}")
    entries = list(zoo.entries)
    if not entries:
        raise InvalidInput("cannot calibrate an empty zoo")
    note = None
    if label_source == ORACLE:
        if labels is None:
            raise InvalidInput("oracle calibration needs labels")
        y = np.asarray(labels)
    else:
        y = consensus_labels([e.logits for e in entries])
        if len(entries) == 1:
            note = "degenerate consensus: single-model zoo, labels equal its own argmax"
            warnings.warn(note, RuntimeWarning, stacklevel=2)

    reports = []
    for e in entries:
        t = fit_temperature(e.logits, y, cfg)
        reports.append(
            CalibrationReport(
                model_id=e.model_id,
                temperature=t,
                ece_before=ece(e.logits, y, IDENTITY, cfg.n_bins),
                ece_after=ece(e.logits, y, t, cfg.n_bins),
                label_source=label_source,
                warning=note,
            )
        )
    return reports
