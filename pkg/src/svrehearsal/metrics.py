"""Evaluation: the lower-triangular result matrix, average error, backward
transfer, a Wilcoxon signed-rank test, and gate-value statistics.

The error analog is sequence-classification error of the sequence head
(argmax ties resolved toward the lowest class index); the per-frame error of
the frame head is reported as a secondary figure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .errors import (IncompleteRecord, InsufficientPairs, InvalidConfig,
                     ShapeError)
from .nnet import ParamSet
from .taskgen import TaskData

EXACT_ENUMERATION_LIMIT = 12  # nonzero pairs up to this use the exact null
SUPPRESS_THRESHOLD = 0.05
ACCEPT_THRESHOLD = 0.95


@dataclass
class RunRecord:
    """Per-run results: R[i, j] is the test error on task j+1 of the model
    trained through task i+1 (defined for j <= i, NaN above the diagonal)."""

    n_tasks: int
    r: np.ndarray
    per_example_errors: list | None = None
    gating_history: dict = field(default_factory=dict)  # task -> list of gate vectors
    groups: tuple | None = None

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.r.shape != (self.n_tasks, self.n_tasks):
            raise ShapeError(f"result matrix must be {self.n_tasks}x{self.n_tasks}")

    def set_entry(self, trained_through: int, task: int, error: float):
        if task > trained_through:
            raise InvalidConfig("entries above the diagonal are undefined")
        self.r[trained_through - 1, task - 1] = error


def evaluate(params: ParamSet, task: TaskData) -> tuple[float, np.ndarray]:
    """Sequence-head test error and the per-example 0/1 error indicators."""
    if task.test.n < 1:
        raise InvalidConfig("empty test split")
    out = nnet.forward(params, task.test)
    pred = out.dec_probs.argmax(axis=1)  # argmax takes the lowest index on ties
    indicators = (pred != task.test.seq_labels).astype(np.int64)
    return float(indicators.mean()), indicators


def frame_error(params: ParamSet, task: TaskData) -> float:
    """Secondary metric: per-frame error of the frame head on the test split."""
    out = nnet.forward(params, task.test)
    pred = out.ctc_probs.argmax(axis=2)
    return float((pred != task.test.frame_labels).mean())


def _require_last_row(rec: RunRecord) -> np.ndarray:
    last = rec.r[rec.n_tasks - 1, :]
    if np.any(np.isnan(last)):
        raise IncompleteRecord("final row of the result matrix is incomplete")
    return last


def average_error(rec: RunRecord) -> float:
    """Mean of the final row: performance over all tasks after the last one."""
    return float(_require_last_row(rec).mean())


def bwt(rec: RunRecord) -> float:
    """Backward transfer: mean of R[k,k] - R[T,k] over k < T (negative means
    forgetting)."""
    if rec.n_tasks < 2:
        raise InvalidConfig("backward transfer needs at least 2 tasks")
    last = _require_last_row(rec)
    diag = np.diag(rec.r)
    if np.any(np.isnan(diag)):
        raise IncompleteRecord("diagonal of the result matrix is incomplete")
    k = rec.n_tasks - 1
    return float(np.mean(diag[:k] - last[:k]))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    level: str
    n_pairs: int


def significance_level(p: float) -> str:
    if p <= 0.001:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return "ns"


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(errors_a, errors_b) -> WilcoxonResult:
    """Two-sided paired signed-rank test on per-example error counts.

    Zero differences are discarded; ties get average ranks. Up to
    EXACT_ENUMERATION_LIMIT nonzero pairs the p-value comes from exact
    enumeration of all sign assignments, above that from the normal
    approximation with tie correction and continuity correction.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired samples must be 1-d and equal length")
    d = a - b
    d = d[d != 0.0]
    n = len(d)
    if n < 5:
        raise InsufficientPairs(
            f"only {n} nonzero differences; at least 5 are required")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)

    if n <= EXACT_ENUMERATION_LIMIT:
        sums = np.zeros(1)
        for r in ranks:
            sums = np.concatenate([sums, sums + r])
        total = ranks.sum()
        mins = np.minimum(sums, total - sums)
        p = float(np.mean(mins <= statistic + 1e-9))
    else:
        mu = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        tie_term = float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
        if var <= 0:
            p = 1.0
        else:
            z = (statistic - mu + 0.5) / math.sqrt(var)
            p = min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))
    return WilcoxonResult(statistic, p, significance_level(p), n)


def gating_stats(gating_history: dict, groups, thresholds=(SUPPRESS_THRESHOLD,
                                                           ACCEPT_THRESHOLD)) -> list:
    """Mean gate value and the suppressed/intermediate fractions.

    Returns one row per (task, layer) and one aggregated row per
    (task, group) with layer None. Suppressed means g < lo; intermediate
    means lo < g < hi.
    """
    if not gating_history:
        raise InvalidConfig("gating history is empty")
    lo, hi = thresholds
    rows = []
    for task_id in sorted(gating_history):
        vectors = gating_history[task_id]
        by_group: dict = {}
        for layer_idx, g in enumerate(vectors):
            g = np.asarray(g, dtype=np.float64)
            group = groups[layer_idx]
            by_group.setdefault(group, []).append(g)
            rows.append(_gate_row(task_id, layer_idx, group, g, lo, hi))
        for group in sorted(by_group):
            pooled = np.concatenate(by_group[group])
            rows.append(_gate_row(task_id, None, group, pooled, lo, hi))
    return rows


def _gate_row(task_id, layer, group, g, lo, hi) -> dict:
    k = len(g)
    return {
        "task": task_id,
        "layer": layer,
        "group": group,
        "k": k,
        "mean": float(g.mean()),
        "frac_suppressed": float(np.sum(g < lo)) / k,
        "frac_intermediate": float(np.sum((g > lo) & (g < hi))) / k,
        "frac_accepted": float(np.sum(g >= hi)) / k,
    }
