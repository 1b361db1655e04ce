"""Online task affinity from per-sample error margins.

For task ``i`` on sample ``n`` the margin is ``|t - s|``; the sample counts
as difficult when its margin is at least the task's running mean margin.
Two tasks are affine when they tend to find the same samples difficult (or
the same samples easy). Both the mean margins and the pairwise agreement
rates are running averages of per-batch sample averages with exponentially
decaying weights, bias-corrected on read.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EmptyDataError


@dataclass
class AffinityState:
    task_count: int
    decay: float = 0.99
    margin_acc: np.ndarray = field(default=None)
    agree_acc: np.ndarray = field(default=None)
    batches_seen: int = 0

    def __post_init__(self):
        if self.task_count < 1:
            raise ContractError("task_count must be >= 1")
        if not 0.0 <= self.decay < 1.0:
            raise ContractError(f"decay must lie in [0, 1), got {self.decay}")
        if self.margin_acc is None:
            self.margin_acc = np.zeros(self.task_count)
        if self.agree_acc is None:
            self.agree_acc = np.zeros((self.task_count, self.task_count))

    def _correction(self) -> float:
        return 1.0 - self.decay**self.batches_seen

    @property
    def mean_margin(self) -> np.ndarray:
        if self.batches_seen == 0:
            raise EmptyDataError("no batches recorded")
        return self.margin_acc / self._correction()

    @property
    def pair_agree(self) -> np.ndarray:
        if self.batches_seen == 0:
            raise EmptyDataError("no batches recorded")
        return self.agree_acc / self._correction()


def batch_statistics(scores, labels, mask, threshold=None):
    """Per-batch mean margins, difficulty indicators and pairwise agreement.

    ``threshold`` is the per-task mean margin used for the indicators; when
    None the batch's own mean margins are used.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    m = np.ones_like(s) if mask is None else np.asarray(mask, dtype=np.float64)
    if s.ndim != 2 or s.shape != t.shape or s.shape != m.shape:
        raise ContractError(f"scores {s.shape}, labels {t.shape}, mask {m.shape} must be equal N x T")
    if s.shape[0] < 1:
        raise EmptyDataError("batch has no samples")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores contain non-finite values")
    margin = np.abs(t - s)
    per_task = m.sum(axis=0)
    if np.any(per_task == 0):
        raise EmptyDataError(f"tasks {np.flatnonzero(per_task == 0).tolist()} have no labelled samples in this batch")
    batch_margin = (margin * m).sum(axis=0) / per_task
    thr = batch_margin if threshold is None else threshold
    e = (margin >= thr).astype(np.float64)
    joint = m.T @ m
    if np.any(joint == 0):
        i, j = np.argwhere(joint == 0)[0]
        raise EmptyDataError(f"tasks {i} and {j} share no labelled samples in this batch")
    em, nm = e * m, (1.0 - e) * m
    agree = (em.T @ em + nm.T @ nm) / joint
    return batch_margin, e, agree


def record_batch(state: AffinityState, scores, labels, mask=None) -> AffinityState:
    """Fold one mini-batch into the running estimates (in place; also returned).

    Difficulty indicators use the mean margin from before this batch; the
    very first batch uses its own average.
    """
    if np.asarray(scores).shape[1:] != (state.task_count,):
        raise ContractError(f"expected {state.task_count} task columns, got {np.asarray(scores).shape}")
    threshold = state.mean_margin if state.batches_seen else None
    batch_margin, _, agree = batch_statistics(scores, labels, mask, threshold)
    a = state.decay
    state.margin_acc = a * state.margin_acc + (1 - a) * batch_margin
    state.agree_acc = a * state.agree_acc + (1 - a) * agree
    state.batches_seen += 1
    return state


def task_affinity(state: AffinityState) -> np.ndarray:
    """Bias-corrected agreement matrix, symmetric with unit diagonal."""
    a = state.pair_agree
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 1.0)
    return np.clip(a, 0.0, 1.0)


def branch_affinity(a, branch_tasks) -> np.ndarray:
    """Lift task affinity to branches serving sets of tasks.

    For branches ``k`` and ``l``: average over the tasks of ``k`` of the least
    affine task of ``l``, and vice versa; the two directions are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    sets = [sorted(ts) for ts in branch_tasks]
    if not sets:
        raise ContractError("no branches given")
    if any(not ts for ts in sets):
        raise ContractError("every branch must serve at least one task")
    flat = [t for ts in sets for t in ts]
    if len(flat) != len(set(flat)):
        raise ContractError("branch task sets must be disjoint")
    c = len(sets)
    one_way = np.empty((c, c))
    for k in range(c):
        for l in range(c):
            one_way[k, l] = a[np.ix_(sets[k], sets[l])].min(axis=1).mean()
    ab = 0.5 * (one_way + one_way.T)
    np.fill_diagonal(ab, 1.0)
    return ab


def matrix_csv(values, names) -> str:
    """CSV with a header row and a header column of names."""
    buf = io.StringIO()
    buf.write("," + ",".join(names) + "\n")
    for name, row in zip(names, np.asarray(values)):
        buf.write(name + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()
