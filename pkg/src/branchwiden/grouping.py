"""Spectral grouping of branches and the complexity-aware choice of how many
branches to create."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .linalg import kmeans, sym_eig
from .tree import GroupingFunction


@dataclass(frozen=True)
class LossRow:
    d: int
    creation_cost: float
    separation_cost: float
    total: float
    grouping: GroupingFunction


@dataclass(frozen=True)
class WideningDecision:
    layer: int | None
    d_star: int
    grouping: GroupingFunction
    loss_per_d: tuple[LossRow, ...]
    pools_above: int = 0
    l0: float = 1.0
    alpha: float = 0.0

    def table_csv(self) -> str:
        lines = ["d,creation_cost,separation_cost,total,grouping"]
        for r in self.loss_per_d:
            g = " ".join(str(v) for v in r.grouping.assignment)
            lines.append(f"{r.d},{r.creation_cost!r},{r.separation_cost!r},{r.total!r},{g}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "d_star": self.d_star,
            "grouping": list(self.grouping.assignment),
            "pools_above": self.pools_above,
            "l0": self.l0,
            "alpha": self.alpha,
            "loss_per_d": [
                {"d": r.d, "creation_cost": r.creation_cost, "separation_cost": r.separation_cost,
                 "total": r.total, "grouping": list(r.grouping.assignment)}
                for r in self.loss_per_d
            ],
        }


def _check_affinity(a_b) -> np.ndarray:
    a = np.asarray(a_b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ContractError(f"affinity must be a non-empty square matrix, got shape {a.shape}")
    return a


def spectral_cluster(a_b, d: int, seed: int = 0) -> GroupingFunction:
    """Normalized-Laplacian spectral clustering of ``c`` branches into ``d`` groups.

    The ``d`` eigenvectors with smallest eigenvalues give each branch a
    ``d``-dimensional embedding; rows are scaled to unit length (zero rows
    are left alone) and grouped by k-means.
    """
    a = _check_affinity(a_b)
    c = a.shape[0]
    if not 1 <= d <= c:
        raise ContractError(f"d={d} must lie in [1, {c}]")
    if d == 1:
        return GroupingFunction((0,) * c)
    if d == c:
        return GroupingFunction(tuple(range(c)))
    deg = a.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(c) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    _, vecs = sym_eig(0.5 * (lap + lap.T))
    emb = vecs[:, :d]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.where(norms > 0, emb / np.where(norms > 0, norms, 1.0), emb)
    return GroupingFunction.canonical(kmeans(emb, d, seed))


def separation_cost(a_b, grouping: GroupingFunction) -> float:
    """Mean over new branches of ``1 - mean_k min_l A_b(k, l)`` within the branch."""
    a = _check_affinity(a_b)
    if grouping.c != a.shape[0]:
        raise ContractError(f"grouping covers {grouping.c} branches, affinity has {a.shape[0]}")
    costs = []
    for members in grouping.groups():
        sub = a[np.ix_(members, members)]
        costs.append(1.0 - sub.min(axis=1).mean())
    return float(np.mean(costs))


def widening_loss(d: int, p_l: int, l0: float, alpha: float, sep: float) -> float:
    """``(d - 1) * l0 * 2**p_l + alpha * sep``."""
    if d < 1:
        raise ContractError(f"d must be >= 1, got {d}")
    if l0 <= 0:
        raise ContractError(f"l0 must be positive, got {l0}")
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    return (d - 1) * l0 * 2.0**p_l + alpha * sep


def find_number_branches(a_b, p_l: int, l0: float, alpha: float, seed: int = 0, layer=None) -> WideningDecision:
    """Evaluate every ``d`` in ``1..c`` and keep the cheapest (smaller ``d`` on ties)."""
    a = _check_affinity(a_b)
    rows = []
    for d in range(1, a.shape[0] + 1):
        g = spectral_cluster(a, d, seed)
        sep = separation_cost(a, g)
        creation = (d - 1) * l0 * 2.0**p_l
        rows.append(LossRow(d, creation, sep, widening_loss(d, p_l, l0, alpha, sep), g))
    best = min(rows, key=lambda r: (r.total, r.d))
    return WideningDecision(layer, best.d, best.grouping, tuple(rows), p_l, l0, alpha)
