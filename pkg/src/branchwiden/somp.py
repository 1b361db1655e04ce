"""Greedy simultaneous orthogonal matching pursuit over the rows of a weight
matrix, and filter-selection initialization of a thin model from a wide one."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .linalg import as_matrix, least_squares_fit
from .nn import BATCHNORM, CONV, DENSE, HEAD, POOL
from .tree import ModelTree


@dataclass(frozen=True)
class SompResult:
    selected: tuple[int, ...]
    residual_history: tuple[float, ...]

    @property
    def residual(self) -> float:
        return self.residual_history[-1]


def somp_select(w, d_prime: int) -> SompResult:
    """Pick ``d_prime`` rows of ``w`` whose span best reconstructs every row.

    Each step scores the unselected rows ``u`` by ``||R u^T|| / ||u||`` where
    ``R`` is the current residual, takes the best (lowest index on ties), and
    re-projects all rows of ``w`` onto the span of the selected set.
    """
    w = as_matrix(w)
    rows = w.shape[0]
    if not 1 <= d_prime <= rows:
        raise ContractError(f"d_prime={d_prime} must lie in [1, {rows}]")
    norms = np.linalg.norm(w, axis=1)
    if not np.any(norms > 0):
        raise ContractError("degenerate weight matrix: all rows are zero")

    resid = w
    selected: list[int] = []
    history: list[float] = []
    available = norms > 0
    for _ in range(d_prime):
        if not np.any(available):
            # only zero rows remain; fill by index
            available = np.ones(rows, dtype=bool)
            available[selected] = False
            idx = int(np.flatnonzero(available)[0])
        else:
            corr = np.linalg.norm(resid @ w.T, axis=0)
            score = np.full(rows, -np.inf)
            score[available] = corr[available] / norms[available]
            idx = int(np.argmax(score))
        selected.append(idx)
        available[idx] = False
        coef, r = least_squares_fit(w, w[selected])
        resid = w - coef @ w[selected]
        history.append(r)
    return SompResult(tuple(selected), tuple(history))


def _column_index(keep, group: int) -> np.ndarray:
    keep = np.asarray(keep)
    return (keep[:, None] * group + np.arange(group)[None, :]).reshape(-1)


def somp_init_model(thin: ModelTree, wide: ModelTree) -> ModelTree:
    """Initialize an unbranched thin model from a wider one of the same layout.

    Layer by layer from the input: choose the thin layer's filters as a SOMP
    row subset of the wide layer (kept in ascending index order), carry the
    matching biases and batch-norm entries along, and drop the columns of the
    next wide layer that read from discarded filters. For inputs coming from a
    conv layer, each channel owns a contiguous group of columns (9 for a conv
    reader, H*W for a dense reader after flattening).
    """
    if thin.depth != wide.depth or thin.task_count != wide.task_count:
        raise ContractError("thin and wide models must have the same levels and tasks")
    if any(len(level) != 1 for level in thin.levels[:-1]) or any(len(level) != 1 for level in wide.levels[:-1]):
        raise ContractError("SOMP initialization needs unbranched models")
    out = thin.copy()
    keep = None  # retained output units of the previous parameterized level
    prev_width = None  # their count in the wide model
    for i in range(thin.depth):
        tspecs, wspecs = thin.level_specs[i], wide.level_specs[i]
        kind = tspecs[0].kind
        if kind != wspecs[0].kind:
            raise ContractError(f"level {i}: thin is {kind}, wide is {wspecs[0].kind}")
        if kind == POOL:
            continue
        if tspecs[0].out_size > wspecs[0].out_size:
            raise ContractError(f"level {i}: thin width {tspecs[0].out_size} exceeds wide width {wspecs[0].out_size}")
        blocks = list(zip(out.levels[i], wide.levels[i])) if kind == HEAD else [(out.levels[i][0], wide.levels[i][0])]
        sel = None
        for tblock, wblock in blocks:
            wmat = wblock.params[0].weight
            if keep is not None:
                group = wmat.shape[1] // prev_width
                wmat = wmat[:, _column_index(keep, group)]
            if wmat.shape[1] != tblock.params[0].weight.shape[1]:
                raise ContractError(f"level {i}: truncated wide input width {wmat.shape[1]} != thin {tblock.params[0].weight.shape[1]}")
            if kind == HEAD:
                sel = np.arange(wmat.shape[0])
            elif sel is None:
                sel = np.sort(np.asarray(somp_select(wmat, tspecs[0].out_size).selected))
            tblock.params[0].arrays["weight"] = wmat[sel].copy()
            tblock.params[0].arrays["bias"] = wblock.params[0].bias[sel].copy()
            for k, spec in enumerate(tspecs[1:], start=1):
                if spec.kind == BATCHNORM:
                    for name, arr in wblock.params[k].arrays.items():
                        tblock.params[k].arrays[name] = arr[sel].copy()
            for p in tblock.params:
                p.velocity.clear()
        if kind in (CONV, DENSE):
            keep, prev_width = sel, wspecs[0].out_size
    out.validate()
    return out

