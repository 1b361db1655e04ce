"""Multi-round training with adaptive top-down widening.

Start from a thin shared network (optionally SOMP-initialized from a wide
one). Each round trains the current tree while estimating task affinity,
then decides at the active layer how many branches to create and which
junction branches to group together. A decision of a single branch freezes
the architecture; the final tree is then trained further.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .affinity import AffinityState, branch_affinity, record_batch, task_affinity
from .datagen import Dataset
from .errors import ContractError, TrainingError
from .grouping import WideningDecision, find_number_branches
from .somp import somp_init_model
from .tree import ModelTree, all_params, build_thin, desk_template, flat_grads, tree_backward, tree_forward, widen_at

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    omega: int = 16
    alpha: float = 2.0
    l0: float = 1.0
    ema_decay: float = 0.99
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    iters_per_round: int = 300
    final_iters: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.omega < 1:
            raise ContractError("omega must be >= 1")
        if self.alpha < 0 or self.l0 <= 0:
            raise ContractError("alpha must be >= 0 and l0 > 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ContractError("ema_decay must lie in (0, 1)")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0:
            raise ContractError("lr must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.iters_per_round < 1 or self.final_iters < 0:
            raise ContractError("batch_size and iters_per_round must be >= 1, final_iters >= 0")

    @property
    def name(self) -> str:
        return f"Branch-{self.omega}-{self.alpha:g}"

    def to_dict(self) -> dict:
        return asdict(self)


class BatchSampler:
    """Endless seeded mini-batches: a fresh permutation every epoch."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._perm = self.rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@dataclass
class RoundRecord:
    round: int
    active_layer: int | None
    branch_tasks: list[list[int]]
    affinity: np.ndarray
    branch_affinity: np.ndarray
    decision: WideningDecision
    losses: list[float]
    val_loss: float | None
    params_before: int
    params_after: int
    affinity_reset: bool = True

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "active_layer": self.active_layer,
            "branch_tasks": self.branch_tasks,
            "affinity": self.affinity.tolist(),
            "branch_affinity": self.branch_affinity.tolist(),
            "decision": self.decision.to_dict(),
            "val_loss": self.val_loss,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "affinity_reset": self.affinity_reset,
        }


@dataclass
class RunTrace:
    config: dict
    initialization: str
    rounds: list[RoundRecord] = field(default_factory=list)
    final_losses: list[float] = field(default_factory=list)
    final_val_loss: float | None = None
    final_params: int = 0

    @property
    def widenings(self) -> int:
        return sum(1 for r in self.rounds if r.decision.d_star > 1)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "initialization": self.initialization,
            "rounds": [r.to_dict() for r in self.rounds],
            "widenings": self.widenings,
            "final_val_loss": self.final_val_loss,
            "final_params": self.final_params,
        }

    def report(self) -> str:
        """Human-readable summary: one paragraph per round plus the final state."""
        name = self.config.get("omega"), self.config.get("alpha")
        out = [f"Branch-{name[0]}-{name[1]:g} ({self.initialization} init)"]
        for r in self.rounds:
            dec = r.decision
            out.append(f"round {r.round}: layer {r.active_layer}, {len(r.branch_tasks)} branches at junction, "
                       f"d*={dec.d_star}, grouping={list(dec.grouping.assignment)}, "
                       f"params {r.params_before} -> {r.params_after}")
            for row in dec.loss_per_d:
                out.append(f"  d={row.d} creation={row.creation_cost:.4f} separation={row.separation_cost:.4f} "
                           f"total={row.total:.4f}")
            if r.losses:
                out.append(f"  last batch loss {r.losses[-1]:.4f}")
        out.append(f"widenings: {self.widenings}, final params: {self.final_params}")
        if self.final_losses:
            out.append(f"final batch loss {self.final_losses[-1]:.4f}")
        if self.final_val_loss is not None:
            out.append(f"final validation loss {self.final_val_loss:.4f}")
        return "\n".join(out) + "\n"

    def loss_csv(self) -> str:
        lines = ["phase,round,iteration,batch_loss"]
        for r in self.rounds:
            lines += [f"round,{r.round},{i},{v!r}" for i, v in enumerate(r.losses)]
        lines += [f"final,,{i},{v!r}" for i, v in enumerate(self.final_losses)]
        return "\n".join(lines) + "\n"


def train_step(tree: ModelTree, x, y, lr: float, momentum: float, mask=None):
    """One forward/backward/SGD step. Returns ``(loss, scores)``."""
    scores, cache = tree_forward(tree, x, "train")
    loss, grad = nn.multi_task_bce(scores, y, mask)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    grads = tree_backward(tree, cache, grad)
    params, names = all_params(tree)
    nn.sgd_step(params, flat_grads(tree, grads), lr, momentum, names)
    return loss, scores


def train_iters(tree, data: Dataset, cfg: TrainConfig, sampler: BatchSampler, iters: int, state=None, where="") -> list[float]:
    losses = []
    for it in range(iters):
        idx = sampler.next()
        y = data.labels[idx].astype(np.float64)
        try:
            loss, scores = train_step(tree, data.inputs[idx], y, cfg.lr, cfg.momentum)
        except TrainingError as exc:
            raise TrainingError(f"{where} iteration {it}: {exc}") from exc
        if state is not None:
            record_batch(state, scores, y)
        losses.append(loss)
    return losses


def train_round(tree: ModelTree, data: Dataset, cfg: TrainConfig, state: AffinityState, sampler=None, where="round"):
    """Train for ``iters_per_round`` steps, folding every batch into ``state``.

    Parameters are updated in place; returns ``(tree, state, losses)``.
    """
    if cfg.iters_per_round < 1:
        raise ContractError("iters_per_round must be >= 1")
    sampler = sampler or BatchSampler(len(data), cfg.batch_size, cfg.seed)
    losses = train_iters(tree, data, cfg, sampler, cfg.iters_per_round, state, where)
    return tree, state, losses


def predict(tree: ModelTree, x, chunk: int = 1024) -> np.ndarray:
    out = [tree_forward(tree, x[i : i + chunk], "eval")[0] for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0)


def evaluate(tree: ModelTree, data: Dataset) -> dict:
    """Eval-mode accuracy (score >= 0.5 counts as positive) and mean BCE."""
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    scores = predict(tree, data.inputs)
    return metrics_from_scores(scores, data.labels)


def metrics_from_scores(scores, labels) -> dict:
    labels = np.asarray(labels)
    pred = (np.asarray(scores) >= 0.5).astype(labels.dtype)
    per_task = (pred == labels).mean(axis=0)
    loss, _ = nn.multi_task_bce(scores, labels)
    return {"accuracy": float(per_task.mean()), "bce": loss, "per_task_accuracy": [float(v) for v in per_task]}


def initial_model(data: Dataset, cfg: TrainConfig, wide: ModelTree | None = None) -> tuple[ModelTree, str]:
    template = desk_template(data.input_shape)
    thin = build_thin(template, cfg.omega, data.task_count, data.input_shape, seed=cfg.seed, task_names=data.task_names)
    if wide is None:
        return thin, "random"
    return somp_init_model(thin, wide), "somp"


def adaptive_widen_train(data: Dataset, cfg: TrainConfig, wide: ModelTree | None = None, val: Dataset | None = None):
    """Run the full thin-start / widen / freeze / final-train procedure.

    Returns ``(tree, trace)``. Affinity estimates restart after every
    widening since the network they describe has changed.
    """
    tree, how = initial_model(data, cfg, wide)
    tree.config = {"train": cfg.to_dict(), "name": cfg.name, "initialization": how}
    trace = RunTrace(config=cfg.to_dict(), initialization=how)
    sampler = BatchSampler(len(data), cfg.batch_size, cfg.seed)
    rnd = 0
    while tree.active_layer is not None:
        rnd += 1
        active = tree.active_layer
        state = AffinityState(data.task_count, cfg.ema_decay)
        _, _, losses = train_round(tree, data, cfg, state, sampler, where=f"round {rnd}")
        a = task_affinity(state)
        tasks = tree.branch_tasks()
        ab = branch_affinity(a, tasks)
        decision = find_number_branches(ab, tree.pools_above(active), cfg.l0, cfg.alpha, cfg.seed, layer=active)
        before = tree.param_count()
        if decision.d_star > 1:
            tree = widen_at(tree, decision.grouping)
        val_loss = evaluate(tree, val)["bce"] if val is not None else None
        trace.rounds.append(
            RoundRecord(rnd, active, [sorted(t) for t in tasks], a, ab, decision, losses, val_loss, before, tree.param_count())
        )
        log.info("round %d layer %d: d*=%d grouping=%s", rnd, active, decision.d_star, decision.grouping.assignment)
        if decision.d_star == 1:
            break
    trace.final_losses = train_iters(tree, data, cfg, sampler, cfg.final_iters, where="final training")
    trace.final_val_loss = evaluate(tree, val)["bce"] if val is not None else None
    trace.final_params = tree.param_count()
    return tree, trace


def train_plain(tree: ModelTree, data: Dataset, cfg: TrainConfig, iters: int, seed: int | None = None) -> list[float]:
    """Train a fixed architecture; returns the per-iteration batch losses."""
    sampler = BatchSampler(len(data), cfg.batch_size, cfg.seed if seed is None else seed)
    return train_iters(tree, data, cfg, sampler, iters, where="training")
