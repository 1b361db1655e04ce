"""Tree-structured multi-task networks and the function-preserving widening step.

A :class:`ModelTree` is a stack of levels from input to output. Each level
holds one or more :class:`Block` objects that share the same layer specs;
every block points at its parent block on the level below, so the blocks
form a tree rooted at the input. The output level holds one single-unit
sigmoid head per task.

The lowest level holding more than one block is the *junction*; all levels
below it are a shared trunk. Widening clones the trunk blocks between the
active layer and the junction and re-parents the junction's branches onto the
clones according to a :class:`GroupingFunction`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ContractError
from .nn import CONV, DENSE, HEAD, POOL, LayerParams, LayerSpec


@dataclass(frozen=True)
class GroupingFunction:
    """Maps each of ``c`` existing branches to one of ``d`` new branches (0-based)."""

    assignment: tuple[int, ...]

    def __post_init__(self):
        a = tuple(int(v) for v in self.assignment)
        object.__setattr__(self, "assignment", a)
        if not a:
            raise ContractError("grouping must cover at least one branch")
        if min(a) < 0 or set(a) != set(range(max(a) + 1)):
            raise ContractError(f"grouping {a} is not a surjection onto 0..d-1")

    @property
    def c(self) -> int:
        return len(self.assignment)

    @property
    def d(self) -> int:
        return max(self.assignment) + 1

    def groups(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.d)]
        for branch, g in enumerate(self.assignment):
            out[g].append(branch)
        return out

    @classmethod
    def canonical(cls, labels) -> "GroupingFunction":
        """Relabel clusters by order of first appearance."""
        remap: dict[int, int] = {}
        return cls(tuple(remap.setdefault(int(v), len(remap)) for v in labels))


@dataclass
class Block:
    id: int
    params: list[LayerParams]
    parent: int | None


@dataclass
class ModelTree:
    input_shape: tuple[int, ...]
    level_specs: list[tuple[LayerSpec, ...]]
    levels: list[list[Block]]
    leaf_tasks: dict[int, frozenset[int]]
    active_layer: int | None
    task_names: list[str]
    next_id: int = 0
    config: dict = field(default_factory=dict)

    # ---- structure queries -------------------------------------------------

    @property
    def task_count(self) -> int:
        return len(self.task_names)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def level_kind(self, level: int) -> str:
        return self.level_specs[level][0].kind

    def parameterized_levels(self, include_heads: bool = False) -> list[int]:
        kinds = (CONV, DENSE, HEAD) if include_heads else (CONV, DENSE)
        return [i for i, specs in enumerate(self.level_specs) if specs[0].kind in kinds]

    def block(self, block_id: int) -> Block:
        for level in self.levels:
            for b in level:
                if b.id == block_id:
                    return b
        raise KeyError(block_id)

    def children(self, level: int, block_id: int) -> list[Block]:
        if level + 1 >= self.depth:
            return []
        return [b for b in self.levels[level + 1] if b.parent == block_id]

    def junction_level(self) -> int:
        """Lowest level with more than one block (the output level if none)."""
        for i, level in enumerate(self.levels):
            if len(level) > 1:
                return i
        return self.depth - 1

    def tasks_under(self, level: int, block_id: int) -> frozenset[int]:
        if level == self.depth - 1:
            return self.leaf_tasks[block_id]
        out: set[int] = set()
        for ch in self.children(level, block_id):
            out |= self.tasks_under(level + 1, ch.id)
        return frozenset(out)

    def branch_tasks(self, level: int | None = None) -> list[frozenset[int]]:
        """Task sets served by each block at ``level`` (default: the junction)."""
        level = self.junction_level() if level is None else level
        return [self.tasks_under(level, b.id) for b in self.levels[level]]

    def pools_above(self, level: int) -> int:
        return sum(1 for i in range(level + 1, self.depth) if self.level_kind(i) == POOL)

    def task_path(self, task: int) -> list[Block]:
        """Blocks from input to the head of ``task``."""
        leaf = next(bid for bid, ts in self.leaf_tasks.items() if task in ts)
        path = [self.block(leaf)]
        while path[-1].parent is not None:
            path.append(self.block(path[-1].parent))
        return path[::-1]

    def param_count(self) -> int:
        return sum(p.count() for level in self.levels for b in level for p in b.params)

    def copy(self) -> "ModelTree":
        return copy.deepcopy(self)

    def validate(self) -> None:
        for i, level in enumerate(self.levels):
            if not level:
                raise ContractError(f"level {i} is empty")
            ids_below = {b.id for b in self.levels[i - 1]} if i else {None}
            for b in level:
                if b.parent not in ids_below:
                    raise ContractError(f"block {b.id} at level {i} has invalid parent {b.parent}")
                if len(b.params) != len(self.level_specs[i]):
                    raise ContractError(f"block {b.id} has {len(b.params)} layers, level {i} has {len(self.level_specs[i])}")
                for spec, p in zip(self.level_specs[i], b.params):
                    nn.check_params(spec, p)
        seen: list[int] = []
        for bid in (b.id for b in self.levels[-1]):
            seen.extend(self.leaf_tasks[bid])
        if sorted(seen) != list(range(self.task_count)):
            raise ContractError(f"leaf task sets {self.leaf_tasks} do not partition {self.task_count} tasks")
        j = self.junction_level()
        if any(len(self.levels[i]) != 1 for i in range(j)):
            raise ContractError("levels below the junction must hold a single block")


# ---- construction -------------------------------------------------------------


def group_levels(template) -> list[list[LayerSpec]]:
    """Split a flat layer list into levels; batch norm and ReLU join the layer before."""
    levels: list[list[LayerSpec]] = []
    for spec in template:
        if spec.kind in (CONV, DENSE, POOL, HEAD):
            levels.append([spec])
        else:
            if not levels:
                raise ContractError(f"template cannot start with {spec.kind}")
            levels[-1].append(spec)
    return levels


def desk_template(input_shape=(1, 16, 16), conv=(64, 128), dense=(512, 512)) -> list[LayerSpec]:
    """Conv-BN-ReLU, pool, Conv-BN-ReLU, pool, Dense-BN-ReLU, Dense-BN-ReLU.

    Flat inputs (``input_shape`` of length 1) drop the convolutional part.
    """
    out: list[LayerSpec] = []
    if len(input_shape) == 3:
        c, h, w = input_shape
        for width in conv:
            out += [nn.Conv2d(c, width), nn.BatchNorm(width), nn.ReLU(), nn.MaxPool2x2()]
            c, h, w = width, h // 2, w // 2
        feat = c * h * w
    else:
        feat = input_shape[0]
    for width in dense:
        out += [nn.Dense(feat, width), nn.BatchNorm(width), nn.ReLU()]
        feat = width
    return out


def vgg16_template(input_shape=(3, 224, 224)) -> list[LayerSpec]:
    """VGG-16 layer plan (13 conv, 5 pools, two 4096-wide dense layers), with BN."""
    plan = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
    c, h, w = input_shape
    out: list[LayerSpec] = []
    for item in plan:
        if item == "M":
            out.append(nn.MaxPool2x2())
            h, w = h // 2, w // 2
        else:
            out += [nn.Conv2d(c, item), nn.BatchNorm(item), nn.ReLU()]
            c = item
    feat = c * h * w
    for width in (4096, 4096):
        out += [nn.Dense(feat, width), nn.BatchNorm(width), nn.ReLU()]
        feat = width
    return out


def _resize_levels(template, omega: int, input_shape) -> list[tuple[LayerSpec, ...]]:
    levels = group_levels(template)
    shape = tuple(input_shape)
    out: list[tuple[LayerSpec, ...]] = []
    for specs in levels:
        head = specs[0]
        if head.kind == HEAD:
            raise ContractError("template must end before the task heads")
        if head.kind == CONV:
            if len(shape) != 3:
                raise ContractError("convolution needs an image-shaped input")
            width = min(omega, head.out_size)
            first = nn.Conv2d(shape[0], width)
            shape = (width, shape[1], shape[2])
        elif head.kind == DENSE:
            width = min(2 * omega, head.out_size)
            first = nn.Dense(int(np.prod(shape)), width)
            shape = (width,)
        else:
            if len(shape) != 3:
                raise ContractError("pooling needs an image-shaped input")
            first = head
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        rest = []
        for spec in specs[1:]:
            rest.append(nn.BatchNorm(shape[0]) if spec.kind == nn.BATCHNORM else spec)
        out.append((first, *rest))
    return out


def output_shape(level_specs, input_shape) -> tuple[int, ...]:
    shape = tuple(input_shape)
    for specs in level_specs:
        k = specs[0]
        if k.kind == CONV:
            shape = (k.out_size, shape[1], shape[2])
        elif k.kind == POOL:
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        else:
            shape = (k.out_size,)
    return shape


def build_thin(template, omega: int, task_count: int, input_shape=(1, 16, 16), seed: int = 0, task_names=None) -> ModelTree:
    """Thin-omega model: conv widths ``min(omega, w)``, dense widths ``min(2*omega, w)``.

    The output level holds one single-unit sigmoid head per task, i.e. the
    initial junction with ``task_count`` branches sitting on a shared trunk.
    """
    if omega < 1:
        raise ContractError(f"omega must be >= 1, got {omega}")
    if task_count < 1:
        raise ContractError(f"task_count must be >= 1, got {task_count}")
    level_specs = _resize_levels(template, omega, input_shape)
    feat = int(np.prod(output_shape(level_specs, input_shape)))
    level_specs.append((nn.SigmoidHead(feat, 1),))
    rng = np.random.default_rng(seed)
    levels: list[list[Block]] = []
    next_id = 0
    for i, specs in enumerate(level_specs[:-1]):
        params = [nn.init_params(s, rng) for s in specs]
        levels.append([Block(next_id, params, None if i == 0 else next_id - 1)])
        next_id += 1
    trunk_top = next_id - 1 if levels else None
    heads = []
    for t in range(task_count):
        heads.append(Block(next_id, [nn.init_params(level_specs[-1][0], rng)], trunk_top))
        next_id += 1
    levels.append(heads)
    names = list(task_names) if task_names is not None else [f"task{t}" for t in range(task_count)]
    if len(names) != task_count:
        raise ContractError(f"{len(names)} task names for {task_count} tasks")
    tree = ModelTree(
        input_shape=tuple(input_shape),
        level_specs=level_specs,
        levels=levels,
        leaf_tasks={b.id: frozenset({t}) for t, b in enumerate(heads)},
        active_layer=None,
        task_names=names,
        next_id=next_id,
    )
    hidden = tree.parameterized_levels()
    tree.active_layer = hidden[-1] if hidden else None
    return tree


# ---- widening -----------------------------------------------------------------


def widen_at(tree: ModelTree, grouping: GroupingFunction) -> ModelTree:
    """Clone the trunk from the active layer up to the junction into ``d`` copies.

    Junction branch ``i`` is re-parented onto copy ``grouping.assignment[i]``.
    Every copy starts from the exact parameters (batch-norm state included)
    of the block it replaces, so the network function is unchanged.
    """
    if tree.active_layer is None:
        raise ContractError("no active layer left to widen")
    j = tree.junction_level()
    branches = tree.levels[j]
    if grouping.c != len(branches):
        raise ContractError(f"grouping covers {grouping.c} branches, junction has {len(branches)}")
    if grouping.d == 1:
        raise ContractError("no-op widening requested")
    if grouping.d > grouping.c:
        raise ContractError(f"cannot create {grouping.d} branches from {grouping.c}")

    new = tree.copy()
    lo = new.active_layer
    for level in range(lo, j):
        if len(new.levels[level]) != 1:
            raise ContractError(f"level {level} between active layer and junction is not a trunk")
    top_ids = []
    for g in range(grouping.d):
        parent = new.levels[lo - 1][0].id if lo > 0 else None
        for level in range(lo, j):
            old = tree.levels[level][0]
            blk = Block(new.next_id, [p.copy() for p in old.params], parent)
            new.next_id += 1
            if g == 0:
                new.levels[level] = []
            new.levels[level].append(blk)
            parent = blk.id
        top_ids.append(parent)
    for i, branch in enumerate(new.levels[j]):
        branch.parent = top_ids[grouping.assignment[i]]
    below = [lv for lv in new.parameterized_levels() if lv < lo]
    new.active_layer = below[-1] if below else None
    return new


# ---- forward / backward -------------------------------------------------------


class TreeCache:
    def __init__(self):
        self.layer_caches: dict[int, list] = {}
        self.used = False


def tree_forward(tree: ModelTree, x, mode: str = "train"):
    """Run every block once and route activations along the tree.

    Returns ``(scores, cache)`` with ``scores`` of shape ``(N, T)`` and column
    ``t`` holding task ``t``'s sigmoid output.
    """
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:]) != tree.input_shape:
        raise ContractError(f"input shape {x.shape[1:]} does not match model input {tree.input_shape}")
    cache = TreeCache()
    acts: dict[int | None, np.ndarray] = {None: x}
    scores = np.empty((x.shape[0], tree.task_count))
    last = tree.depth - 1
    for i, level in enumerate(tree.levels):
        for b in level:
            h = acts[b.parent]
            caches = []
            for spec, p in zip(tree.level_specs[i], b.params):
                h, c = nn.layer_forward(spec, p, h, mode)
                caches.append(c)
            cache.layer_caches[b.id] = caches
            if i == last:
                for t in tree.leaf_tasks[b.id]:
                    scores[:, t] = h[:, 0]
            else:
                acts[b.id] = h
        if i > 0:
            # free activations no longer needed
            for b in tree.levels[i - 1]:
                acts.pop(b.id, None)
    return scores, cache


def tree_backward(tree: ModelTree, cache: TreeCache, grad_logits) -> dict[int, list[dict]]:
    """Gradients for every block, given the gradient w.r.t. the head logits.

    A block feeding several branches receives the sum of their input
    gradients, accumulated in level order.
    """
    if cache.used:
        raise ContractError("tree cache was already consumed by a backward pass")
    cache.used = True
    g = np.asarray(grad_logits, dtype=np.float64)
    grads: dict[int, list[dict]] = {}
    upstream: dict[int, np.ndarray] = {}
    last = tree.depth - 1
    for i in range(last, -1, -1):
        for b in tree.levels[i]:
            if i == last:
                (t,) = tree.leaf_tasks[b.id]
                h = g[:, [t]]
            else:
                h = upstream.pop(b.id)
            layer_grads = [None] * len(b.params)
            for k in range(len(b.params) - 1, -1, -1):
                h, lg = nn.layer_backward(cache.layer_caches[b.id][k], h, logits=(i == last))
                layer_grads[k] = lg
            grads[b.id] = layer_grads
            if b.parent is not None:
                if b.parent in upstream:
                    upstream[b.parent] = upstream[b.parent] + h
                else:
                    upstream[b.parent] = h
    return grads


def all_params(tree: ModelTree):
    """Parameters and matching names in a fixed (level, block, layer) order."""
    params, names = [], []
    for i, level in enumerate(tree.levels):
        for b in level:
            for k, p in enumerate(b.params):
                params.append(p)
                names.append(f"level {i} block {b.id} layer {k} ({tree.level_specs[i][k].kind})")
    return params, names


def flat_grads(tree: ModelTree, grads: dict[int, list[dict]]) -> list[dict]:
    return [g for level in tree.levels for b in level for g in grads[b.id]]
