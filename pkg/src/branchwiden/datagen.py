"""Synthetic multi-task data with planted task groups, and its binary file format.

Every group owns a hidden feature map ``phi_g(x) = P2 tanh(P1 x)`` that reads
only the group's own region of the input; each task in the group thresholds a
random direction of that map. A per-sample *salience* gate splits the input
energy between regions, so on a given sample one group's signal is strong
(its tasks are easy together) while the others' is faint (their tasks are
hard together).

Dataset file layout (little-endian)::

    b"BGD1" | u32 N | u32 rank | u32 dims[rank] | u32 T
    | f64 inputs[N * prod(dims)] | u8 labels[N * T]
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, CorruptionError, EmptyDataError

MAGIC = b"BGD1"


@dataclass
class SyntheticSpec:
    task_count: int = 6
    group_count: int = 2
    group_assignment: list[int] | None = None
    input_shape: tuple[int, ...] = (1, 16, 16)
    samples: int = 8000
    label_noise: float = 0.0
    seed: int = 0
    hidden: int = 16
    feature_dim: int = 4
    salience: float = 20.0
    task_spread: float = 0.15
    coarse: int = 2

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.group_assignment is None:
            self.group_assignment = [t * self.group_count // self.task_count for t in range(self.task_count)]
        self.group_assignment = [int(g) for g in self.group_assignment]
        if not 1 <= self.group_count <= self.task_count:
            raise ContractError(f"need 1 <= groups <= tasks, got {self.group_count} groups, {self.task_count} tasks")
        if len(self.group_assignment) != self.task_count:
            raise ContractError("group_assignment must list one group per task")
        if set(self.group_assignment) != set(range(self.group_count)):
            raise ContractError("every group must own at least one task")
        if not 0.0 <= self.label_noise < 0.5:
            raise ContractError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")
        if self.samples < 1:
            raise ContractError("samples must be >= 1")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    task_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractError("inputs and labels disagree on sample count")
        if self.labels.ndim != 2:
            raise ContractError("labels must be N x T")
        if np.any(self.labels > 1):
            raise ContractError("labels must be 0/1")
        if not self.task_names:
            self.task_names = [f"task{t}" for t in range(self.labels.shape[1])]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def task_count(self) -> int:
        return self.labels.shape[1]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], list(self.task_names))

    def split(self, val_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle split into (train, validation)."""
        if not 0.0 < val_fraction < 1.0:
            raise ContractError(f"val_fraction must lie in (0, 1), got {val_fraction}")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = max(1, int(round(val_fraction * len(self))))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))


def _regions(input_shape, groups: int) -> list[np.ndarray]:
    """Flat input indices owned by each group: vertical stripes of an image,
    contiguous chunks of a flat vector."""
    idx = np.arange(int(np.prod(input_shape))).reshape(input_shape)
    if len(input_shape) == 3:
        return [part.reshape(-1) for part in np.array_split(idx, groups, axis=2)]
    return list(np.array_split(idx, groups))


def _projection(rng, rows: int, input_shape, region: np.ndarray, coarse: int = 4) -> np.ndarray:
    """Unit-norm random projections supported on ``region``. For images they are
    piecewise constant over ``coarse x coarse`` cells, i.e. they read local
    averages."""
    size = int(np.prod(input_shape))
    if len(input_shape) == 3 and input_shape[1] % coarse == 0 and input_shape[2] % coarse == 0:
        c, h, w = input_shape
        small = rng.standard_normal((rows, c, coarse, coarse))
        full = np.repeat(np.repeat(small, h // coarse, axis=2), w // coarse, axis=3).reshape(rows, -1)
    else:
        full = rng.standard_normal((rows, size))
    out = np.zeros((rows, size))
    out[:, region] = full[:, region]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _draw(spec: SyntheticSpec):
    rng = np.random.default_rng(spec.seed)
    n, g_count = spec.samples, spec.group_count
    regions = _regions(spec.input_shape, g_count)
    r = rng.standard_normal((n, g_count)) * spec.salience
    r -= r.max(axis=1, keepdims=True)
    gates = np.exp(r)
    gates = g_count * gates / gates.sum(axis=1, keepdims=True)
    scale = np.empty((n, int(np.prod(spec.input_shape))))
    for g, region in enumerate(regions):
        scale[:, region] = np.sqrt(gates[:, [g]])
    x_flat = rng.standard_normal(scale.shape) * scale

    feats = []
    for g in range(g_count):
        p1 = _projection(rng, spec.hidden, spec.input_shape, regions[g], spec.coarse)
        p2 = rng.standard_normal((spec.feature_dim, spec.hidden)) / np.sqrt(spec.hidden)
        feats.append(np.tanh(x_flat @ p1.T) @ p2.T)
    return rng, x_flat.reshape(n, *spec.input_shape), feats


def planted_features(spec: SyntheticSpec) -> list[np.ndarray]:
    """The per-group hidden features ``phi_g`` behind ``generate(spec)``."""
    return _draw(spec)[2]


def generate(spec: SyntheticSpec) -> tuple[Dataset, dict]:
    """Draw a dataset and its ground-truth record (task -> planted group).

    Inputs are standard normal noise whose regions are rescaled per sample by
    ``sqrt(gate_g)``, where the gates are ``G * softmax(salience * r)`` for a
    standard normal ``r`` (so they average one; ``salience=0`` leaves the
    inputs exactly standard normal). Task ``i`` of group ``g`` is positive when
    ``v_i . phi_g(x) + b_i > 0``, with ``v_i`` drawn around a group center and
    ``b_i`` the median offset that balances the classes. Finally each label
    flips with probability ``label_noise``.
    """
    rng, x, feats = _draw(spec)
    n, t_count, g_count = spec.samples, spec.task_count, spec.group_count
    centers = [rng.standard_normal(spec.feature_dim) for _ in range(g_count)]

    labels = np.empty((n, t_count), dtype=np.uint8)
    for i, g in enumerate(spec.group_assignment):
        v = centers[g] + spec.task_spread * rng.standard_normal(spec.feature_dim)
        z = feats[g] @ v
        z = (z - z.mean()) / (z.std() + 1e-12)
        labels[:, i] = z - np.median(z) > 0
    if spec.label_noise > 0:
        flips = rng.random((n, t_count)) < spec.label_noise
        labels ^= flips.astype(np.uint8)

    names = [f"g{g}t{i}" for i, g in enumerate(spec.group_assignment)]
    truth = {
        "task_names": names,
        "group_assignment": list(spec.group_assignment),
        "groups": [[names[i] for i, g in enumerate(spec.group_assignment) if g == k] for k in range(g_count)],
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
    }
    return Dataset(x, labels, names), truth


def dumps(data: Dataset) -> bytes:
    shape = data.input_shape
    header = MAGIC + struct.pack("<II", len(data), len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    header += struct.pack("<I", data.task_count)
    return header + data.inputs.astype("<f8").tobytes() + data.labels.astype(np.uint8).tobytes()


def loads(raw: bytes, task_names=None) -> Dataset:
    if raw[:4] != MAGIC:
        raise CorruptionError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4
    try:
        n, rank = struct.unpack_from("<II", raw, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        (t,) = struct.unpack_from("<I", raw, pos)
        pos += 4
    except struct.error as exc:
        raise CorruptionError(f"truncated header ({len(raw)} bytes)") from exc
    if n == 0:
        raise EmptyDataError("dataset declares zero samples")
    feat = int(np.prod(dims))
    expected = pos + n * feat * 8 + n * t
    if len(raw) != expected:
        raise CorruptionError(f"dataset should be {expected} bytes, got {len(raw)}")
    x = np.frombuffer(raw, dtype="<f8", count=n * feat, offset=pos).reshape(n, *dims).astype(np.float64)
    y = np.frombuffer(raw, dtype=np.uint8, count=n * t, offset=pos + n * feat * 8).reshape(n, t).copy()
    return Dataset(x, y, list(task_names) if task_names else [])


def save(data: Dataset, path, truth: dict | None = None) -> None:
    """Write the dataset file and, if given, ``<path>.truth.json`` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(data))
    if truth is not None:
        truth_path(path).write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")


def truth_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".truth.json")


def load(path) -> Dataset:
    """Read a dataset file; task names come from the sibling truth file when present."""
    path = Path(path)
    names = None
    tp = truth_path(path)
    if tp.exists():
        names = json.loads(tp.read_text()).get("task_names")
    return loads(path.read_bytes(), names)


def load_truth(path) -> dict:
    return json.loads(truth_path(path).read_text())
