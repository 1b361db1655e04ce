"""Layer forward/backward passes, the multi-task sigmoid loss and momentum SGD.

Tensors are plain float64 numpy arrays: images are ``(N, C, H, W)``, flat
features ``(N, D)``. Convolutions are fixed at 3x3, stride 1, padding 1 and
are computed as an im2col matrix product, so a conv weight is stored as a
``(out_channels, in_channels * 9)`` matrix whose row ``r`` is the vectorized
kernel of filter ``r`` (channel-major, then kernel row, then kernel column).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, EmptyDataError, TrainingError

KERNEL = 3
BN_MOMENTUM = 0.9
BN_EPS = 1e-8
SCORE_CLAMP = 1e-12

DENSE, CONV, POOL, BATCHNORM, RELU, HEAD = "dense", "conv", "pool", "batchnorm", "relu", "head"
PARAMETERIZED = (DENSE, CONV, HEAD)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int = 0
    out_size: int = 0

    def __post_init__(self):
        if self.kind not in (DENSE, CONV, POOL, BATCHNORM, RELU, HEAD):
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.kind in (DENSE, CONV, HEAD, BATCHNORM) and (self.in_size < 1 or self.out_size < 1):
            raise ContractError(f"{self.kind} layer needs positive widths, got {self.in_size}->{self.out_size}")

    @property
    def width(self) -> int:
        return self.out_size

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in": self.in_size, "out": self.out_size}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], int(d["in"]), int(d["out"]))


def Dense(in_width: int, out_width: int) -> LayerSpec:
    return LayerSpec(DENSE, in_width, out_width)


def Conv2d(in_channels: int, out_channels: int) -> LayerSpec:
    return LayerSpec(CONV, in_channels, out_channels)


def MaxPool2x2() -> LayerSpec:
    return LayerSpec(POOL)


def BatchNorm(channels: int) -> LayerSpec:
    return LayerSpec(BATCHNORM, channels, channels)


def ReLU() -> LayerSpec:
    return LayerSpec(RELU)


def SigmoidHead(in_width: int, units: int = 1) -> LayerSpec:
    return LayerSpec(HEAD, in_width, units)


# names of arrays per kind, in serialization order; the first ones are trainable
ARRAY_NAMES = {
    DENSE: ("weight", "bias"),
    CONV: ("weight", "bias"),
    HEAD: ("weight", "bias"),
    BATCHNORM: ("gamma", "beta", "running_mean", "running_var"),
    POOL: (),
    RELU: (),
}
TRAINABLE = {DENSE: 2, CONV: 2, HEAD: 2, BATCHNORM: 2, POOL: 0, RELU: 0}


@dataclass
class LayerParams:
    """Named parameter arrays of one layer plus its SGD velocity buffers."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __getattr__(self, name):
        arrays = self.__dict__.get("arrays", {})
        if name in arrays:
            return arrays[name]
        raise AttributeError(name)

    def copy(self) -> "LayerParams":
        return LayerParams(
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.velocity.items()},
        )

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def weight_shape(spec: LayerSpec) -> tuple[int, int]:
    if spec.kind == CONV:
        return spec.out_size, spec.in_size * KERNEL * KERNEL
    return spec.out_size, spec.in_size


def array_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind in (DENSE, CONV, HEAD):
        return {"weight": weight_shape(spec), "bias": (spec.out_size,)}
    if spec.kind == BATCHNORM:
        return {k: (spec.out_size,) for k in ARRAY_NAMES[BATCHNORM]}
    return {}


def init_params(spec: LayerSpec, rng: np.random.Generator) -> LayerParams:
    """He-style fan-in initialization; batch norm starts as the identity."""
    if spec.kind in (DENSE, CONV, HEAD):
        rows, fan_in = weight_shape(spec)
        w = rng.standard_normal((rows, fan_in)) * np.sqrt(2.0 / fan_in)
        return LayerParams({"weight": w, "bias": np.zeros(rows)})
    if spec.kind == BATCHNORM:
        c = spec.out_size
        return LayerParams(
            {"gamma": np.ones(c), "beta": np.zeros(c), "running_mean": np.zeros(c), "running_var": np.ones(c)}
        )
    return LayerParams()


def check_params(spec: LayerSpec, params: LayerParams) -> None:
    for name, shape in array_shapes(spec).items():
        arr = params.arrays.get(name)
        if arr is None or arr.shape != shape:
            got = None if arr is None else arr.shape
            raise ContractError(f"{spec.kind} parameter {name!r} should have shape {shape}, got {got}")


class Cache:
    """State saved by a forward pass; consumed by exactly one backward pass."""

    __slots__ = ("spec", "params", "mode", "data", "used")

    def __init__(self, spec, params, mode, **data):
        self.spec = spec
        self.params = params
        self.mode = mode
        self.data = data
        self.used = False


def im2col(x: np.ndarray) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N*H*W, C*9)`` patches for a padded 3x3 convolution."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))  # N, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * KERNEL * KERNEL)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, c, h, w = shape
    patches = cols.reshape(n, h, w, c, KERNEL, KERNEL)
    out = np.zeros((n, c, h + 2, w + 2))
    for i in range(KERNEL):
        for j in range(KERNEL):
            out[:, :, i : i + h, j : j + w] += patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, 1:-1, 1:-1]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def layer_forward(spec: LayerSpec, params: LayerParams, x: np.ndarray, mode: str = "train"):
    """Apply one layer. Returns ``(output, cache)``.

    In train mode batch norm normalizes with batch statistics and folds them
    into its running averages; in eval mode it uses the running averages.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    kind = spec.kind
    check_params(spec, params)

    if kind in (DENSE, HEAD):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != spec.in_size:
            raise ContractError(f"{kind} expects {spec.in_size} features, got {flat.shape[1]}")
        z = flat @ params.weight.T + params.bias
        if kind == DENSE:
            return z, Cache(spec, params, mode, x=flat, shape=x.shape)
        s = sigmoid(z)
        return s, Cache(spec, params, mode, x=flat, shape=x.shape, s=s)

    if kind == CONV:
        if x.ndim != 4 or x.shape[1] != spec.in_size:
            raise ContractError(f"conv expects (N, {spec.in_size}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        cols = im2col(x)
        out = cols @ params.weight.T + params.bias
        out = out.reshape(n, h, w, spec.out_size).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), Cache(spec, params, mode, cols=cols, shape=x.shape)

    if kind == POOL:
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ContractError(f"2x2 pooling needs even spatial dims, got {x.shape}")
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        arg = np.argmax(blocks, axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, Cache(spec, params, mode, arg=arg, shape=x.shape)

    if kind == BATCHNORM:
        if x.ndim not in (2, 4) or x.shape[1] != spec.out_size:
            raise ContractError(f"batch norm expects {spec.out_size} channels, got {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        if mode == "train":
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            params.arrays["running_mean"] = BN_MOMENTUM * params.running_mean + (1 - BN_MOMENTUM) * mu
            params.arrays["running_var"] = BN_MOMENTUM * params.running_var + (1 - BN_MOMENTUM) * var
        else:
            mu, var = params.running_mean, params.running_var
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * params.gamma.reshape(bshape) + params.beta.reshape(bshape)
        return out, Cache(spec, params, mode, xhat=xhat, inv=inv, axes=axes, bshape=bshape)

    # relu
    return np.maximum(x, 0.0), Cache(spec, params, mode, mask=x > 0)


def layer_backward(cache: Cache, grad_output: np.ndarray, logits: bool = False):
    """Reverse-mode pass for one layer. Returns ``(grad_input, grads)``.

    ``grads`` maps trainable parameter names to their gradients. For a sigmoid
    head, ``logits=True`` means ``grad_output`` is already taken with respect
    to the pre-sigmoid logits.
    """
    if cache.used:
        raise ContractError("forward cache was already consumed by a backward pass")
    cache.used = True
    spec, p, d = cache.spec, cache.params, cache.data
    g = np.asarray(grad_output, dtype=np.float64)

    if spec.kind in (DENSE, HEAD):
        if spec.kind == HEAD and not logits:
            s = d["s"]
            g = g * s * (1.0 - s)
        gx = (g @ p.weight).reshape(d["shape"])
        return gx, {"weight": g.T @ d["x"], "bias": g.sum(axis=0)}

    if spec.kind == CONV:
        n, c, h, w = d["shape"]
        gflat = g.transpose(0, 2, 3, 1).reshape(n * h * w, spec.out_size)
        grads = {"weight": gflat.T @ d["cols"], "bias": gflat.sum(axis=0)}
        return col2im(gflat @ p.weight, d["shape"]), grads

    if spec.kind == POOL:
        n, c, h, w = d["shape"]
        blocks = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(blocks, d["arg"][..., None], g[..., None], axis=-1)
        gx = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return gx, {}

    if spec.kind == BATCHNORM:
        xhat, inv, axes, bshape = d["xhat"], d["inv"], d["axes"], d["bshape"]
        grads = {"gamma": (g * xhat).sum(axis=axes), "beta": g.sum(axis=axes)}
        gxhat = g * p.gamma.reshape(bshape)
        if cache.mode == "eval":
            return gxhat * inv.reshape(bshape), grads
        m = g.size / spec.out_size
        gx = (
            inv.reshape(bshape)
            / m
            * (m * gxhat - gxhat.sum(axis=axes).reshape(bshape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        )
        return gx, grads

    return g * d["mask"], {}


def multi_task_bce(scores, labels, mask=None):
    """Mean binary cross-entropy over the masked (sample, task) entries.

    Returns ``(loss, grad_logits)`` where ``grad_logits`` is the gradient with
    respect to the pre-sigmoid logits, ``mask * (s - t) / count``.
    """
    s = np.clip(np.asarray(scores, dtype=np.float64), SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    t = np.asarray(labels, dtype=np.float64)
    m = np.ones_like(s) if mask is None else np.asarray(mask, dtype=np.float64)
    if s.shape != t.shape or s.shape != m.shape:
        raise ContractError(f"scores {s.shape}, labels {t.shape} and mask {m.shape} must match")
    count = m.sum()
    if count == 0:
        raise EmptyDataError("mask selects no (sample, task) entries")
    per = -(t * np.log(s) + (1.0 - t) * np.log1p(-s))
    loss = float((per * m).sum() / count)
    return loss, m * (s - t) / count


def sgd_step(params: list[LayerParams], grads: list[dict], lr: float, momentum: float = 0.0, names=None):
    """Classical momentum update ``v <- momentum*v - lr*g; p <- p + v``, in place."""
    if lr < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
    for i, g in enumerate(grads):
        for k, v in g.items():
            if not np.all(np.isfinite(v)):
                label = names[i] if names else f"layer {i}"
                raise TrainingError(f"non-finite gradient for {k!r} in {label}")
    for p, g in zip(params, grads):
        for k, gk in g.items():
            vel = p.velocity.get(k)
            vel = -lr * gk if vel is None else momentum * vel - lr * gk
            p.velocity[k] = vel
            p.arrays[k] = p.arrays[k] + vel
    return params
