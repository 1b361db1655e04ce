import numpy as np
import pytest

from branchwiden import nn
from branchwiden.tree import GroupingFunction, build_thin, desk_template, widen_at


def numeric_grad(f, arr, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        fp = f()
        arr[i] = old - step
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b, floor=1e-5):
    """Max-abs difference relative to the gradient scale.

    The floor keeps gradients that are identically zero (a bias feeding batch
    norm) from turning finite-difference round-off (~1e-11) into a large ratio.
    """
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(floor, np.max(np.abs(a)) + np.max(np.abs(b))))


def small_template(input_shape=(1, 8, 8)):
    return desk_template(input_shape, conv=(4, 4), dense=(6, 6))


@pytest.fixture
def tiny_tree():
    return build_thin(small_template(), omega=3, task_count=4, input_shape=(1, 8, 8), seed=0)


def perturb_bn(tree, rng):
    """Give batch-norm layers non-trivial scale/shift so gradient checks see them."""
    for level, specs in zip(tree.levels, tree.level_specs):
        for b in level:
            for spec, p in zip(specs, b.params):
                if spec.kind == nn.BATCHNORM:
                    p.arrays["gamma"] = 1.0 + 0.3 * rng.standard_normal(spec.out_size)
                    p.arrays["beta"] = 0.3 * rng.standard_normal(spec.out_size)


def random_grouping(c, d, rng):
    labels = np.concatenate([np.arange(d), rng.integers(0, d, c - d)])
    return GroupingFunction(tuple(rng.permutation(labels)))


def random_widened(seed, task_count=5, steps=None):
    rng = np.random.default_rng(seed)
    tree = build_thin(small_template(), 3, task_count, (1, 8, 8), seed=seed)
    perturb_bn(tree, rng)
    steps = rng.integers(0, 4) if steps is None else steps
    for _ in range(steps):
        if tree.active_layer is None:
            break
        c = len(tree.levels[tree.junction_level()])
        if c < 2:
            break
        tree = widen_at(tree, random_grouping(c, int(rng.integers(2, c + 1)), rng))
    return tree, rng


ACCEPTANCE_LINES = []


def verdict(number: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
