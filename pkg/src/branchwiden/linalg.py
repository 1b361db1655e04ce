"""Dense float64 kernels: products, QR least squares, symmetric eigensolve, k-means."""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

from .errors import ContractError

RANK_TOL = 1e-10


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError("matrix has non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def least_squares_fit(targets, basis) -> tuple[np.ndarray, float]:
    """Solve ``min_C ||targets - C @ basis||_F`` with a pivoted QR of ``basis.T``.

    Rows of ``basis`` that are numerically dependent on earlier-pivoted rows
    (relative diagonal below ``RANK_TOL``) receive zero coefficients.

    Returns ``(coefficients, residual_frobenius)`` where coefficients has shape
    ``(targets.rows, basis.rows)``.
    """
    y = as_matrix(targets)
    b = as_matrix(basis) if np.size(basis) else np.zeros((0, y.shape[1]))
    if b.shape[0] == 0:
        return np.zeros((y.shape[0], 0)), float(np.linalg.norm(y))
    if b.shape[1] != y.shape[1]:
        raise ContractError(f"basis has {b.shape[1]} columns, targets have {y.shape[1]}")

    # targets.T ~= basis.T @ C.T ; basis.T is (n, k)
    q, r, piv = sla.qr(b.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return np.zeros((y.shape[0], b.shape[0])), float(np.linalg.norm(y))
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    q, r = q[:, :rank], r[:rank, :rank]
    qty = q.T @ y.T
    sol = sla.solve_triangular(r, qty)
    coef = np.zeros((b.shape[0], y.shape[0]))
    coef[piv[:rank]] = sol
    resid = y.T - q @ qty
    return coef.T, float(np.linalg.norm(resid))


def sym_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix, eigenvalues ascending."""
    s = as_matrix(s)
    if s.shape[0] != s.shape[1]:
        raise ContractError(f"expected a square matrix, got {s.shape}")
    if not np.allclose(s, s.T, rtol=0.0, atol=1e-9):
        raise ContractError("matrix is not symmetric within 1e-9")
    vals, vecs = np.linalg.eigh(0.5 * (s + s.T))
    return vals, vecs


def _assign(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2


def kmeans_objective(points, labels) -> float:
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        members = points[labels == c]
        total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


def kmeans(points, k: int, seed: int, max_iter: int = 100, history: list | None = None) -> np.ndarray:
    """Lloyd's algorithm from k-means++ seeding; deterministic for a given seed.

    Empty clusters are reseeded with the point farthest from its current
    center. If ``history`` is a list, the objective after every assignment
    step is appended to it.
    """
    x = as_matrix(points)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    if k == n:
        return np.arange(n)
    rng = np.random.default_rng(seed)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[c] = x[idx]
        closest = np.minimum(closest, ((x - centers[c]) ** 2).sum(axis=1))

    labels = None
    for _ in range(max_iter):
        new, d2 = _assign(x, centers)
        for c in range(k):
            if not np.any(new == c):
                own = d2[np.arange(n), new]
                # never steal the last member of another cluster
                counts = np.bincount(new, minlength=k)
                own = np.where(counts[new] > 1, own, -1.0)
                far = int(np.argmax(own))
                new[far] = c
        if history is not None:
            history.append(kmeans_objective(x, new))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            centers[c] = x[labels == c].mean(axis=0)
    return labels
