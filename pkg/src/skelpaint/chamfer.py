"""Max-variant Chamfer distance between 6D point sets.

The distance between two sets is ``max(A, B)`` where ``A`` is the mean
distance from each point of the first set to its nearest neighbor in the
second, and ``B`` the same in the other direction. Nearest neighbors can be
found exhaustively or through :class:`NNIndex`, an exact kd-tree; both
paths share one squared-distance kernel so they agree bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np


class EmptySet(ValueError):
    pass


def _as_points(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    if P.ndim != 2 or P.shape[0] == 0:
        raise EmptySet("point set must be a non-empty (n, d) array")
    return P


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance over the last axis, with a fixed summation order."""
    a, b = np.asarray(a), np.asarray(b)
    d = a[..., 0] - b[..., 0]
    acc = d * d
    for c in range(1, a.shape[-1]):
        d = a[..., c] - b[..., c]
        acc += d * d
    return acc


def brute_nn(P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For every row of P: index of the nearest row of Q and the distance.

    Ties go to the lowest index in Q (``argmin`` returns the first minimum).
    """
    P, Q = _as_points(P), _as_points(Q)
    d2 = sq_dist(P[:, None, :], Q[None, :, :])
    idx = np.argmin(d2, axis=1)
    return idx, np.sqrt(d2[np.arange(len(P)), idx])


class NNIndex:
    """Exact nearest-neighbor kd-tree with axis-aligned median splits.

    Leaves hold up to ``leaf_size`` points and are scanned with the same
    kernel as :func:`brute_nn`. Subtrees are pruned only when strictly
    farther than the current best, so equal-distance candidates are always
    seen and the lowest index wins.
    """

    def __init__(self, Q, leaf_size: int = 16):
        self.data = _as_points(Q)
        self.leaf_size = max(1, int(leaf_size))
        # node arrays: split axis (-1 for leaf), split value, children, leaf slice
        self._axis: list[int] = []
        self._split: list[float] = []
        self._children: list[tuple[int, int]] = []
        self._leaf: list[np.ndarray | None] = []
        self._build(np.arange(len(self.data)))

    def __len__(self):
        return len(self.data)

    def _new_node(self) -> int:
        self._axis.append(-1)
        self._split.append(0.0)
        self._children.append((-1, -1))
        self._leaf.append(None)
        return len(self._axis) - 1

    def _build(self, idx: np.ndarray) -> int:
        node = self._new_node()
        pts = self.data[idx]
        spread = pts.max(axis=0) - pts.min(axis=0) if len(idx) else np.zeros(1)
        if len(idx) <= self.leaf_size or not np.any(spread > 0):
            self._leaf[node] = np.sort(idx)
            return node
        axis = int(np.argmax(spread))
        order = idx[np.argsort(pts[:, axis], kind="stable")]
        mid = len(order) // 2
        # left coords <= split <= right coords; duplicates may straddle
        split = float(self.data[order[mid], axis])
        left, right = order[:mid], order[mid:]
        self._axis[node] = axis
        self._split[node] = split
        lo = self._build(left)
        hi = self._build(right)
        self._children[node] = (lo, hi)
        return node

    def query(self, p) -> tuple[int, float]:
        p = np.asarray(p, dtype=np.float64)
        best = [np.inf, -1]
        self._search(0, p, best)
        return int(best[1]), float(np.sqrt(best[0]))

    def _search(self, node: int, p: np.ndarray, best: list) -> None:
        leaf = self._leaf[node]
        if leaf is not None:
            d2 = sq_dist(self.data[leaf], p)
            k = int(np.argmin(d2))
            cand, cand_idx = d2[k], int(leaf[k])
            if cand < best[0] or (cand == best[0] and cand_idx < best[1]):
                best[0], best[1] = cand, cand_idx
            return
        axis = self._axis[node]
        diff = p[axis] - self._split[node]
        lo, hi = self._children[node]
        near, far = (lo, hi) if diff < 0 else (hi, lo)
        self._search(near, p, best)
        if diff * diff <= best[0]:
            self._search(far, p, best)

    def query_many(self, P) -> tuple[np.ndarray, np.ndarray]:
        P = _as_points(P)
        out = [self.query(p) for p in P]
        return np.array([o[0] for o in out], dtype=np.int64), np.array([o[1] for o in out])


def build_nn_index(Q, leaf_size: int = 16) -> NNIndex:
    return NNIndex(Q, leaf_size)


def _nn(P, Q, method: str):
    if method == "brute":
        return brute_nn(P, Q)
    if method == "kdtree":
        return NNIndex(Q).query_many(P)
    raise ValueError(f"unknown nearest-neighbor method {method!r}")


def directed_avg_min(P, Q, method: str = "brute") -> tuple[float, np.ndarray]:
    """Mean distance from each point of P to its nearest point of Q, plus the matches."""
    idx, dist = _nn(_as_points(P), _as_points(Q), method)
    return float(np.mean(dist)), idx


@dataclass(frozen=True)
class ChamferResult:
    value: float
    a: float  # P -> Q
    b: float  # Q -> P
    match_pq: np.ndarray  # for each p, index of nearest q
    match_qp: np.ndarray  # for each q, index of nearest p


def chamfer_max(P, Q, method: str = "brute", reduction: str = "max") -> ChamferResult:
    """Chamfer distance; ``reduction="sum"`` gives the usual A + B variant."""
    a, m_pq = directed_avg_min(P, Q, method)
    b, m_qp = directed_avg_min(Q, P, method)
    if reduction == "max":
        value = max(a, b)
    elif reduction == "sum":
        value = a + b
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return ChamferResult(value, a, b, m_pq, m_qp)


def _unit_rows(v: np.ndarray) -> np.ndarray:
    n = np.sqrt(sq_dist(v, np.zeros_like(v)))
    out = np.zeros_like(v)
    nz = n > 0
    out[nz] = v[nz] / n[nz, None]
    return out


def chamfer_grad(P, Q, result: ChamferResult | None = None, reduction: str = "max",
                 both_branches: bool = False) -> np.ndarray:
    """Gradient of the Chamfer distance with respect to the points of Q (P is the fixed target).

    For the max variant only the selected branch contributes, with ties
    ``A == B`` going to A. ``both_branches=True`` returns the gradient of
    ``(A + B) / 2`` instead, a smoothed alternative. Zero-length matches
    contribute nothing.
    """
    P, Q = _as_points(P), _as_points(Q)
    if result is None:
        result = chamfer_max(P, Q)
    grad_a = np.zeros_like(Q)
    # A term: each p pulls its matched q
    np.add.at(grad_a, result.match_pq, _unit_rows(Q[result.match_pq] - P) / len(P))
    grad_b = _unit_rows(Q - P[result.match_qp]) / len(Q)

    if reduction == "sum":
        return grad_a + grad_b
    if both_branches:
        return 0.5 * (grad_a + grad_b)
    return grad_a if result.a >= result.b else grad_b


def benchmark(sizes=(64, 128, 256, 512), repeats: int = 3, seed: int = 0):
    """Time brute-force vs kd-tree Chamfer; yields ``(n_points, method, seconds)``."""
    rng = np.random.default_rng(seed)
    for n in sizes:
        P, Q = rng.random((n, 6)), rng.random((n, 6))
        for method in ("brute", "kdtree"):
            t0 = time.perf_counter()
            for _ in range(repeats):
                chamfer_max(P, Q, method=method)
            yield n, method, (time.perf_counter() - t0) / repeats
