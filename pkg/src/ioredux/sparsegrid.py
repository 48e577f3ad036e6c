"""Smolyak sparse grids on the unit cube built from nested Clenshaw-Curtis rules."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

from .exceptions import SparseGridTooLarge

MAX_LEVEL_1D = 12
DEFAULT_POINT_CAP = 100_000
_KEY_DIGITS = 14


@dataclass(frozen=True)
class Rule1D:
    level: int
    nodes: np.ndarray
    weights: np.ndarray


def _n_nodes(level: int) -> int:
    return 1 if level == 0 else 2**level + 1


@lru_cache(maxsize=None)
def _cc_rule(level: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    n = _n_nodes(level)
    if n == 1:
        return (0.5,), (1.0,)
    big_n = n - 1
    i = np.arange(n)
    theta = np.pi * i / big_n
    # Mirror the lower half so symmetric nodes are exact complements and the
    # center is exactly 0.5; nested levels then share bit-identical nodes.
    x = 0.5 * (1.0 - np.cos(theta))
    half = big_n // 2
    x[half] = 0.5
    x[half + 1:] = 1.0 - x[:half][::-1]
    x[0], x[-1] = 0.0, 1.0
    w = np.empty(n)
    k = np.arange(1, big_n // 2 + 1)
    b = np.where(k == big_n // 2, 1.0, 2.0)
    for idx in range(n):
        c = 1.0 if idx in (0, big_n) else 2.0
        w[idx] = c / big_n * (1.0 - np.sum(b / (4 * k**2 - 1) * np.cos(2 * k * theta[idx])))
    w = 0.5 * w  # [-1, 1] -> [0, 1]
    w = 0.5 * (w + w[::-1])
    return tuple(float(v) for v in x), tuple(float(v) for v in w)


def clenshaw_curtis_1d(level: int) -> Rule1D:
    """Nested Clenshaw-Curtis rule on [0, 1] (1 node at level 0, ``2**level + 1`` after)."""
    if level < 0 or level > MAX_LEVEL_1D:
        raise ValueError(f"level must be in [0, {MAX_LEVEL_1D}], got {level}")
    x, w = _cc_rule(int(level))
    return Rule1D(level=int(level), nodes=np.array(x), weights=np.array(w))


def _multi_indices(dim: int, total: int):
    """All nonnegative integer vectors of length ``dim`` summing to exactly ``total``."""
    if dim == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _multi_indices(dim - 1, total - first):
            yield (first, *rest)


def sparse_grid_size(dim: int, level: int) -> int:
    """Number of distinct points of the nested Smolyak grid, without building it."""
    new = [1, 2] + [2 ** (l - 1) for l in range(2, level + 1)]
    # counts[s] = number of points whose 1-D levels sum to s, built one dimension at a time
    counts = [1] + [0] * level
    for _ in range(dim):
        nxt = [0] * (level + 1)
        for s, c in enumerate(counts):
            if c:
                for l in range(0, level - s + 1):
                    nxt[s + l] += c * new[l]
        counts = nxt
    return sum(counts)


def _key(point) -> tuple[float, ...]:
    return tuple(float(f"{v:.{_KEY_DIGITS - 1}e}") for v in point)


@dataclass(frozen=True)
class SparseGrid:
    dim: int
    level: int
    points: np.ndarray
    weights: np.ndarray
    point_ids: tuple[str, ...]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["point_id", *(f"theta_{i + 1}" for i in range(self.dim))])
        for pid, pt in zip(self.point_ids, self.points):
            writer.writerow([pid, *(repr(float(v)) for v in pt)])
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def manifest(self) -> dict:
        return {
            "dim": self.dim,
            "level": self.level,
            "n_points": self.n_points,
            "point_ids": list(self.point_ids),
            "weights": [float(w) for w in self.weights],
            "design_hash": self.content_hash(),
        }

    @classmethod
    def from_files(cls, design_csv: str, manifest: dict) -> "SparseGrid":
        rows = [r for r in csv.reader(io.StringIO(design_csv)) if r]
        if not rows or rows[0][:1] != ["point_id"]:
            raise ValueError("design CSV must start with a 'point_id' header")
        ids = tuple(r[0] for r in rows[1:])
        pts = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)
        dim = len(rows[0]) - 1
        pts = pts.reshape(len(ids), dim)
        if list(ids) != list(manifest["point_ids"]):
            raise ValueError("design CSV point ids do not match the manifest")
        return cls(dim=dim, level=int(manifest["level"]), points=pts,
                   weights=np.array(manifest["weights"], dtype=float), point_ids=ids)


def smolyak_grid(dim: int, level: int, max_points: int = DEFAULT_POINT_CAP) -> SparseGrid:
    """Smolyak combination of tensorized nested Clenshaw-Curtis rules.

    Uses the multi-index set ``sum(i) <= level`` with level-0 rule = one
    midpoint node, so ``smolyak_grid(10, 2)`` has 221 points. Points are
    ordered lexicographically; weights are the (possibly negative) combination
    weights and sum to one.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if level < 0 or level > MAX_LEVEL_1D:
        raise ValueError(f"level must be in [0, {MAX_LEVEL_1D}], got {level}")
    n = sparse_grid_size(dim, level)
    if n > max_points:
        raise SparseGridTooLarge(
            f"sparse grid with dim={dim}, level={level} has {n} points, above the cap of {max_points}"
        )
    acc: dict[tuple[float, ...], list] = {}
    for total in range(max(0, level - dim + 1), level + 1):
        coef = (-1) ** (level - total) * comb(dim - 1, level - total)
        for idx in _multi_indices(dim, total):
            rules = [_cc_rule(l) for l in idx]
            for combo in itertools.product(*(range(len(r[0])) for r in rules)):
                pt = tuple(rules[j][0][c] for j, c in enumerate(combo))
                w = coef * float(np.prod([rules[j][1][c] for j, c in enumerate(combo)]))
                key = _key(pt)
                slot = acc.get(key)
                if slot is None:
                    acc[key] = [pt, w]
                else:
                    slot[1] += w
    keys = sorted(acc)
    points = np.array([acc[k][0] for k in keys], dtype=float).reshape(len(keys), dim)
    weights = np.array([acc[k][1] for k in keys], dtype=float)
    width = max(4, len(str(len(keys) - 1)))
    ids = tuple(f"p{i:0{width}d}" for i in range(len(keys)))
    points.setflags(write=False)
    weights.setflags(write=False)
    return SparseGrid(dim=dim, level=level, points=points, weights=weights, point_ids=ids)


def grid_quadrature(grid: SparseGrid, values) -> float:
    values = np.asarray(values, dtype=float)
    if values.shape[0] != grid.n_points:
        raise ValueError(f"expected {grid.n_points} values, got {values.shape[0]}")
    return float(grid.weights @ values)


def design_manifest_json(grid: SparseGrid) -> str:
    return json.dumps(grid.manifest(), indent=1, sort_keys=True)

