"""k-parity instances, their binary-tree decomposition, and sampled data.

Node labels follow the usual 1-based convention: inputs are ``1..d`` and the
internal nodes of the tree are ``d+1..d+k-1``, numbered level by level from
the bottom, left to right.  Token matrices are stored sample-major as
``(n, d+k-1)`` float arrays, so node ``j`` lives in column ``j - 1``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

# stream ids for the splittable generator
STREAM_TARGET = 0
STREAM_INPUTS = 1
STREAM_AUGMENT = 2
STREAM_TEST = 3
STREAM_WEIGHTS = 4


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def _log2_exact(k: int) -> int | None:
    if k < 1 or k & (k - 1):
        return None
    return k.bit_length() - 1


@dataclass(frozen=True)
class ParityInstance:
    d: int
    k: int
    target: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        v = _log2_exact(self.k)
        if v is None or v < 1:
            raise ValueError(f"k must be a power of two >= 2, got {self.k}")
        if self.k > self.d:
            raise ValueError(f"k={self.k} exceeds d={self.d}")
        t = tuple(int(j) for j in self.target)
        if len(t) != self.k or len(set(t)) != self.k:
            raise ValueError(f"target must hold {self.k} distinct indices, got {t}")
        if any(j < 1 or j > self.d for j in t):
            raise ValueError(f"target indices must lie in [1, {self.d}]")
        object.__setattr__(self, "target", tuple(sorted(t)))

    @property
    def v(self) -> int:
        return self.k.bit_length() - 1

    @property
    def size(self) -> int:
        """Number of token positions, ``d + k - 1``."""
        return self.d + self.k - 1

    def to_json(self) -> dict:
        return {"d": self.d, "k": self.k, "target": list(self.target), "seed": self.seed}


def build_instance(d: int, k: int, target: Sequence[int] | None = None, seed: int | None = None) -> ParityInstance:
    """Either take an explicit target subset or draw one uniformly from ``seed``."""
    if target is None:
        if seed is None:
            raise ValueError("need an explicit target or a seed")
        if _log2_exact(k) is None or k < 2 or k > d:
            raise ValueError(f"invalid (d, k) = ({d}, {k})")
        rng = make_rng(seed, STREAM_TARGET)
        target = (rng.choice(d, size=k, replace=False) + 1).tolist()
    return ParityInstance(d=d, k=k, target=tuple(target), seed=seed)


@dataclass(frozen=True)
class DecompositionTree:
    instance: ParityInstance
    child1: dict[int, int]
    child2: dict[int, int]
    parent: dict[int, int]
    height: dict[int, int]
    level_bound: dict[int, int]

    @property
    def d(self) -> int:
        return self.instance.d

    @property
    def k(self) -> int:
        return self.instance.k

    @property
    def v(self) -> int:
        return self.instance.v

    @property
    def size(self) -> int:
        return self.instance.size

    @property
    def internal(self) -> range:
        return range(self.d + 1, self.d + self.k)

    def level_nodes(self, level: int) -> range:
        """Node labels on ``level`` (level 0 is all d inputs)."""
        if level == 0:
            return range(1, self.d + 1)
        return range(self.level_bound[level - 1] + 1, self.level_bound[level] + 1)

    def children(self, m: int) -> tuple[int, int]:
        return self.child1[m], self.child2[m]

    @cached_property
    def leaf_masks(self) -> dict[int, int]:
        """Bitmask of the input bits each node's parity multiplies together."""
        masks = {j: 1 << (j - 1) for j in range(1, self.d + 1)}
        for m in self.internal:
            masks[m] = masks[self.child1[m]] ^ masks[self.child2[m]]
        return masks

    @cached_property
    def child_index(self) -> np.ndarray:
        """(k-1, 2) array of 0-based child columns for internal rows in order."""
        return np.array([[self.child1[m] - 1, self.child2[m] - 1] for m in self.internal], dtype=np.intp)

    def subtree_leaves(self, m: int) -> list[int]:
        if m <= self.d:
            return [m]
        return self.subtree_leaves(self.child1[m]) + self.subtree_leaves(self.child2[m])


def build_tree(instance: ParityInstance) -> DecompositionTree:
    d, k, v = instance.d, instance.k, instance.v
    child1, child2, parent, height = {}, {}, {}, {}
    level_bound = {0: d}
    for j in instance.target:
        height[j] = 0
    prev = list(instance.target)
    nxt = d + 1
    for level in range(1, v + 1):
        cur = []
        for a, b in zip(prev[0::2], prev[1::2]):
            m = nxt
            nxt += 1
            child1[m], child2[m] = a, b
            parent[a] = parent[b] = m
            height[m] = level
            cur.append(m)
        level_bound[level] = level_bound[level - 1] + len(cur)
        prev = cur
    assert nxt == d + k
    return DecompositionTree(instance, child1, child2, parent, height, level_bound)


@dataclass
class TokenMatrix:
    """Sample-major token columns plus a per-column "is set" flag."""

    tokens: np.ndarray
    set_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.set_mask is None:
            self.set_mask = np.zeros(self.tokens.shape[1], dtype=bool)
        self.set_mask = np.asarray(self.set_mask, dtype=bool)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def column(self, j: int) -> np.ndarray:
        """Column for 1-based node label ``j``."""
        return self.tokens[:, j - 1]

    def copy(self) -> "TokenMatrix":
        return TokenMatrix(self.tokens.copy(), self.set_mask.copy())


# augmented data uses the same layout; generated columns stay zero until filled
AugmentedTokens = TokenMatrix


def _blank(n: int, d: int, width: int | None) -> np.ndarray:
    return np.zeros((n, d if width is None else width))


def sample_inputs(d: int, n: int, seed: int, width: int | None = None, stream: int = STREAM_INPUTS) -> TokenMatrix:
    """i.i.d. uniform ±1 bits in columns ``1..d``; remaining columns zero."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = make_rng(seed, stream)
    tokens = _blank(n, d, width)
    tokens[:, :d] = rng.integers(0, 2, size=(n, d)) * 2.0 - 1.0
    mask = np.zeros(tokens.shape[1], dtype=bool)
    mask[:d] = True
    return TokenMatrix(tokens, mask)


def sample_augmented(d: int, n_prime: int, seed: int, width: int | None = None) -> AugmentedTokens:
    return sample_inputs(d, n_prime, seed, width=width, stream=STREAM_AUGMENT)


def enumerate_inputs(d: int, width: int | None = None) -> TokenMatrix:
    """All ``2**d`` points of the cube, one per row."""
    if d > 24:
        raise ValueError("refusing to enumerate more than 2**24 inputs")
    idx = np.arange(1 << d, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(d)) & 1
    tokens = _blank(1 << d, d, width)
    tokens[:, :d] = 1.0 - 2.0 * bits
    mask = np.zeros(tokens.shape[1], dtype=bool)
    mask[:d] = True
    return TokenMatrix(tokens, mask)


def ground_truth_labels(tree: DecompositionTree, inputs: TokenMatrix) -> TokenMatrix:
    """Fill every internal column with the product of its two children."""
    d, size = tree.d, tree.size
    if not inputs.set_mask[:d].all():
        raise ValueError("input columns must be set")
    tokens = np.zeros((inputs.n, size))
    tokens[:, :d] = inputs.tokens[:, :d]
    for m in tree.internal:
        tokens[:, m - 1] = tokens[:, tree.child1[m] - 1] * tokens[:, tree.child2[m] - 1]
    return TokenMatrix(tokens, np.ones(size, dtype=bool))


def target_parity(instance: ParityInstance, inputs: TokenMatrix | np.ndarray) -> np.ndarray:
    x = inputs.tokens if isinstance(inputs, TokenMatrix) else np.asarray(inputs)
    return np.prod(x[:, [j - 1 for j in instance.target]], axis=1)


def is_trivial(indices: Iterable[int], tree: DecompositionTree) -> bool:
    """True iff the product of the given node parities is identically 1."""
    acc = 0
    masks = tree.leaf_masks
    for j in indices:
        if j < 1 or j > tree.size:
            raise ValueError(f"node index {j} out of range")
        acc ^= masks[j]
    return acc == 0


def contraction(*columns: np.ndarray) -> float:
    """Multilinear inner product ``sum_i prod_r z_{r,i}``."""
    if not columns:
        raise ValueError("need at least one vector")
    cols = [np.asarray(c, dtype=np.float64) for c in columns]
    n = cols[0].shape[0]
    if any(c.shape != (n,) for c in cols):
        raise ValueError("contraction arguments must be equal-length vectors")
    prod = np.ones(n)
    for c in cols:
        prod = prod * c
    return float(prod.sum())


def kappa(n: int, p: float, d: int) -> float:
    """High-probability ceiling on normalised nontrivial contractions."""
    if n < 1 or not 0 < p < 1:
        raise ValueError("need n >= 1 and 0 < p < 1")
    return math.sqrt(2.0 / n * math.log(32.0 * d**4 / p))


def max_nontrivial_contraction(tree: DecompositionTree, labeled: TokenMatrix, max_order: int = 4) -> float:
    """Largest ``|<x_j1,...,x_jr>|/n`` over nontrivial tuples with ``r <= max_order``.

    Contractions are symmetric, so multisets of indices cover every ordered tuple.
    """
    n = labeled.n
    x = labeled.tokens
    worst = 0.0
    for r in range(1, max_order + 1):
        for tup in itertools.combinations_with_replacement(range(1, tree.size + 1), r):
            if is_trivial(tup, tree):
                continue
            val = abs(np.prod(x[:, [j - 1 for j in tup]], axis=1).sum()) / n
            worst = max(worst, val)
    return worst


def augmented_partial_sum_norm(tree: DecompositionTree, augmented: TokenMatrix) -> float:
    """``max_l || (1/d_l) sum_{j <= d_l} x_j^+ ||_inf`` on ground-truth augmented tokens."""
    full = ground_truth_labels(tree, augmented).tokens
    csum = np.cumsum(full, axis=1)
    worst = 0.0
    for level in range(tree.v + 1):
        dl = tree.level_bound[level]
        worst = max(worst, float(np.abs(csum[:, dl - 1] / dl).max()))
    return worst


def augmented_partial_sum_bound(d: int, n_prime: int, p: float) -> float:
    """Hoeffding/union ceiling on the partial sums, holding per level w.p. ``1 - p``."""
    return 2.0 * (math.sqrt(2.0) + 1.0) * math.sqrt(math.log(2.0 * n_prime / p) / d)
