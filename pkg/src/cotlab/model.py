"""One-layer positional-attention transformer with a fixed link function.

Position ``m`` attends to earlier positions with softmax scores taken from
column ``m`` of the weight matrix, ``w[j, m]`` being the logit of source ``j``.
Arrays are 0-based (node ``j`` is column ``j - 1``); masked logits are
represented by a boolean mask rather than ``-inf``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .link import DEFAULT_LINK, LinkFunction, phi_and_prime
from .task import DecompositionTree, TokenMatrix


class MaskKind(str, enum.Enum):
    CAUSAL = "causal"  # teacher-forcing / plain causal: j < m
    BLOCK = "block"  # up to the previous tree level: j <= d_{h[m]-1}


def causal_mask(d: int, size: int) -> np.ndarray:
    """``True`` marks a forbidden (source, target) pair."""
    j = np.arange(size)[:, None]
    m = np.arange(size)[None, :]
    return (j >= m) | (m < d)


def make_mask(tree: DecompositionTree, kind: MaskKind | str) -> np.ndarray:
    kind = MaskKind(kind)
    size = tree.size
    if kind is MaskKind.CAUSAL:
        return causal_mask(tree.d, size)
    mask = np.ones((size, size), dtype=bool)
    for m in tree.internal:
        mask[: tree.level_bound[tree.height[m] - 1], m - 1] = False
    return mask


@dataclass
class AttentionWeights:
    w: np.ndarray
    mask: np.ndarray
    kind: MaskKind = MaskKind.CAUSAL

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.w.shape != self.mask.shape or self.w.shape[0] != self.w.shape[1]:
            raise ValueError("weights and mask must be equal square matrices")
        self.kind = MaskKind(self.kind)
        self.w = np.where(self.mask, 0.0, self.w)

    @classmethod
    def zeros(cls, tree: DecompositionTree, kind: MaskKind | str) -> "AttentionWeights":
        mask = make_mask(tree, kind)
        return cls(np.zeros(mask.shape), mask, kind)

    @property
    def size(self) -> int:
        return self.w.shape[0]

    def copy(self) -> "AttentionWeights":
        return AttentionWeights(self.w.copy(), self.mask.copy(), self.kind)

    def with_w(self, w: np.ndarray) -> "AttentionWeights":
        return AttentionWeights(w, self.mask, self.kind)

    def scores(self) -> np.ndarray:
        """Matrix ``S`` with ``S[j, m] = sigma_j(w_m)``; zero on masked entries and rows."""
        return softmax_columns(self.w, self.mask)

    @property
    def source_counts(self) -> np.ndarray:
        return (~self.mask).sum(axis=0)


def softmax_columns(w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    live = ~mask
    logits = np.where(live, w, -np.inf)
    top = logits.max(axis=0)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(live, np.exp(logits - top), 0.0)
    tot = e.sum(axis=0)
    return np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)


def softmax_row(weights: AttentionWeights, m: int) -> np.ndarray:
    """Scores of every source for target node ``m`` (1-based)."""
    col = m - 1
    live = ~weights.mask[:, col]
    if not live.any():
        raise ValueError(f"position {m} is fully masked")
    z = weights.w[live, col]
    e = np.exp(z - z.max())
    out = np.zeros(weights.size)
    out[live] = e / e.sum()
    return out


class FilterMode(str, enum.Enum):
    OFF = "off"
    TOKEN = "token"  # zero a level when previous-level augmented outputs sit near -1
    WEIGHT = "weight"  # zero a level until every previous-level row has a score above tau


@dataclass(frozen=True)
class FilterConfig:
    mode: FilterMode = FilterMode.OFF
    threshold: float = 0.0
    # keep a level open for good once it has been observed open (training loop)
    latch: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", FilterMode(self.mode))
        if self.mode is FilterMode.TOKEN and not 0 < self.threshold < 2:
            raise ValueError("token threshold must lie in (0, 2)")
        if self.mode is FilterMode.WEIGHT and not 0 < self.threshold < 1:
            raise ValueError("weight threshold must lie in (0, 1)")

    @classmethod
    def off(cls) -> "FilterConfig":
        return cls()

    @classmethod
    def token(cls, eps0: float = 0.5, latch: bool = False) -> "FilterConfig":
        return cls(FilterMode.TOKEN, eps0, latch)

    @classmethod
    def weight(cls, tau: float = 0.4, latch: bool = False) -> "FilterConfig":
        return cls(FilterMode.WEIGHT, tau, latch)

    @property
    def active(self) -> bool:
        return self.mode is not FilterMode.OFF


@dataclass
class Layout:
    """Static per-position facts the forward pass needs."""

    d: int
    size: int
    n_sources: np.ndarray  # sources of column m are exactly 0..n_sources[m]-1
    batches: list[tuple[int, int, int]]  # (first col, stop col, n_sources), generated in order
    level: np.ndarray | None = None  # tree level per column (0 for inputs)
    level_bound: dict[int, int] | None = None

    @property
    def v(self) -> int:
        return 0 if self.level is None else int(self.level.max())

    def level_cols(self, ell: int) -> slice:
        if ell == 0:
            return slice(0, self.d)
        return slice(self.level_bound[ell - 1], self.level_bound[ell])


def make_layout(mask: np.ndarray, d: int, tree: DecompositionTree | None = None) -> Layout:
    size = mask.shape[0]
    live = ~mask
    counts = live.sum(axis=0)
    for m in range(d, size):
        L = counts[m]
        if L == 0 or not live[:L, m].all() or L > m:
            raise ValueError("mask rows must allow a nonempty prefix of earlier positions")
    batches = []
    m = d
    while m < size:
        L = counts[m]
        stop = m + 1
        while stop < size and counts[stop] == L and L <= m:
            stop += 1
        batches.append((m, stop, int(L)))
        m = stop
    level = bound = None
    if tree is not None:
        level = np.zeros(size, dtype=np.intp)
        for node, h in tree.height.items():
            level[node - 1] = h
        bound = dict(tree.level_bound)
    return Layout(d, size, counts, batches, level, bound)


@dataclass
class ChainResult:
    """Forward pass over all rows (labeled rows first, then augmented)."""

    z: np.ndarray  # pre-activations, zero on input columns
    x: np.ndarray  # tokens after generation (inputs untouched)
    dphi: np.ndarray  # phi'(z) on generated columns
    gate: np.ndarray  # per column: 1.0 if the output passed the filter
    level_open: dict[int, bool] = field(default_factory=dict)


def _weight_level_open(S: np.ndarray, layout: Layout, ell: int, tau: float) -> bool:
    cols = layout.level_cols(ell - 1)
    return bool(np.all(S[:, cols].max(axis=0) > tau))


def _token_level_open(x_aug: np.ndarray, layout: Layout, ell: int, eps0: float) -> bool:
    if x_aug.shape[0] == 0:
        raise ValueError("token filter needs augmented rows")
    cols = layout.level_cols(ell - 1)
    spread = np.abs(x_aug[:, cols] + 1.0).max(axis=0)
    return bool(np.all(spread >= eps0))


def level_open(
    S: np.ndarray, x: np.ndarray, n_labeled: int, layout: Layout, filt: FilterConfig, ell: int,
    prev_open: bool = True, forced: frozenset = frozenset(),
) -> bool:
    """Whether the filter lets level ``ell`` through, given the current tokens."""
    if not filt.active or ell in forced:
        return True
    if not prev_open:
        return False
    if filt.mode is FilterMode.WEIGHT:
        return ell == 1 or _weight_level_open(S, layout, ell, filt.threshold)
    return _token_level_open(x[n_labeled:], layout, ell, filt.threshold)


def run_chain(
    inputs: np.ndarray,
    S: np.ndarray,
    layout: Layout,
    link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(),
    n_labeled: int | None = None,
    forced_open: frozenset = frozenset(),
) -> ChainResult:
    """Generate every internal column in order; equals the chain's fixed point.

    ``inputs`` holds the labeled rows followed by any augmented rows; only the
    first ``layout.d`` columns are read.
    """
    n_rows = inputs.shape[0]
    n_labeled = n_rows if n_labeled is None else n_labeled
    d, size = layout.d, layout.size
    x = np.zeros((n_rows, size))
    x[:, :d] = inputs[:, :d]
    z = np.zeros((n_rows, size))
    dphi = np.zeros((n_rows, size))
    gate = np.ones(size)
    opened: dict[int, bool] = {}
    if filt.active and layout.level is None:
        raise ValueError("filtering needs a tree layout")
    for start, stop, L in layout.batches:
        zb = x[:, :L] @ S[:L, start:stop]
        xb, db = phi_and_prime(link, zb)
        if filt.active:
            for col in range(start, stop):
                ell = int(layout.level[col])
                if ell not in opened:
                    opened[ell] = level_open(S, x, n_labeled, layout, filt, ell, opened.get(ell - 1, True), forced_open)
                if not opened[ell]:
                    gate[col] = 0.0
            xb = xb * gate[start:stop]
        z[:, start:stop] = zb
        x[:, start:stop] = xb
        dphi[:, start:stop] = db
    return ChainResult(z, x, dphi, gate, opened)


@dataclass
class StepResult:
    zhat: TokenMatrix
    xhat: TokenMatrix
    aug_xhat: TokenMatrix | None
    level_open: dict[int, bool]


def forward_step(
    tokens: TokenMatrix,
    weights: AttentionWeights,
    link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(),
    tree: DecompositionTree | None = None,
    augmented: TokenMatrix | None = None,
) -> StepResult:
    """Apply the transformer once to the current token matrix (all positions in parallel)."""
    d = tree.d if tree is not None else _infer_d(weights.mask)
    layout = make_layout(weights.mask, d, tree)
    # generated columns may still be zero dummies; the inputs must be present
    if not tokens.set_mask[:d].all():
        raise ValueError("input source columns are unset")
    S = weights.scores()
    rows = tokens.tokens if augmented is None else np.vstack([tokens.tokens, augmented.tokens])
    n = tokens.n
    z = rows @ S
    z[:, :d] = 0.0
    phi, _ = phi_and_prime(link, z[:, d:])
    out = rows.copy()
    out[:, d:] = phi
    opened: dict[int, bool] = {}
    if filt.active:
        if tree is None:
            raise ValueError("filtering needs the decomposition tree")
        for ell in range(1, tree.v + 1):
            opened[ell] = level_open(S, rows, n, layout, filt, ell, opened.get(ell - 1, True))
            if not opened[ell]:
                out[:, layout.level_cols(ell)] = 0.0
    zt = TokenMatrix(z[:n], np.ones(weights.size, dtype=bool))
    xt = TokenMatrix(out[:n], np.ones(weights.size, dtype=bool))
    aug = None if augmented is None else TokenMatrix(out[n:], np.ones(weights.size, dtype=bool))
    return StepResult(zt, xt, aug, opened)


def _infer_d(mask: np.ndarray) -> int:
    full = mask.all(axis=0)
    return int(np.argmin(full)) if not full.all() else mask.shape[0]


def generate_chain(
    inputs: TokenMatrix,
    weights: AttentionWeights,
    link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(),
    tree: DecompositionTree | None = None,
    augmented: TokenMatrix | None = None,
    max_steps: int | None = None,
) -> tuple[TokenMatrix, TokenMatrix | None, int]:
    """Iterate ``forward_step`` from zero dummies until nothing changes.

    Returns the final tokens, the final augmented tokens, and the number of
    steps that changed something.
    """
    d = tree.d if tree is not None else _infer_d(weights.mask)
    size = weights.size
    cur = TokenMatrix(np.hstack([inputs.tokens[:, :d], np.zeros((inputs.n, size - d))]))
    cur.set_mask[:d] = True
    aug = None
    if augmented is not None:
        aug = TokenMatrix(np.hstack([augmented.tokens[:, :d], np.zeros((augmented.n, size - d))]))
        aug.set_mask[:d] = True
    limit = max_steps if max_steps is not None else size - d + 1
    changed_steps = 0
    for _ in range(limit):
        res = forward_step(cur, weights, link, filt, tree, aug)
        same = np.array_equal(res.xhat.tokens, cur.tokens) and (
            aug is None or np.array_equal(res.aug_xhat.tokens, aug.tokens)
        )
        cur, aug = res.xhat, res.aug_xhat
        if same:
            break
        changed_steps += 1
    return cur, aug, changed_steps


def center_rows(weights: AttentionWeights) -> AttentionWeights:
    """Shift each attention row so its unmasked median is 0; the scores are unchanged."""
    w = weights.w.copy()
    for m in range(w.shape[1]):
        live = ~weights.mask[:, m]
        if live.any():
            w[live, m] -= np.median(w[live, m])
    return weights.with_w(w)


def quantize(weights: AttentionWeights, center: bool = False) -> AttentionWeights:
    """Round unmasked entries to the nearest integer, halves away from zero.

    With ``center`` each row is first shifted to median 0, picking a canonical
    representative of the shift-invariant softmax before rounding.
    """
    if center:
        weights = center_rows(weights)
    w = weights.w
    r = np.sign(w) * np.floor(np.abs(w) + 0.5)
    return weights.with_w(np.where(weights.mask, w, r))


def pattern_weights(tree: DecompositionTree, kind: MaskKind | str, value: float | dict[int, float], levels: int | None = None) -> AttentionWeights:
    """Weights putting ``value`` on both children of every node up to ``levels``."""
    weights = AttentionWeights.zeros(tree, kind)
    top = tree.v if levels is None else levels
    w = weights.w.copy()
    for m in tree.internal:
        h = tree.height[m]
        if h > top:
            continue
        val = value[h] if isinstance(value, dict) else value
        w[tree.child1[m] - 1, m - 1] = val
        w[tree.child2[m] - 1, m - 1] = val
    return weights.with_w(w)
