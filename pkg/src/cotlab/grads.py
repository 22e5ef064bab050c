"""Analytic gradients of the three training objectives with respect to W.

All losses have the form ``(1/2n) sum_m c_m ||xhat_m - x_m||^2`` over generated
columns ``m`` with per-column weights ``c_m``.  The filter acts as a 0/1 gate
with no derivative, so gated columns pass no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .link import DEFAULT_LINK, LinkFunction, link_constants, phi_and_prime
from .model import (
    AttentionWeights,
    ChainResult,
    FilterConfig,
    Layout,
    MaskKind,
    make_layout,
    run_chain,
)
from .task import DecompositionTree, TokenMatrix


def _require_labels(labeled: TokenMatrix, size: int):
    if labeled.width != size or not labeled.set_mask.all():
        raise ValueError("ground-truth labels are required for every position")


def tf_loss_and_grad(
    weights: AttentionWeights, labeled: TokenMatrix, d: int, link: LinkFunction = DEFAULT_LINK, scale: float = 1.0
) -> tuple[float, np.ndarray]:
    """Teacher-forced loss: every position reads ground-truth sources."""
    _require_labels(labeled, weights.size)
    x = labeled.tokens
    n = x.shape[0]
    S = weights.scores()
    z = x @ S[:, d:]
    phi, dphi = phi_and_prime(link, z)
    resid = phi - x[:, d:]
    loss = scale * 0.5 * float(np.sum(resid * resid)) / n
    r = scale * resid * dphi / n
    grad = np.zeros_like(S)
    grad[:, d:] = S[:, d:] * (x.T @ r - np.sum(r * z, axis=0))
    return loss, grad


def grad_teacher_forcing(weights, data: TokenMatrix, tree: DecompositionTree, link=DEFAULT_LINK, scale: float = 1.0) -> np.ndarray:
    return tf_loss_and_grad(weights, data, tree.d, link, scale)[1]


def loss_weights(layout: Layout, cot_scale: float, pred_weight: float) -> np.ndarray:
    """Per-column weights ``c_m`` for a CoT term plus a prediction term on the top node."""
    c = np.zeros(layout.size)
    c[layout.d:] = cot_scale
    c[-1] += pred_weight
    return c


def backprop_chain(
    chain: ChainResult, S: np.ndarray, layout: Layout, seed: np.ndarray
) -> np.ndarray:
    """Accumulate dL/dW given ``seed = dL/dxhat`` on the labeled rows of ``chain``."""
    n = seed.shape[0]
    x, z, dphi, gate = chain.x[:n], chain.z[:n], chain.dphi[:n], chain.gate
    adj = seed.copy()
    grad = np.zeros_like(S)
    d = layout.d
    for start, stop, L in reversed(layout.batches):
        zbar = adj[:, start:stop] * (gate[start:stop] * dphi[:, start:stop])
        if not zbar.any():
            continue
        Sb = S[:L, start:stop]
        grad[:L, start:stop] = Sb * (x[:, :L].T @ zbar - np.sum(zbar * z[:, start:stop], axis=0))
        if L > d:
            adj[:, d:L] += zbar @ Sb[d:].T
    return grad


def chain_loss_and_grad(
    weights: AttentionWeights,
    labeled: TokenMatrix,
    layout: Layout,
    col_weight: np.ndarray,
    link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(),
    augmented: TokenMatrix | None = None,
    forced_open: frozenset = frozenset(),
    S: np.ndarray | None = None,
) -> tuple[float, np.ndarray, ChainResult]:
    """Loss and exact gradient through the self-generated chain."""
    _require_labels(labeled, weights.size)
    S = weights.scores() if S is None else S
    n = labeled.n
    rows = labeled.tokens if augmented is None else np.vstack([labeled.tokens, augmented.tokens])
    chain = run_chain(rows, S, layout, link, filt, n_labeled=n, forced_open=forced_open)
    resid = chain.x[:n] - labeled.tokens
    resid[:, : layout.d] = 0.0
    loss = 0.5 * float(np.sum(col_weight * np.sum(resid * resid, axis=0))) / n
    seed = resid * (col_weight / n)
    grad = backprop_chain(chain, S, layout, seed)
    return loss, grad, chain


def grad_end_to_end(
    weights: AttentionWeights,
    data: TokenMatrix,
    augmented: TokenMatrix | None,
    tree: DecompositionTree,
    link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(),
    loss_mix: float = 0.0,
    scale: float = 1.0,
) -> np.ndarray:
    """Gradient of ``scale * CoT loss + loss_mix * prediction loss`` without teacher forcing."""
    layout = make_layout(weights.mask, tree.d, tree)
    cw = loss_weights(layout, scale, loss_mix)
    return chain_loss_and_grad(weights, data, layout, cw, link, filt, augmented)[1]


def grad_prediction_only(
    weights: AttentionWeights, data: TokenMatrix, tree: DecompositionTree | None, link: LinkFunction = DEFAULT_LINK,
    d: int | None = None,
) -> np.ndarray:
    d = tree.d if tree is not None else d
    layout = make_layout(weights.mask, d, tree)
    cw = loss_weights(layout, 0.0, 1.0)
    return chain_loss_and_grad(weights, data, layout, cw, link)[1]


def finite_diff_grad(loss: Callable[[AttentionWeights], float], weights: AttentionWeights, h: float = 1e-5) -> np.ndarray:
    """Central differences over every unmasked entry."""
    if h <= 0:
        raise ValueError("step must be positive")
    h = abs(h)
    grad = np.zeros_like(weights.w)
    base = weights.w
    for j, m in zip(*np.nonzero(~weights.mask)):
        w = base.copy()
        w[j, m] = base[j, m] + h
        up = loss(weights.with_w(w))
        w[j, m] = base[j, m] - h
        down = loss(weights.with_w(w))
        grad[j, m] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max relative disagreement over entries where the analytic value exceeds ``floor``."""
    sel = np.abs(analytic) > floor
    if not sel.any():
        return float(np.max(np.abs(analytic - numeric)))
    return float(np.max(np.abs(analytic[sel] - numeric[sel]) / np.abs(analytic[sel])))


@dataclass
class LeadingTermRow:
    m: int
    child_grad_mean: float
    non_child_grad_max: float
    predicted_leading: float


def predicted_leading(tree: DecompositionTree, m: int, c: float, kind: MaskKind | str) -> float:
    if MaskKind(kind) is MaskKind.CAUSAL:
        return -2.0 * c / (m - 1) ** 2
    return -2.0 * c / tree.level_bound[tree.height[m] - 1] ** 2


def leading_term_report(
    grad: np.ndarray, tree: DecompositionTree, link: LinkFunction = DEFAULT_LINK, kind: MaskKind | str = MaskKind.CAUSAL,
    mask: np.ndarray | None = None,
) -> list[LeadingTermRow]:
    from .model import make_mask

    c, _, _ = link_constants(link)
    mask = make_mask(tree, kind) if mask is None else mask
    rows = []
    for m in tree.internal:
        col = m - 1
        kids = [tree.child1[m] - 1, tree.child2[m] - 1]
        others = [j for j in np.nonzero(~mask[:, col])[0] if j not in kids]
        rows.append(
            LeadingTermRow(
                m=m,
                child_grad_mean=float(np.mean(grad[kids, col])),
                non_child_grad_max=float(np.max(np.abs(grad[others, col]))) if others else 0.0,
                predicted_leading=predicted_leading(tree, m, c, kind),
            )
        )
    return rows


# ---------------------------------------------------------------- per-sample gradients


def per_sample_output_grads(
    weights: AttentionWeights, inputs: np.ndarray, layout: Layout, out_col: int, link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(), chain: ChainResult | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """``(f, J)``: output column values and per-sample gradients ``J[i, j, m] = d f_i / d w[j, m]``."""
    S = weights.scores()
    if chain is None:
        chain = run_chain(inputs, S, layout, link, filt)
    n = inputs.shape[0]
    x, z, dphi, gate = chain.x[:n], chain.z[:n], chain.dphi[:n], chain.gate
    adj = np.zeros((n, layout.size))
    adj[:, out_col] = 1.0
    jac = np.zeros((n, layout.size, layout.size))
    d = layout.d
    for start, stop, L in reversed(layout.batches):
        zbar = adj[:, start:stop] * (gate[start:stop] * dphi[:, start:stop])
        if not zbar.any():
            continue
        Sb = S[:L, start:stop]
        diff = x[:, :L, None] - z[:, None, start:stop]
        jac[:, :L, start:stop] = Sb[None] * zbar[:, None, :] * diff
        if L > d:
            adj[:, d:L] += zbar @ Sb[d:].T
    return x[:, out_col].copy(), jac


def chain_jacobian_sqnorm(
    weights: AttentionWeights, inputs: np.ndarray, layout: Layout, link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(),
) -> np.ndarray:
    """Per-sample ``sum_a ||grad_W xhat_a||^2`` over all generated outputs of the free-running chain."""
    S = weights.scores()
    chain = run_chain(inputs, S, layout, link, filt)
    total = np.zeros(inputs.shape[0])
    for col in range(layout.d, layout.size):
        _, jac = per_sample_output_grads(weights, inputs, layout, col, link, filt, chain)
        total += np.sum(jac * jac, axis=(1, 2))
    return total


def tf_jacobian_sqnorm(weights: AttentionWeights, labeled: TokenMatrix, d: int, link: LinkFunction = DEFAULT_LINK) -> np.ndarray:
    """Per-sample ``||grad_W f(x)||^2`` for the teacher-forced outputs."""
    x = labeled.tokens
    S = weights.scores()
    z = x @ S[:, d:]
    _, dphi = phi_and_prime(link, z)
    # d f_m / d w[j, m] = phi'(z_m) sigma_j (x_j - z_m)
    diff = x[:, :, None] - z[:, None, :]
    g = (S[None, :, d:] * diff) * dphi[:, None, :]
    return np.sum(g * g, axis=(1, 2))


def tf_grad_norm_bound(sup_deriv: float, k: int) -> float:
    return 2.0 * sup_deriv * math.sqrt(k - 1)


def chain_grad_norm_bound(sup_deriv: float, v: int) -> float:
    """Explicit ceiling on ``||grad_W f||`` for the level-blocked chain, ``kappa = sup|phi'|``."""
    kap2 = sup_deriv**2
    return math.sqrt(4.0 * kap2 * kap2 / ((kap2 - 2.0) * (2.0 * kap2 - 1.0)) * (2.0 * kap2) ** v)


@dataclass
class GradBoundReport:
    regime: str
    max_norm: float
    min_norm: float
    bound: float
    worst_sample: int

    @property
    def ok(self) -> bool:
        return self.max_norm <= self.bound


def check_grad_bounds(
    weights: AttentionWeights, data: TokenMatrix, tree: DecompositionTree, link: LinkFunction = DEFAULT_LINK,
    regime: str = "teacher_forcing",
) -> GradBoundReport:
    """Per-sample model-gradient norms against the explicit constants."""
    _, sup, _ = link_constants(link)
    if regime == "teacher_forcing":
        sq = tf_jacobian_sqnorm(weights, data, tree.d, link)
        bound = tf_grad_norm_bound(sup, tree.k)
    elif regime == "end_to_end":
        layout = make_layout(weights.mask, tree.d, tree)
        sq = chain_jacobian_sqnorm(weights, data.tokens, layout, link)
        bound = chain_grad_norm_bound(sup, tree.v)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    norms = np.sqrt(sq)
    return GradBoundReport(regime, float(norms.max()), float(norms.min()), bound, int(np.argmax(norms)))
