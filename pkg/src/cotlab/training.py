"""Full-batch gradient descent for the four training regimes."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grads import chain_loss_and_grad, loss_weights, tf_loss_and_grad
from .link import DEFAULT_LINK, LinkFunction
from .model import (
    AttentionWeights,
    FilterConfig,
    FilterMode,
    MaskKind,
    make_layout,
    quantize,
    run_chain,
)
from .task import STREAM_WEIGHTS, DecompositionTree, TokenMatrix, make_rng

log = logging.getLogger(__name__)


class Regime(str, enum.Enum):
    DIRECT = "direct"
    COT = "cot"
    COT_TF = "cot_tf"
    COT_SC = "cot_sc"

    @property
    def mask_kind(self) -> MaskKind:
        return MaskKind.CAUSAL if self in (Regime.DIRECT, Regime.COT_TF) else MaskKind.BLOCK


# learning rates used for every CoT regime, keyed by k; the direct model runs at 1% of these
DEFAULT_ETA = {8: 15.0, 16: 50.0, 32: 100.0}
DIRECT_ETA_FACTOR = 0.01


def default_eta(regime: Regime | str, k: int) -> float:
    eta = DEFAULT_ETA.get(k)
    if eta is None:
        raise ValueError(f"no default learning rate for k={k}; pass eta explicitly")
    return eta * (DIRECT_ETA_FACTOR if Regime(regime) is Regime.DIRECT else 1.0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DataSpec:
    d: int
    k: int
    n: int
    n_prime: int = 0


@dataclass
class TrainConfig:
    regime: Regime
    eta: float
    epochs: int
    data: DataSpec
    quantize_every_step: bool = False
    loss_mix: float = 0.0
    filter: FilterConfig = field(default_factory=FilterConfig)
    oracle_eps: float | None = None  # L2 radius of a random gradient perturbation
    seed: int = 0

    def __post_init__(self):
        self.regime = Regime(self.regime)
        if not self.eta >= 0 or not math.isfinite(self.eta):
            raise ValueError("eta must be finite and nonnegative")
        if not 0 <= self.loss_mix <= 1:
            raise ValueError("loss_mix must lie in [0, 1]")
        if self.loss_mix and self.regime is not Regime.COT_SC:
            raise ValueError("loss_mix only applies to the self-consistency regime")
        if self.filter.active and self.regime is not Regime.COT_SC:
            raise ValueError("filters only apply to the self-consistency regime")

    @classmethod
    def for_regime(cls, regime: Regime | str, data: DataSpec, epochs: int = 350, eta: float | None = None, seed: int = 0,
                   **kw) -> "TrainConfig":
        """Defaults: table learning rates, weight filter at 0.4 and a 10% prediction-gradient mix for self-consistency."""
        regime = Regime(regime)
        if eta is None:
            eta = default_eta(regime, data.k)
        if regime is Regime.COT_SC:
            kw.setdefault("filter", FilterConfig.weight(0.4))
            kw.setdefault("loss_mix", 0.1)
        return cls(regime, eta, epochs, data, seed=seed, **kw)

    def to_json(self) -> dict:
        out = asdict(self)
        out["regime"] = self.regime.value
        out["filter"] = {"mode": self.filter.mode.value, "threshold": self.filter.threshold, "latch": self.filter.latch}
        return out


@dataclass
class EpochRecord:
    epoch: int
    cot_loss: float
    pred_loss: float
    filter_active: list[bool]  # per generated level; True means the level is being zeroed
    child_mass_mean: float


@dataclass
class Trace:
    records: list[EpochRecord]
    weights: AttentionWeights
    config: TrainConfig | None = None

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def deactivation_epochs(self) -> list[int | None]:
        """First epoch at which each level's filter is off."""
        if not self.records:
            return []
        out = []
        for ell in range(len(self.records[0].filter_active)):
            out.append(next((r.epoch for r in self.records if not r.filter_active[ell]), None))
        return out


def child_mass(weights: AttentionWeights, tree: DecompositionTree) -> np.ndarray:
    """Per internal row, sigma_{c1} + sigma_{c2}."""
    S = weights.scores()
    ci = tree.child_index
    cols = np.arange(tree.d, tree.size)
    return S[ci[:, 0], cols] + S[ci[:, 1], cols]


def cot_loss(
    weights: AttentionWeights, data: TokenMatrix, tree: DecompositionTree, link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(), scaled: bool = False, teacher_forcing: bool = False,
    augmented: TokenMatrix | None = None,
) -> float:
    """Squared error over all generated states, optionally divided by ``k - 1``."""
    scale = 1.0 / (tree.k - 1) if scaled else 1.0
    if teacher_forcing:
        return tf_loss_and_grad(weights, data, tree.d, link, scale)[0]
    layout = make_layout(weights.mask, tree.d, tree)
    return chain_loss_and_grad(weights, data, layout, loss_weights(layout, scale, 0.0), link, filt, augmented)[0]


def pred_loss(
    weights: AttentionWeights, data: TokenMatrix, tree: DecompositionTree, link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(), augmented: TokenMatrix | None = None,
) -> float:
    """``(1/2n) ||yhat - y||^2`` for the top node of the free-running chain."""
    layout = make_layout(weights.mask, tree.d, tree)
    rows = data.tokens if augmented is None else np.vstack([data.tokens, augmented.tokens])
    chain = run_chain(rows, weights.scores(), layout, link, filt, n_labeled=data.n)
    r = chain.x[: data.n, -1] - data.tokens[:, -1]
    return 0.5 * float(r @ r) / data.n


class _Objective:
    """Loss, gradient and bookkeeping for one regime on fixed data."""

    def __init__(self, config: TrainConfig, data: TokenMatrix, augmented: TokenMatrix | None, tree: DecompositionTree,
                 link: LinkFunction):
        self.cfg = config
        self.data = data
        self.aug = augmented if config.filter.mode is FilterMode.TOKEN else None
        self.tree = tree
        self.link = link
        self.kind = config.regime.mask_kind
        self.scale = 1.0 / (tree.k - 1)
        self.forced: frozenset = frozenset()
        self.layout = None

    def __call__(self, weights: AttentionWeights) -> tuple[float, float, np.ndarray, list[bool]]:
        """Returns (cot loss, pred loss, gradient, per-level filter-active flags)."""
        regime, tree = self.cfg.regime, self.tree
        if self.layout is None:
            self.layout = make_layout(weights.mask, tree.d, tree)
        layout = self.layout
        S = weights.scores()
        levels = [False] * tree.v
        if regime is Regime.COT_TF:
            cot, grad = tf_loss_and_grad(weights, self.data, tree.d, self.link, self.scale)
            chain = run_chain(self.data.tokens, S, layout, self.link)
            r = chain.x[:, -1] - self.data.tokens[:, -1]
            pred = 0.5 * float(r @ r) / self.data.n
            return cot, pred, grad, levels
        if regime is Regime.DIRECT:
            cw = loss_weights(layout, 0.0, 1.0)
        elif regime is Regime.COT:
            cw = loss_weights(layout, self.scale, 0.0)
        else:
            cw = loss_weights(layout, self.scale, self.cfg.loss_mix)
        filt = self.cfg.filter if regime is Regime.COT_SC else FilterConfig()
        _, grad, chain = chain_loss_and_grad(
            weights, self.data, layout, cw, self.link, filt, self.aug, self.forced, S=S
        )
        resid = chain.x[: self.data.n] - self.data.tokens
        resid[:, : tree.d] = 0.0
        per_col = np.sum(resid * resid, axis=0) / (2 * self.data.n)
        cot = self.scale * float(per_col[tree.d:].sum())
        pred = float(per_col[-1])
        if filt.active:
            levels = [not chain.level_open.get(ell, True) for ell in range(1, tree.v + 1)]
            if filt.latch:
                self.forced = self.forced | {ell for ell in range(1, tree.v + 1) if chain.level_open.get(ell, True)}
        return cot, pred, grad, levels


def train(
    config: TrainConfig, data: TokenMatrix, augmented: TokenMatrix | None, tree: DecompositionTree,
    link: LinkFunction = DEFAULT_LINK, init: AttentionWeights | None = None, gradient_hook=None,
) -> Trace:
    """Plain full-batch gradient descent from W = 0 (or ``init``).

    ``gradient_hook(grad, weights) -> grad`` may replace the exact gradient,
    e.g. with an approximate oracle.
    """
    weights = init.copy() if init is not None else AttentionWeights.zeros(tree, config.regime.mask_kind)
    if config.filter.mode is FilterMode.TOKEN and augmented is None:
        raise ValueError("the token filter needs augmented data")
    objective = _Objective(config, data, augmented, tree, link)
    noise_rng = make_rng(config.seed, STREAM_WEIGHTS)
    records = []
    for epoch in range(config.epochs + 1):
        cot, pred, grad, levels = objective(weights)
        if not (math.isfinite(cot) and math.isfinite(pred) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch} ({config.regime.value}, eta={config.eta})")
        records.append(EpochRecord(epoch, cot, pred, levels, float(child_mass(weights, tree).mean())))
        if epoch == config.epochs:
            break
        if config.oracle_eps:
            grad = grad + _ball_noise(noise_rng, grad, weights.mask, config.oracle_eps)
        if gradient_hook is not None:
            grad = gradient_hook(grad, weights)
        weights = weights.with_w(weights.w - config.eta * grad)
        if config.quantize_every_step:
            weights = quantize(weights)
        if epoch % 50 == 0:
            log.debug("%s epoch %d cot %.4f pred %.4f", config.regime.value, epoch, cot, pred)
    return Trace(records, weights, config)


def _ball_noise(rng: np.random.Generator, grad: np.ndarray, mask: np.ndarray, eps: float) -> np.ndarray:
    noise = np.where(mask, 0.0, rng.standard_normal(grad.shape))
    norm = np.linalg.norm(noise)
    return noise * (eps * rng.uniform() ** (1.0 / max(1, (~mask).sum())) / norm) if norm > 0 else noise


@dataclass
class EvalReport:
    max_abs_err: float
    mean_zero_one_err: float


def evaluate(
    weights: AttentionWeights, tree: DecompositionTree, fresh: TokenMatrix, link: LinkFunction = DEFAULT_LINK,
    filt: FilterConfig = FilterConfig(), augmented: TokenMatrix | None = None,
) -> EvalReport:
    """Free-running chain on fresh inputs; errors of the top node against the true parity."""
    layout = make_layout(weights.mask, tree.d, tree)
    rows = fresh.tokens[:, : tree.d]
    n = rows.shape[0]
    if augmented is not None:
        rows = np.vstack([rows, augmented.tokens[:, : tree.d]])
    chain = run_chain(rows, weights.scores(), layout, link, filt, n_labeled=n)
    yhat = chain.x[:n, -1]
    y = np.prod(fresh.tokens[:, [j - 1 for j in tree.instance.target]], axis=1)
    sign = np.where(yhat >= 0, 1.0, -1.0)
    return EvalReport(float(np.max(np.abs(yhat - y))), float(np.mean(sign != y)))
