"""Desk-scale simulation of the finite-sample hardness argument for end-to-end parity learning.

The per-target gradient of ``L_p = (1/2n) sum_i (f(x_i) - p(x_i))^2`` splits into a
target-free part and ``-(1/n) J^T p``, where ``J`` is the per-sample model
Jacobian, so gradients for a whole family cost a single matrix product.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .grads import per_sample_output_grads
from .link import DEFAULT_LINK, LinkFunction
from .model import AttentionWeights, MaskKind, causal_mask, make_layout, run_chain
from .task import STREAM_INPUTS, STREAM_TARGET, STREAM_TEST, make_rng

EXHAUSTIVE_CAP = 10_000


@dataclass(frozen=True)
class ParityFamily:
    d: int
    k: int
    members: tuple[tuple[int, ...], ...]  # 1-based index sets
    exhaustive: bool = True

    def __len__(self) -> int:
        return len(self.members)

    def indicator(self) -> np.ndarray:
        """``(d, |P|)`` 0/1 membership matrix."""
        out = np.zeros((self.d, len(self.members)), dtype=np.int64)
        for col, p in enumerate(self.members):
            out[[j - 1 for j in p], col] = 1
        return out

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """``(n, |P|)`` matrix of parity values ``p(x_i)`` for ±1 rows ``x``."""
        x = np.atleast_2d(x)[:, : self.d]
        neg = (x < 0).astype(np.int64)
        return 1.0 - 2.0 * ((neg @ self.indicator()) & 1)


def enumerate_family(d: int, k: int, cap: int = EXHAUSTIVE_CAP, monte_carlo: bool = False, seed: int = 0) -> ParityFamily:
    """All size-k subsets in lexicographic order, or a seeded sample of ``cap`` of them."""
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    total = math.comb(d, k)
    if total <= cap:
        return ParityFamily(d, k, tuple(itertools.combinations(range(1, d + 1), k)), True)
    if not monte_carlo:
        raise ValueError(f"C({d},{k}) = {total} exceeds cap {cap}; request monte_carlo")
    rng = make_rng(seed, STREAM_TARGET)
    seen: set[tuple[int, ...]] = set()
    while len(seen) < cap:
        seen.add(tuple(sorted(int(j) + 1 for j in rng.choice(d, size=k, replace=False))))
    return ParityFamily(d, k, tuple(sorted(seen)), False)


def gram_matrix(family: ParityFamily, inputs: np.ndarray) -> np.ndarray:
    """Empirical inner products ``(1/n) sum_i p(x_i) p'(x_i)``."""
    y = family.evaluate(inputs)
    g = y.T @ y / y.shape[0]
    np.fill_diagonal(g, 1.0)
    return g


def gram_delta(d: int, n: int) -> float:
    return math.sqrt(4.0 * d / n)


# ---------------------------------------------------------------- model


class DirectModel:
    """End-to-end chain with the plain causal mask; the last position is the prediction.

    ``k`` need not be a power of two: there is no decomposition tree, only
    ``k - 1`` generated positions.
    """

    def __init__(self, d: int, k: int, link: LinkFunction = DEFAULT_LINK):
        self.d, self.k, self.link = d, k, link
        self.size = d + k - 1
        self.mask = causal_mask(d, self.size)
        self.layout = make_layout(self.mask, d)
        self.n_params = int((~self.mask).sum())

    def zeros(self) -> AttentionWeights:
        return AttentionWeights(np.zeros((self.size, self.size)), self.mask, MaskKind.CAUSAL)

    def theta(self, weights: AttentionWeights) -> np.ndarray:
        return weights.w[~self.mask]

    def weights(self, theta: np.ndarray) -> AttentionWeights:
        w = np.zeros((self.size, self.size))
        w[~self.mask] = theta
        return AttentionWeights(w, self.mask, MaskKind.CAUSAL)

    def _rows(self, x: np.ndarray) -> np.ndarray:
        rows = np.zeros((x.shape[0], self.size))
        rows[:, : self.d] = x[:, : self.d]
        return rows

    def predict(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        chain = run_chain(self._rows(x), self.weights(theta).scores(), self.layout, self.link)
        return chain.x[:, -1]

    def jacobian(self, theta: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(f, J)`` with ``J[i]`` the flattened gradient of ``f(x_i)`` in theta."""
        f, jac = per_sample_output_grads(self.weights(theta), self._rows(x), self.layout, self.size - 1, self.link)
        return f, jac[:, ~self.mask]


def family_gradients(f: np.ndarray, jac: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``(|P|, D)`` gradients of ``(1/2n)||f - p||^2`` for every column of ``y``."""
    n = f.shape[0]
    return ((f[:, None] - y).T @ jac) / n


@dataclass
class VarianceReport:
    variance: float
    bound: float
    frame_bound: float  # lambda_max(G)/|P| * mean_i ||grad f(x_i)||^2, the step before the sup
    sup_grad_sq: float
    max_offdiag: float


def variance_over_family(grads: np.ndarray, family_size: int | None = None, d: int | None = None, n: int | None = None,
                         sup_grad_sq: float | None = None) -> float | tuple[float, float]:
    """Mean squared deviation of per-target gradients from their mean.

    With ``d, n, sup_grad_sq`` also returns the bound ``2 (1/|P| v sqrt(4d/n)) sup||grad f||^2``.
    """
    grads = np.asarray(grads, dtype=float)
    mean = grads.mean(axis=0)
    var = float(np.mean(np.sum((grads - mean) ** 2, axis=1)))
    if d is None:
        return var
    size = grads.shape[0] if family_size is None else family_size
    return var, variance_bound(size, d, n, sup_grad_sq)


def variance_bound(family_size: int, d: int, n: int, sup_grad_sq: float) -> float:
    return 2.0 * max(1.0 / family_size, gram_delta(d, n)) * sup_grad_sq


def model_variance(model: DirectModel, theta: np.ndarray, family: ParityFamily, inputs: np.ndarray) -> VarianceReport:
    """Exhaustive gradient variance of the direct model at ``theta`` with its bound."""
    f, jac = model.jacobian(theta, inputs)
    y = family.evaluate(inputs)
    grads = family_gradients(f, jac, y)
    sq = np.sum(jac * jac, axis=1)
    var, bound = variance_over_family(grads, len(family), family.d, inputs.shape[0], float(sq.max()))
    g = y.T @ y / y.shape[0]
    off = g - np.diag(np.diag(g))
    lam = float(np.linalg.eigvalsh(g)[-1])
    return VarianceReport(var, bound, lam / len(family) * float(sq.mean()), float(sq.max()), float(np.abs(off).max()))


# ---------------------------------------------------------------- oracle


@dataclass(frozen=True)
class OracleConfig:
    epsilon: float
    monte_carlo: int | None = None  # family sample size for the mean, None for exhaustive
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError("epsilon must be finite and nonnegative")


def adversarial_oracle(grad: np.ndarray, mean_grad: np.ndarray, config: OracleConfig | float) -> tuple[np.ndarray, bool]:
    """Return the family mean whenever the true gradient is more than epsilon away from it.

    The flag reports whether the mean was substituted.
    """
    eps = config.epsilon if isinstance(config, OracleConfig) else float(config)
    if np.linalg.norm(grad - mean_grad) > eps:
        return mean_grad, True
    return grad, False


# ---------------------------------------------------------------- mean parity


def _check_point(x, family: ParityFamily) -> np.ndarray:
    if not family.exhaustive:
        raise ValueError("mean parity needs the exhaustive family")
    x = np.asarray(x).ravel()[: family.d]
    if not np.all(np.abs(x) == 1):
        raise ValueError("x must be a ±1 vector")
    return x


def mean_parity_at_point(x, family: ParityFamily) -> float:
    """``(1/|P|) sum_p p(x)`` via the elementary symmetric polynomial ``e_k(x)``."""
    x = _check_point(x, family)
    neg = int(np.sum(x < 0))
    pos = family.d - neg
    k = family.k
    # choose i positive and k - i negative coordinates
    total = sum(math.comb(pos, i) * math.comb(neg, k - i) * (-1) ** (k - i) for i in range(k + 1))
    return total / math.comb(family.d, k)


def mean_parity_by_products(x, family: ParityFamily) -> float:
    """Reference implementation: expand every member as an explicit product."""
    x = _check_point(x, family)
    total = 0
    for p in family.members:
        prod = 1
        for j in p:
            prod *= int(x[j - 1])
        total += prod
    return total / len(family.members)


# ---------------------------------------------------------------- demo


@dataclass
class TrialResult:
    trial: int
    target: tuple[int, ...]
    final_l2: float
    oracle_interventions: int


@dataclass
class HardnessReport:
    trials: list[TrialResult]
    variance: float
    bound: float
    epsilon: float
    queries: int
    eta: float
    config: dict = field(default_factory=dict)

    @property
    def mean_loss(self) -> float:
        return float(np.mean([t.final_l2 for t in self.trials]))

    def summary(self) -> dict:
        return {"meanLoss": self.mean_loss, "variance": self.variance, "bound": self.bound, "epsilon": self.epsilon}


def hardness_demo(
    family: ParityFamily, trials: int = 20, queries: int = 100, n: int = 4096, epsilon: float | None = None,
    eta: float = 1.0, n_test: int = 4096, seed: int = 0, link: LinkFunction = DEFAULT_LINK, monte_carlo: int | None = None,
) -> HardnessReport:
    """Gradient descent on the direct objective with every gradient routed through the oracle.

    ``epsilon`` defaults to ``Var^(1/3)`` measured at the zero initialization.
    ``monte_carlo`` replaces the exact family mean by the mean over a seeded
    subsample of that size.
    """
    if trials < 1 or queries < 0:
        raise ValueError("need trials >= 1 and queries >= 0")
    model = DirectModel(family.d, family.k, link)
    inputs = make_rng(seed, STREAM_INPUTS).choice([-1.0, 1.0], size=(n, family.d))
    test = make_rng(seed, STREAM_TEST).choice([-1.0, 1.0], size=(n_test, family.d))
    y_train = family.evaluate(inputs)
    y_test = family.evaluate(test)
    theta0 = np.zeros(model.n_params)
    rep0 = model_variance(model, theta0, family, inputs)
    eps = rep0.variance ** (1.0 / 3.0) if epsilon is None else float(epsilon)
    cfg = OracleConfig(eps, monte_carlo, seed)
    mean_cols = np.arange(len(family))
    if monte_carlo is not None:
        mean_cols = make_rng(seed, STREAM_TARGET + 10).choice(len(family), size=min(monte_carlo, len(family)), replace=False)
    pick = make_rng(seed, STREAM_TARGET)
    results = []
    for trial in range(trials):
        t = int(pick.integers(len(family)))
        theta = theta0.copy()
        hits = 0
        for _ in range(queries):
            f, jac = model.jacobian(theta, inputs)
            g_true = family_gradients(f, jac, y_train[:, [t]])[0]
            g_mean = family_gradients(f, jac, y_train[:, mean_cols]).mean(axis=0)
            g, hit = adversarial_oracle(g_true, g_mean, cfg)
            hits += hit
            theta = theta - eta * g
            if not np.all(np.isfinite(theta)):
                raise FloatingPointError("hardness demo diverged")
        yhat = model.predict(theta, test)
        results.append(TrialResult(trial, family.members[t], float(np.mean((yhat - y_test[:, t]) ** 2)), hits))
    return HardnessReport(results, rep0.variance, rep0.bound, eps, queries, eta,
                          {"d": family.d, "k": family.k, "n": n, "seed": seed, "monte_carlo": monte_carlo})


__all__ = [
    "ParityFamily", "enumerate_family", "gram_matrix", "gram_delta", "DirectModel", "family_gradients",
    "variance_over_family", "variance_bound", "model_variance", "VarianceReport", "OracleConfig",
    "adversarial_oracle", "mean_parity_at_point", "mean_parity_by_products", "hardness_demo", "HardnessReport",
    "TrialResult",
]
