"""Hybrid accuracy/robustness objective.

``total = acc + alpha * rbt`` where ``acc`` is the per-class binary
cross-entropy averaged over every (pair, role) prediction and ``rbt`` is
the divergence between the role predictions of one (query, doc) pair,
averaged over the K(K-1)/2 role pairs and over the batch.

The default divergence is the symmetrised KL ``(KL(a,b) + KL(b,a)) / 2``;
``divergence="js"`` switches to the mixture-midpoint Jensen-Shannon.
Probabilities are clamped to ``[eps, 1 - eps]`` (and renormalised for the
divergences) before any log is taken. All gradient functions return
dLoss/dprobabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from .errors import DataError
from .types import ALL_ROLES, Role

Divergence = Literal["symmetric_kl", "js"]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    epsilon: float = 1e-7
    include_original_in_robust: bool = True
    divergence: Divergence = "symmetric_kl"

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise DataError("alpha must be >= 0")
        if self.epsilon <= 0:
            raise DataError("epsilon must be > 0")
        if self.divergence not in ("symmetric_kl", "js"):
            raise DataError(f"unknown divergence {self.divergence!r}")


@dataclass(frozen=True)
class LossBreakdown:
    acc: float
    rbt: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"acc": self.acc, "rbt": self.rbt, "total": self.total}


# -- accuracy --------------------------------------------------------------


def accuracy_loss(y: np.ndarray, y_hat: np.ndarray, epsilon: float = 1e-7) -> tuple[float, np.ndarray]:
    """Per-class binary cross-entropy of one prediction and its gradient."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DataError(f"label shape {y.shape} does not match prediction shape {y_hat.shape}")
    if not (np.isin(y, (0.0, 1.0)).all() and y.sum() == 1.0):
        raise DataError("label must be one-hot")
    p = np.clip(y_hat, epsilon, 1.0 - epsilon)
    loss = -float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    inside = (y_hat > epsilon) & (y_hat < 1.0 - epsilon)
    grad = np.where(inside, -y / p + (1.0 - y) / (1.0 - p), 0.0)
    return loss, grad


def _batch_accuracy(onehot: np.ndarray, probs: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    p = np.clip(probs, epsilon, 1.0 - epsilon)
    losses = -np.sum(onehot * np.log(p) + (1.0 - onehot) * np.log1p(-p), axis=-1)
    inside = (probs > epsilon) & (probs < 1.0 - epsilon)
    grads = np.where(inside, -onehot / p + (1.0 - onehot) / (1.0 - p), 0.0)
    return losses, grads


# -- divergences -----------------------------------------------------------


def _clamp(p: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clamp then renormalise along the last axis; returns (q, mask, sum)."""
    c = np.clip(p, epsilon, 1.0 - epsilon)
    s = c.sum(axis=-1, keepdims=True)
    mask = (p > epsilon) & (p < 1.0 - epsilon)
    return c / s, mask, s


def _clamp_backward(gq: np.ndarray, q: np.ndarray, mask: np.ndarray, s: np.ndarray) -> np.ndarray:
    gc = (gq - (gq * q).sum(axis=-1, keepdims=True)) / s
    return np.where(mask, gc, 0.0)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"distribution shapes differ: {a.shape} vs {b.shape}")
    return a, b


def kl_div(a, b, epsilon: float = 1e-7) -> float:
    a, b = _check_pair(a, b)
    qa, _, _ = _clamp(a, epsilon)
    qb, _, _ = _clamp(b, epsilon)
    return max(float(np.sum(qa * np.log(qa / qb))), 0.0)


def _divergence_terms(qa: np.ndarray, qb: np.ndarray, kind: Divergence):
    """Value and gradients w.r.t. the clamped distributions, along the last axis."""
    if kind == "symmetric_kl":
        log_ratio = np.log(qa / qb)
        value = 0.5 * np.sum((qa - qb) * log_ratio, axis=-1)
        ga = 0.5 * (log_ratio + 1.0 - qb / qa)
        gb = 0.5 * (-log_ratio + 1.0 - qa / qb)
    else:
        m = 0.5 * (qa + qb)
        la = np.log(qa / m)
        lb = np.log(qb / m)
        value = 0.5 * np.sum(qa * la + qb * lb, axis=-1)
        ga = 0.5 * la
        gb = 0.5 * lb
    return np.maximum(value, 0.0), ga, gb


def js_div(a, b, epsilon: float = 1e-7, divergence: Divergence = "symmetric_kl") -> float:
    """Symmetrised KL ``(KL(a,b) + KL(b,a)) / 2`` by default."""
    a, b = _check_pair(a, b)
    qa, _, _ = _clamp(a, epsilon)
    qb, _, _ = _clamp(b, epsilon)
    if divergence == "symmetric_kl":
        # summed so that swapping the arguments gives a bit-identical result
        return max(0.5 * (kl_div(a, b, epsilon) + kl_div(b, a, epsilon)), 0.0)
    value, _, _ = _divergence_terms(qa, qb, divergence)
    return float(value)


def _pairwise(preds: np.ndarray, epsilon: float, kind: Divergence) -> tuple[np.ndarray, np.ndarray]:
    """Mean pair divergence per group and its gradient; preds is (..., K, L)."""
    K = preds.shape[-2]
    q, mask, s = _clamp(preds, epsilon)
    value = np.zeros(preds.shape[:-2])
    gq = np.zeros_like(preds)
    pairs = [(m, n) for m in range(K) for n in range(m + 1, K)]
    for m, n in pairs:
        v, ga, gb = _divergence_terms(q[..., m, :], q[..., n, :], kind)
        value = value + v
        gq[..., m, :] += ga
        gq[..., n, :] += gb
    value = value / len(pairs)
    grad = _clamp_backward(gq / len(pairs), q, mask, s)
    return value, grad


def robust_loss(
    preds,
    config: LossConfig | None = None,
    reduction: Literal["mean", "sum"] = "mean",
) -> tuple[float, np.ndarray]:
    """Divergence over all role pairs of one (query, doc) group.

    ``preds`` is (K, L). ``reduction="mean"`` averages over the pairs,
    ``"sum"`` returns the plain pair sum. Returns the value and the
    gradient w.r.t. ``preds``.
    """
    config = config or LossConfig()
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[0] < 2:
        raise DataError("robust loss needs at least two aligned predictions")
    value, grad = _pairwise(preds, config.epsilon, config.divergence)
    if reduction == "sum":
        n_pairs = preds.shape[0] * (preds.shape[0] - 1) // 2
        return float(value) * n_pairs, grad * n_pairs
    return float(value), grad


# -- total -----------------------------------------------------------------


def stack_predictions(groups: Sequence[Mapping[Role, np.ndarray]], roles: Sequence[Role]) -> np.ndarray:
    """Turn per-group ``{role: probs}`` maps into a (G, K, L) array."""
    out = []
    for i, group in enumerate(groups):
        keyed = {Role.parse(r): v for r, v in group.items()}
        missing = [r.label for r in roles if r not in keyed]
        if missing:
            raise DataError(f"group {i} is missing predictions for role(s) {', '.join(missing)}")
        out.append([np.asarray(keyed[r], dtype=np.float64) for r in roles])
    return np.asarray(out, dtype=np.float64)


def total_loss(
    preds,
    labels,
    config: LossConfig | None = None,
    roles: Sequence[Role] | None = None,
) -> tuple[LossBreakdown, np.ndarray]:
    """Batch objective and its gradient w.r.t. ``preds``.

    ``preds`` is (G, K, L) (or a list of ``{role: probs}`` maps) with one
    row per included role; ``labels`` holds the G integer grades shared
    by all roles of a group.
    """
    config = config or LossConfig()
    roles = list(ALL_ROLES) if roles is None else [Role.parse(r) for r in roles]
    if not isinstance(preds, np.ndarray):
        preds = stack_predictions(preds, roles)
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.ndim != 3:
        raise DataError(f"predictions must be (groups, roles, levels), got shape {preds.shape}")
    G, K, L = preds.shape
    if K != len(roles):
        raise DataError(f"expected predictions for {len(roles)} roles, got {K}")
    if labels.shape != (G,):
        raise DataError(f"expected {G} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= L):
        raise DataError(f"labels must lie in [0, {L - 1}]")
    if config.epsilon >= 1.0 / L:
        raise DataError("epsilon must be smaller than 1/L")

    onehot = np.zeros_like(preds)
    onehot[np.arange(G), :, labels] = 1.0
    losses, g_acc = _batch_accuracy(onehot, preds, config.epsilon)
    n = max(G * K, 1)
    acc = float(losses.sum() / n)
    grad = g_acc / n

    robust_idx = [i for i, r in enumerate(roles) if config.include_original_in_robust or r is not Role.ORIGINAL]
    rbt = 0.0
    if len(robust_idx) >= 2 and G:
        sub = preds[:, robust_idx, :]
        per_group, g_rbt = _pairwise(sub, config.epsilon, config.divergence)
        rbt = float(per_group.sum() / G)
        if config.alpha:
            grad[:, robust_idx, :] += config.alpha * g_rbt / G
    total = acc + config.alpha * rbt
    return LossBreakdown(acc, rbt, total), grad
