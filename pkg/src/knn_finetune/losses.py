"""Training objectives with analytic gradients w.r.t. the query.

Contrastive terms follow a per-positive denominator: each positive ``k_j`` is
scored against itself plus every negative, never against the other
positives.  Keys are treated as constants (no gradient flows to them).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LossContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: np.ndarray


def _logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    return float(m + np.log(np.sum(np.exp(a - m))))


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(logits, label: int) -> LossValue:
    """Softmax cross entropy; the gradient is w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError(f"non-finite logits: {logits}")
    if not 0 <= label < logits.shape[-1]:
        raise LossContractError(f"label {label} outside [0, {logits.shape[-1]})")
    lse = _logsumexp(logits)
    p = np.exp(logits - lse)
    grad = p.copy()
    grad[label] -= 1.0
    return LossValue(value=float(lse - logits[label]), grad=grad)


def _as_keys(keys, d: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.float64)
    if keys.size == 0:
        return keys.reshape(0, d)
    return np.atleast_2d(keys)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise LossContractError(f"temperature must be positive, got {tau}")


def _per_positive_terms(q, positives, negatives, tau):
    """Shared core: mean over positives of -log(e^{s_j} / (e^{s_j} + sum_neg e^{s_i})).

    With ``L_neg = logsumexp(s_neg)`` each term is ``softplus(L_neg - s_j)``
    and its gradient is ``(1 - p_j) (kbar - k_j) / tau`` where ``p_j`` is the
    softmax weight of the positive and ``kbar`` the softmax-weighted mean of
    the negatives.
    """
    q = np.asarray(q, dtype=np.float64)
    d = q.shape[0]
    pos = _as_keys(positives, d)
    neg = _as_keys(negatives, d)
    _check_tau(tau)
    if len(pos) == 0:
        raise LossContractError("at least one positive key is required")
    if len(neg) == 0:
        raise LossContractError("at least one negative key is required")
    return _terms_from_scores(pos @ q / tau, pos, neg @ q / tau, neg, tau)


def _terms_from_scores(s_pos, pos, s_neg, neg, tau):
    """Core of :func:`_per_positive_terms` on precomputed scaled similarities.

    Entries of ``s_neg`` equal to ``-inf`` drop out of the negative set, so
    ``neg`` may be a whole key matrix with the positives masked.
    """
    lse_neg = _logsumexp(s_neg)
    w_neg = np.exp(s_neg - lse_neg)
    kbar = w_neg @ neg
    gap = lse_neg - s_pos
    terms = np.logaddexp(0.0, gap)
    # 1 - p_j = sigmoid(gap)
    one_minus_p = np.exp(gap - terms)
    grad = (one_minus_p[:, None] * (kbar - pos)).mean(axis=0) / tau
    return float(terms.mean()), grad


def info_nce(q, k_pos, negatives, tau: float) -> LossValue:
    value, grad = _per_positive_terms(q, np.atleast_2d(k_pos), negatives, tau)
    return LossValue(value, grad)


def supervised_contrastive_full(q, positives, negatives, tau: float) -> LossValue:
    """Mean over *all* same-label keys."""
    value, grad = _per_positive_terms(q, positives, negatives, tau)
    return LossValue(value, grad)


def select_positives(q, candidates, ids, n_most: int, n_least: int) -> np.ndarray:
    """Indices of the ``n_most`` most and ``n_least`` least similar candidates.

    Candidates are ranked by ``q . k`` descending with ties broken by
    ascending id.  The result lists the most-similar group in rank order
    followed by the least-similar group in rank order; the groups never
    overlap and the most-similar group takes precedence.
    """
    if n_most < 0 or n_least < 0 or n_most + n_least < 1:
        raise LossContractError(f"need n_most, n_least >= 0 with sum >= 1, got {n_most}, {n_least}")
    q = np.asarray(q, dtype=np.float64)
    cand = _as_keys(candidates, q.shape[0])
    ids = np.asarray(ids)
    if len(cand) != len(ids):
        raise LossContractError("candidates and ids differ in length")
    n = len(cand)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    sims = cand @ q
    order = np.lexsort((ids, -sims))
    if n <= n_most + n_least:
        return order
    top = order[:n_most]
    bottom = order[n - n_least:] if n_least else order[:0]
    return np.concatenate([top, bottom])


def supervised_contrastive_selected(q, selected, negatives, tau: float) -> LossValue:
    """Mean over the selected positives only; same per-term form as the full loss."""
    value, grad = _per_positive_terms(q, selected, negatives, tau)
    return LossValue(value, grad)


def queue_contrastive(q, keys, same, ids, n_most: int, n_least: int, tau: float,
                      sims: np.ndarray | None = None) -> LossValue | None:
    """Selected-positive loss of ``q`` against a labeled key matrix.

    ``same`` marks the keys sharing the query's label.  Equivalent to
    :func:`select_positives` followed by :func:`supervised_contrastive_selected`
    but without copying the negatives out of ``keys``.  ``sims`` may carry a
    precomputed ``keys @ q``.  Returns ``None`` when there is no positive or
    no negative.
    """
    _check_tau(tau)
    if n_most < 0 or n_least < 0 or n_most + n_least < 1:
        raise LossContractError(f"need n_most, n_least >= 0 with sum >= 1, got {n_most}, {n_least}")
    same = np.asarray(same, dtype=bool)
    pos = np.flatnonzero(same)
    if len(pos) == 0 or len(pos) == len(same):
        return None
    if sims is None:
        sims = keys @ q
    ranked = pos[np.lexsort((np.asarray(ids)[pos], -sims[pos]))]
    n = len(ranked)
    if n > n_most + n_least:
        ranked = np.concatenate([ranked[:n_most], ranked[n - n_least:] if n_least else ranked[:0]])
    scaled = sims / tau
    s_neg = np.where(same, -np.inf, scaled)
    value, grad = _terms_from_scores(scaled[ranked], keys[ranked], s_neg, keys, tau)
    return LossValue(value, grad)


def combined_loss(l_ce: LossValue, l_sc: LossValue, lam: float) -> LossValue:
    if not 0.0 <= lam <= 1.0:
        raise LossContractError(f"lambda must lie in [0, 1], got {lam}")
    return LossValue(
        value=(1.0 - lam) * l_ce.value + lam * l_sc.value,
        grad=(1.0 - lam) * np.asarray(l_ce.grad) + lam * np.asarray(l_sc.grad),
    )
