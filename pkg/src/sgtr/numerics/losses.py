"""Scalar losses. All log terms use a floor of 1e-12 so that zero
probabilities give a large finite penalty instead of -inf."""

from __future__ import annotations

import numpy as np

from .tensor import LOG_FLOOR, DiffValue, ShapeError, _result, log_softmax_rows, softmax_rows


def cross_entropy(logits: DiffValue, target, weights=None) -> DiffValue:
    """Mean softmax cross-entropy over rows.

    ``target`` is either an integer vector of class ids or an N x C matrix of
    target distributions. ``weights`` optionally rescales each row; the mean is
    then taken over the weight total.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x C logits, got {logits.shape}")
    n, c = logits.shape
    target = np.asarray(target)
    if target.ndim == 1:
        if target.shape[0] != n:
            raise ShapeError(f"cross_entropy: {n} rows but {target.shape[0]} targets")
        bad = np.flatnonzero((target < 0) | (target >= c))
        if bad.size:
            r = int(bad[0])
            raise ValueError(f"cross_entropy: invalid class index {int(target[r])} at row {r} (C={c})")
        dist = np.zeros((n, c))
        dist[np.arange(n), target.astype(np.int64)] = 1.0
    else:
        if target.shape != (n, c):
            raise ShapeError(f"cross_entropy: target shape {target.shape} vs logits {logits.shape}")
        dist = target.astype(np.float64)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return DiffValue(0.0)
    lsm = log_softmax_rows(logits)
    coef = -(dist * w[:, None]) / total
    val = float((coef * lsm.data).sum())

    def bw(g):
        lsm._accumulate(g * coef)

    return _result(np.asarray(val), (lsm,), bw, "cross_entropy")


def kl_probs(p: DiffValue, q: DiffValue, row_weights=None) -> DiffValue:
    """Row-averaged KL(p || q) between probability matrices.

    ``sum_c p log(max(p, floor)) - p log(max(q, floor))``.
    """
    if p.shape != q.shape or p.data.ndim != 2:
        raise ShapeError(f"kl: shape mismatch {p.shape} vs {q.shape}")
    n = p.shape[0]
    w = np.ones(n) if row_weights is None else np.asarray(row_weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return DiffValue(0.0)
    lp = np.log(np.maximum(p.data, LOG_FLOOR))
    lq = np.log(np.maximum(q.data, LOG_FLOOR))
    rw = (w / total)[:, None]
    val = float((rw * p.data * (lp - lq)).sum())

    def bw(g):
        if p.requires_grad:
            dlp = np.where(p.data > LOG_FLOOR, 1.0, 0.0)
            p._accumulate(g * rw * (lp - lq + dlp))
        if q.requires_grad:
            live = q.data > LOG_FLOOR
            q._accumulate(np.where(live, -g * rw * p.data / np.maximum(q.data, LOG_FLOOR), 0.0))

    return _result(np.asarray(val), (p, q), bw, "kl")


def kl_div(p_logits: DiffValue, q_logits: DiffValue, row_weights=None) -> DiffValue:
    """KL(softmax p || softmax q), averaged over rows."""
    return kl_probs(softmax_rows(p_logits), softmax_rows(q_logits), row_weights)


def mse(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * diff / n)
        if b.requires_grad:
            b._accumulate(-g * 2.0 * diff / n)

    return _result(np.asarray((diff * diff).mean()), (a, b), bw, "mse")


def smooth_l1(a: DiffValue, b: DiffValue, beta: float = 1.0) -> DiffValue:
    """Mean Huber-style loss: 0.5 r^2 / beta inside |r| < beta, |r| - 0.5 beta outside."""
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1: shape mismatch {a.shape} vs {b.shape}")
    r = a.data - b.data
    ar = np.abs(r)
    inside = ar < beta
    vals = np.where(inside, 0.5 * r * r / beta, ar - 0.5 * beta)
    n = r.size
    dr = np.where(inside, r / beta, np.sign(r)) / n

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * dr)
        if b.requires_grad:
            b._accumulate(-g * dr)

    return _result(np.asarray(vals.mean()), (a, b), bw, "smooth_l1")
