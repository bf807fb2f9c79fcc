"""CTC loss (log-space forward-backward) and greedy decoding. Id 0 is the blank."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import InfeasibleAlignmentError
from .tensor import Tensor

log = logging.getLogger(__name__)

BLANK = 0


def min_frames_for(labels: Sequence[int]) -> int:
    """Smallest T admitting an alignment: L plus one blank per adjacent repeat."""
    labels = list(labels)
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _logsumexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """``out[s] = a[s - k]`` with -inf where the source index is out of range."""
    out = np.full_like(a, -np.inf)
    if k > 0:
        out[k:] = a[:-k] if k < len(a) else out[k:]
    elif k < 0:
        out[:k] = a[-k:] if -k < len(a) else out[:k]
    return out


def ctc_forward_backward(log_probs: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Return ``-log P(labels | log_probs)`` and its gradient w.r.t. ``log_probs`` [T, V]."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len, v = lp.shape
    labels = [int(x) for x in labels]
    if t_len < min_frames_for(labels):
        raise InfeasibleAlignmentError(
            f"CTC alignment infeasible: T={t_len} frames for L={len(labels)} labels "
            f"(needs {min_frames_for(labels)})")
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    s_len = len(ext)
    # s-2 -> s is allowed for non-blank states whose label differs from the one two back
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    neg = -np.inf
    emit = lp[:, ext]  # [T, S]

    alpha = np.full((t_len, s_len), neg)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        cand = np.stack([prev, _shift(prev, 1), np.where(skip, _shift(prev, 2), neg)])
        alpha[t] = _logsumexp(cand, 0) + emit[t]

    beta = np.full((t_len, s_len), neg)  # excludes the emission at t
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    skip_next = np.zeros(s_len, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        cand = np.stack([nxt, _shift(nxt, -1), np.where(skip_next, _shift(nxt, -2), neg)])
        beta[t] = _logsumexp(cand, 0)

    tail = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    log_p = float(tail)
    if not np.isfinite(log_p):
        raise InfeasibleAlignmentError(
            f"CTC alignment has zero probability: T={t_len}, L={len(labels)}")
    occ = np.exp(alpha + beta - log_p)  # [T, S] state posteriors
    grad = np.zeros_like(lp)
    for s in range(s_len):
        grad[:, ext[s]] -= occ[:, s]
    return -log_p, grad


def ctc_loss(log_probs, labels: Sequence[int] | Sequence[Sequence[int]], input_lengths=None,
             label_lengths=None, skip_infeasible: bool = False, stats: dict | None = None) -> Tensor:
    """Mean negative log-likelihood over instances.

    ``log_probs`` is [T, V] with a flat label list, or [B, T, V] with padded
    ``labels`` [B, L] plus ``input_lengths``/``label_lengths``. With
    ``skip_infeasible`` instances that admit no alignment are dropped and
    counted in ``stats["ctc_infeasible"]``.
    """
    lp = T.tensor(log_probs)
    single = lp.ndim == 2
    data = lp.data[None] if single else lp.data
    b = data.shape[0]
    if single:
        labels = [list(labels)]
    if input_lengths is None:
        input_lengths = [data.shape[1]] * b
    if label_lengths is None:
        label_lengths = [len(x) for x in labels]
    grads = np.zeros(data.shape, dtype=np.float64)
    total = 0.0
    used = 0
    for i in range(b):
        t_i = int(input_lengths[i])
        lab = [int(x) for x in list(labels[i])[:int(label_lengths[i])]]
        try:
            nll, g = ctc_forward_backward(data[i, :t_i], lab)
        except InfeasibleAlignmentError:
            if not skip_infeasible:
                raise
            if stats is not None:
                stats["ctc_infeasible"] = stats.get("ctc_infeasible", 0) + 1
            log.info("skipping infeasible CTC instance %d (T=%d, L=%d)", i, t_i, len(lab))
            continue
        total += nll
        grads[i, :t_i] = g
        used += 1
    if used == 0:
        raise InfeasibleAlignmentError("no feasible CTC instance in the batch")
    grads /= used
    if single:
        grads = grads[0]

    def back(g):
        return ((g * grads).astype(lp.dtype),)

    return T._make(np.asarray(total / used, dtype=lp.dtype), (lp,), back)


def ctc_greedy_decode(log_probs, length: int | None = None) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if length is not None:
        lp = lp[:length]
    best = np.argmax(lp, axis=-1)
    out = []
    prev = None
    for k in best:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out
