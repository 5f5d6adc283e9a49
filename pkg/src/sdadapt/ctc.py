"""CTC loss, greedy decoding and a brute-force alignment oracle.

The blank symbol is index 0.  The loss is computed in log space over the
blank-augmented target (length 2|y|+1) and its gradient w.r.t. the input
log-probabilities comes from the forward-backward state occupancies.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .diffcore import DiffArray, DimensionError, UsageError, _node, as_array

BLANK = 0
NEG = -1e30

__all__ = ["BLANK", "InfeasibleTargetError", "min_frames", "ctc_loss", "ctc_loss_batch",
           "greedy_decode", "greedy_decode_batch", "brute_force_ctc", "collapse"]


class InfeasibleTargetError(ValueError):
    """Target cannot be aligned to the given number of frames."""


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that admit a CTC alignment of ``target``."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))


def ctc_loss_batch(log_probs, targets: Sequence[Sequence[int]]) -> DiffArray:
    """Per-utterance negative log-likelihoods, shape ``[B]``.

    ``log_probs`` is ``[B, T, V]``; all utterances share T.
    """
    log_probs = as_array(log_probs)
    if log_probs.ndim != 3:
        raise DimensionError(f"expected [B, T, V] log-probs, got {log_probs.shape}")
    B, T, V = log_probs.shape
    if len(targets) != B:
        raise DimensionError(f"{len(targets)} targets for batch of {B}")
    if T < 1:
        raise DimensionError("need at least one frame")
    lengths = np.array([len(t) for t in targets], dtype=np.int64)
    for tgt in targets:
        if any(not 0 < int(k) < V for k in tgt):
            raise ValueError(f"target ids must lie in [1, {V}): {list(tgt)}")
        need = min_frames(tgt)
        if need > T:
            raise InfeasibleTargetError(f"target of length {len(tgt)} needs {need} frames, have {T}")

    S = 2 * int(lengths.max(initial=0)) + 1
    ext = np.zeros((B, S), dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, 1:2 * len(tgt):2] = tgt
    valid = np.arange(S)[None, :] < (2 * lengths + 1)[:, None]
    skip = np.zeros((B, S), dtype=bool)
    if S > 2:
        skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid

    lp = log_probs.data
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid[:, None, :], emit, NEG)

    alpha = np.full((T, B, S), NEG)
    alpha[0, :, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[0, :, 1] = np.where(lengths > 0, emit[:, 0, 1], NEG)
    neg_col = np.full((B, 1), NEG)
    neg_col2 = np.full((B, 2), NEG)
    for t in range(1, T):
        prev = alpha[t - 1]
        s1 = np.concatenate([neg_col, prev[:, :-1]], axis=1)
        s2 = np.where(skip, np.concatenate([neg_col2, prev[:, :-2]], axis=1)[:, :S], NEG)
        alpha[t] = np.maximum(_lse3(prev, s1, s2) + emit[:, t], NEG)

    beta = np.full((T, B, S), NEG)
    last = 2 * lengths
    rows = np.arange(B)
    beta[T - 1, rows, last] = emit[rows, T - 1, last]
    has = lengths > 0
    beta[T - 1, rows[has], last[has] - 1] = emit[rows[has], T - 1, last[has] - 1]
    skip_next = np.zeros((B, S), dtype=bool)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        s1 = np.concatenate([nxt[:, 1:], neg_col], axis=1)
        s2 = np.where(skip_next, np.concatenate([nxt[:, 2:], neg_col2], axis=1)[:, :S], NEG)
        beta[t] = np.maximum(_lse3(nxt, s1, s2) + emit[:, t], NEG)

    end_a = alpha[T - 1, rows, last]
    end_b = np.where(has, alpha[T - 1, rows, np.maximum(last - 1, 0)], NEG)
    m = np.maximum(end_a, end_b)
    loglik = m + np.log(np.exp(end_a - m) + np.exp(end_b - m))
    if np.any(loglik < -1e29):
        raise InfeasibleTargetError("no alignment carries probability mass")
    loss = -loglik

    def rule(g):
        # occupancy of each extended state, emission counted once
        occ = alpha.transpose(1, 0, 2) + beta.transpose(1, 0, 2) - emit - loglik[:, None, None]
        occ = np.exp(np.minimum(occ, 0.0))
        occ = np.where(valid[:, None, :], occ, 0.0)
        onehot = np.zeros((B, S, V))
        onehot[rows[:, None], np.arange(S)[None, :], ext] = 1.0
        gl = -np.matmul(occ, onehot)
        return (gl * g[:, None, None],)

    return _node(loss, (log_probs,), rule, "ctc_loss")


def ctc_loss(log_probs, target: Sequence[int]) -> DiffArray:
    """Negative log of the total alignment probability of ``target`` (a scalar)."""
    log_probs = as_array(log_probs)
    if log_probs.ndim != 2:
        raise DimensionError(f"expected [T, V] log-probs, got {log_probs.shape}")
    from .diffcore import reshape
    per = ctc_loss_batch(reshape(log_probs, (1,) + log_probs.shape), [list(target)])
    return reshape(per, ())


def collapse(path: Sequence[int]) -> list[int]:
    out, prev = [], None
    for k in path:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def greedy_decode(log_probs) -> list[int]:
    """Frame argmax (lowest index wins ties), merge repeats, drop blanks."""
    data = log_probs.data if isinstance(log_probs, DiffArray) else np.asarray(log_probs)
    return collapse(np.argmax(data, axis=-1))


def greedy_decode_batch(log_probs) -> list[list[int]]:
    data = log_probs.data if isinstance(log_probs, DiffArray) else np.asarray(log_probs)
    return [collapse(row) for row in np.argmax(data, axis=-1)]


def brute_force_ctc(probs, target: Sequence[int], limit: int = 10 ** 6) -> float:
    """Sum of path probabilities whose collapse equals ``target``, by enumeration."""
    probs = np.asarray(probs, dtype=np.float64)
    T, V = probs.shape
    if V ** T > limit:
        raise UsageError(f"{V}^{T} paths exceeds the enumeration limit {limit}")
    target = [int(k) for k in target]
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            total += float(np.prod(probs[np.arange(T), path]))
    return total
