"""Linear-chain conditional random field: scoring, exact inference, Viterbi
decoding, and the negative log-likelihood with analytic gradients.

All recursions run in log space with max-subtracted log-sum-exp; sequences of
400+ steps underflow in linear space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_TAGS = 3  # None / Accel / Decel


@dataclass
class CrfParams:
    """Transition scores: K x K between-step matrix plus start/stop vectors."""

    transitions: np.ndarray
    start: np.ndarray
    stop: np.ndarray

    @classmethod
    def zeros(cls, k: int = N_TAGS) -> "CrfParams":
        return cls(
            transitions=np.zeros((k, k)),
            start=np.zeros(k),
            stop=np.zeros(k),
        )

    @property
    def k(self) -> int:
        return len(self.start)


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def _check(emissions: np.ndarray, params: CrfParams) -> np.ndarray:
    emissions = np.asarray(emissions, dtype=np.float64)
    if emissions.ndim != 2 or emissions.shape[0] < 1:
        raise ValueError(f"emissions must be (T>=1, K), got {emissions.shape}")
    if emissions.shape[1] != params.k:
        raise ValueError(
            f"emissions have {emissions.shape[1]} labels, params expect {params.k}"
        )
    return emissions


def crf_score(emissions: np.ndarray, path, params: CrfParams) -> float:
    """Score of one label path: start + emissions + transitions + stop."""
    emissions = _check(emissions, params)
    path = np.asarray(path, dtype=np.int64)
    s = params.start[path[0]] + emissions[np.arange(len(path)), path].sum()
    s += params.transitions[path[:-1], path[1:]].sum()
    s += params.stop[path[-1]]
    return float(s)


def crf_log_z(emissions: np.ndarray, params: CrfParams) -> float:
    """Log partition function by the forward recursion."""
    emissions = _check(emissions, params)
    alpha = params.start + emissions[0]
    for t in range(1, emissions.shape[0]):
        alpha = emissions[t] + _logsumexp(alpha[:, None] + params.transitions, axis=0)
    return float(_logsumexp(alpha + params.stop))


def crf_viterbi(emissions: np.ndarray, params: CrfParams):
    """Best path and its score; ties break to the lowest label index.

    Returns (path as int array, score).
    """
    emissions = _check(emissions, params)
    t_len, k = emissions.shape
    delta = params.start + emissions[0]
    back = np.zeros((t_len, k), dtype=np.int64)
    for t in range(1, t_len):
        cand = delta[:, None] + params.transitions  # [from, to]
        back[t] = np.argmax(cand, axis=0)  # first max = lowest index
        delta = emissions[t] + cand[back[t], np.arange(k)]
    last = int(np.argmax(delta + params.stop))
    score = float((delta + params.stop)[last])
    path = np.zeros(t_len, dtype=np.int64)
    path[-1] = last
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, score


def crf_forward_backward(emissions: np.ndarray, params: CrfParams):
    """Exact marginals.

    Returns (log_z, unary [T,K], pairwise [T-1,K,K]); unary rows and every
    pairwise slice each sum to 1.
    """
    emissions = _check(emissions, params)
    t_len, k = emissions.shape
    alpha = np.zeros((t_len, k))
    alpha[0] = params.start + emissions[0]
    for t in range(1, t_len):
        alpha[t] = emissions[t] + _logsumexp(
            alpha[t - 1][:, None] + params.transitions, axis=0
        )
    log_z = float(_logsumexp(alpha[-1] + params.stop))

    beta = np.zeros((t_len, k))
    beta[-1] = params.stop
    for t in range(t_len - 2, -1, -1):
        beta[t] = _logsumexp(
            params.transitions + emissions[t + 1] + beta[t + 1], axis=1
        )

    unary = np.exp(alpha + beta - log_z)
    if t_len > 1:
        pairwise = np.exp(
            alpha[:-1, :, None]
            + params.transitions[None, :, :]
            + emissions[1:, None, :]
            + beta[1:, None, :]
            - log_z
        )
    else:
        pairwise = np.zeros((0, k, k))
    return log_z, unary, pairwise


def crf_nll_and_grad(emissions: np.ndarray, gold, params: CrfParams):
    """Negative log-likelihood of the gold path and gradients.

    Gradients are expectation minus observation: d_emissions = marginals -
    one-hot(gold), and analogously for transitions/start/stop.

    Returns (loss, d_emissions, CrfParams gradient holder).
    """
    emissions = _check(emissions, params)
    gold = np.asarray(gold, dtype=np.int64)
    if gold.shape != (emissions.shape[0],):
        raise ValueError(f"gold path shape {gold.shape} does not match T={emissions.shape[0]}")
    if gold.min() < 0 or gold.max() >= params.k:
        raise ValueError(f"gold labels must lie in [0, {params.k})")

    log_z, unary, pairwise = crf_forward_backward(emissions, params)
    loss = log_z - crf_score(emissions, gold, params)

    t_len, k = emissions.shape
    d_em = unary.copy()
    d_em[np.arange(t_len), gold] -= 1.0

    d_trans = pairwise.sum(axis=0)
    np.add.at(d_trans, (gold[:-1], gold[1:]), -1.0)
    d_start = unary[0].copy()
    d_start[gold[0]] -= 1.0
    d_stop = unary[-1].copy()
    d_stop[gold[-1]] -= 1.0

    return loss, d_em, CrfParams(transitions=d_trans, start=d_start, stop=d_stop)
