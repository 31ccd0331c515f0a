"""Slide-level aggregation and classification: attention pooling, the
attention-weighted slide embedding, mean pooling, the logistic head, and the
bag-level cross-entropy."""

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .encoder import glorot_uniform
from .errors import ContractError

PROB_CLAMP = 1e-12


@dataclass
class PoolParams:
    """Pooling/classifier parameters. v_att (d4, d2) and mu (d4, 1) exist
    only for attention variants; beta (d2, 1) and beta0 (1, 1) always do."""

    v_att: np.ndarray
    mu: np.ndarray
    beta0: np.ndarray
    beta: np.ndarray


def init_pool_params(d2, d4, rng, attention=True):
    return PoolParams(
        v_att=glorot_uniform(rng, d4, d2) if attention else None,
        mu=glorot_uniform(rng, d4, 1) if attention else None,
        beta0=np.zeros((1, 1)),
        beta=glorot_uniform(rng, d2, 1),
    )


def abmil_attention(h, v_att, mu):
    """Softmax over patches of mu^T tanh(V h_j); strictly positive, sums to 1."""
    n = h.value.shape[0]
    logits = de.matmul(de.tanh(de.matmul(h, de.transpose(v_att))), mu)
    return de.segment_softmax(logits, np.zeros(n, dtype=np.int64), np.ones(n))


def slide_embedding(h, a):
    """z = sum_j a_j h_j as a (1, d2) row; the weights must sum to 1."""
    total = a.value.sum()
    if abs(total - 1.0) > 1e-6:
        raise ContractError(f"attention weights sum to {total}, expected 1")
    return de.colsum_exact(de.mul(a, h))


def mean_pool(h):
    """Unweighted row mean; identical to slide_embedding with uniform weights."""
    n = h.value.shape[0]
    uniform = h.tape.leaf(np.full((n, 1), 1.0 / n))
    return slide_embedding(h, uniform)


def classify(z, beta, beta0):
    """Logistic probability sigmoid(beta0 + beta^T z) as a (1,1) Var."""
    return de.sigmoid(de.add(de.matmul(z, beta), beta0))


def mil_loss(p, y):
    """Mean binary cross-entropy over slides; probabilities are clamped to
    [1e-12, 1 - 1e-12] before the logs."""
    n = p.value.shape[0]
    y = np.asarray(y, dtype=np.float64).reshape(n, 1)
    tape = p.tape
    pc = de.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y_var = tape.leaf(y)
    ones = tape.leaf(np.ones((n, 1)))
    pos = de.mul(y_var, de.log(pc))
    neg = de.mul(de.sub(ones, y_var), de.log(de.sub(ones, pc)))
    return de.scale(de.sum_all(de.add(pos, neg)), -1.0 / n)
