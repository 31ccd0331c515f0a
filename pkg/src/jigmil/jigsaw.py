"""Spatial auxiliary tasks.

The positional task bins each patch into a G x G grid over the normalized
coordinate square and trains a linear-softmax head to recover the bin from
the refined embedding, supervised on a random subset of patches. The
alternative consistency task corrupts features by row permutation over the
fixed topology and trains a logistic discriminator to reject the imposters.
"""

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .encoder import glorot_uniform
from .errors import ConfigError, ContractError, DataError, DimensionError

PROB_CLAMP = 1e-12
_BIN_EDGE_DELTA = 1e-12  # nudges coordinate 1.0 into the last bin


@dataclass
class JigsawHeadParams:
    """Affine location head: w (G^2, d2), b (1, G^2)."""

    w: np.ndarray
    b: np.ndarray


@dataclass
class DiscriminatorParams:
    """Logistic coherence discriminator: w (d2, 1), b (1, 1)."""

    w: np.ndarray
    b: np.ndarray


def init_jigsaw_params(d2, grid, rng):
    return JigsawHeadParams(
        w=glorot_uniform(rng, grid * grid, d2),
        b=np.zeros((1, grid * grid)),
    )


def init_discriminator_params(d2, rng):
    return DiscriminatorParams(w=glorot_uniform(rng, d2, 1), b=np.zeros((1, 1)))


def assign_bins(centroids, grid):
    """Row-major (y-major) grid-cell label per centroid, in [0, grid^2)."""
    if grid < 1:
        raise ConfigError(f"grid must be >= 1, got {grid}")
    c = np.asarray(centroids, dtype=np.float64)
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise DataError("centroids must lie in [0,1]^2 for binning")
    clamped = np.minimum(c, 1.0 - _BIN_EDGE_DELTA)
    col = np.floor(clamped[:, 0] * grid).astype(np.int64)
    row = np.floor(clamped[:, 1] * grid).astype(np.int64)
    return row * grid + col


def sample_mask(n, keep_rate, rng):
    """Indices kept independently with probability keep_rate; never empty."""
    if not 0.0 < keep_rate <= 1.0:
        raise ConfigError(f"keep_rate must be in (0,1], got {keep_rate}")
    if n < 1:
        raise ContractError("need at least one patch")
    kept = np.flatnonzero(rng.random(n) < keep_rate)
    if kept.size == 0:
        kept = np.array([rng.integers(n)], dtype=np.int64)
    return kept


def jigsaw_forward(h, w, b):
    """Row-wise softmax of the affine location head; rows sum to 1."""
    logits = de.add(de.matmul(h, de.transpose(w)), b)
    n, c = logits.value.shape
    flat = de.reshape(logits, n * c, 1)
    segments = np.repeat(np.arange(n, dtype=np.int64), c)
    probs = de.segment_softmax(flat, segments, np.ones(n * c))
    return de.reshape(probs, n, c)


def jigsaw_loss(probs, labels, mask):
    """Masked mean cross-entropy of the predicted bin distributions."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ContractError("supervision mask is empty")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.value.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise DataError("bin label out of range")
    picked = de.gather_rows(probs, mask)
    onehot = np.zeros((mask.size, c))
    onehot[np.arange(mask.size), labels[mask]] = 1.0
    logp = de.log(de.clip(picked, PROB_CLAMP))
    pick = de.mul(probs.tape.leaf(onehot), logp)
    return de.scale(de.sum_all(pick), -1.0 / mask.size)


def corrupt_features(features, rng):
    """Row permutation of the feature matrix; graph topology stays fixed."""
    features = np.asarray(features)
    return features[rng.permutation(features.shape[0])]


def consistency_loss(h_real, h_fake, w, b):
    """Binary cross-entropy of a logistic discriminator on real vs corrupted
    embeddings; sigmoid outputs are clamped away from 0 and 1."""
    if h_real.value.shape != h_fake.value.shape:
        raise DimensionError(
            f"embedding shapes differ: {h_real.value.shape} vs {h_fake.value.shape}"
        )
    n = h_real.value.shape[0]
    tape = h_real.tape
    d_real = de.sigmoid(de.add(de.matmul(h_real, w), b))
    d_fake = de.sigmoid(de.add(de.matmul(h_fake, w), b))
    ones = tape.leaf(np.ones((n, 1)))
    accept = de.log(de.clip(d_real, PROB_CLAMP))
    reject = de.log(de.clip(de.sub(ones, d_fake), PROB_CLAMP))
    return de.scale(de.sum_all(de.add(accept, reject)), -1.0 / n)
