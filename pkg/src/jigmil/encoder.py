"""Instance encoders: spatial graph-attention layers and the isolated-patch
MLP used by the plain attention-MIL baseline.

A GAT layer scores each directed edge (target j, source l) as
LeakyReLU(v^T [W x_j || W x_l]), normalizes the scores per target with a
softmax discounted by the Gaussian spatial weights (self-loop weight 1), and
emits ELU of the attention-weighted sum of projected sources.
"""

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .errors import ConfigError, DimensionError


@dataclass
class GatLayerParams:
    """One graph-attention layer: projection w_g (d_out, d_in) and the
    attention vector v (2*d_out, 1)."""

    w_g: np.ndarray
    v: np.ndarray


@dataclass
class MlpParams:
    """Two-layer ReLU MLP; biases are (1, d) row vectors."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def glorot_uniform(rng, rows, cols):
    """uniform(-a, a) with a = sqrt(6 / (rows + cols))."""
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def init_gat_params(d_in, hidden, n_layers, rng):
    """Glorot-initialized layer stack d_in -> hidden -> ... -> hidden."""
    if n_layers < 1:
        raise ConfigError("need at least one GAT layer")
    layers = []
    fan_in = d_in
    for _ in range(n_layers):
        layers.append(
            GatLayerParams(
                w_g=glorot_uniform(rng, hidden, fan_in),
                v=glorot_uniform(rng, 2 * hidden, 1),
            )
        )
        fan_in = hidden
    return layers


def init_mlp_params(d_in, hidden, rng):
    return MlpParams(
        w1=glorot_uniform(rng, hidden, d_in),
        b1=np.zeros((1, hidden)),
        w2=glorot_uniform(rng, hidden, hidden),
        b2=np.zeros((1, hidden)),
    )


def gat_layer_forward(x, graph, w_g, v):
    """One spatial-attention layer.

    x: (N, d_in) Var; w_g, v: parameter Vars. Returns (h, alpha) where h is
    the (N, d_out) refined embedding and alpha the per-directed-edge
    attention, grouped by target and summing to 1 within each group.
    """
    n = x.value.shape[0]
    if graph.n != n:
        raise DimensionError(f"graph has {graph.n} nodes but features have {n} rows")
    d_out = w_g.value.shape[0]
    plan = graph.message_plan()

    proj = de.matmul(x, de.transpose(w_g))  # (N, d_out)
    s_tgt = de.matmul(proj, de.slice_rows(v, 0, d_out))  # (N, 1)
    s_src = de.matmul(proj, de.slice_rows(v, d_out, 2 * d_out))
    scores = de.leaky_relu(
        de.add(de.gather_rows(s_tgt, plan.tgt), de.gather_rows(s_src, plan.src))
    )
    alpha = de.segment_softmax(scores, plan.tgt, plan.weights)
    h = de.elu(de.weighted_neighbor_sum(alpha, proj, plan))
    return h, alpha


def encode(x, graph, layer_params):
    """Stacked GAT layers; layer dims must chain from d1 to the output dim."""
    if not layer_params:
        raise ConfigError("need at least one GAT layer")
    h = x
    for wg_var, v_var in layer_params:
        h, _ = gat_layer_forward(h, graph, wg_var, v_var)
    return h


def mlp_encode(x, w1, b1, w2, b2):
    """Row-wise ReLU(W2 ReLU(W1 x + b1) + b2); row j depends only on row j."""
    hidden = de.relu(de.add(de.matmul(x, de.transpose(w1)), b1))
    return de.relu(de.add(de.matmul(hidden, de.transpose(w2)), b2))
