"""Dense 2-D float64 tensors with reverse-mode differentiation.

Every value is a (rows, cols) float64 array. Operations are recorded on a
``Tape``; ``backward`` replays the tape once in reverse and accumulates
vector-Jacobian products in a fixed order, so repeated backward passes are
bitwise identical.

Two reductions are computed with exactly rounded summation (``math.fsum``):
the per-segment softmax denominators and ``colsum_exact``. Exact rounding
makes those reductions independent of operand order, which is what lets the
attention-pooling path be *exactly* invariant to row permutation of its
input instead of merely invariant up to roundoff.
"""

import math

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateSegmentError,
    DimensionError,
    EvaluationError,
    NumericError,
)

LEAKY_RELU_SLOPE = 0.2  # standard GAT convention; fixed, see activation()


def as_tensor(x):
    """Coerce to a 2-D float64 array. Scalars become (1,1), vectors (n,1)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Var:
    """Handle to one tape node: the tape, its node index, and its value."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, self.tape.lift(other))

    def __radd__(self, other):
        return add(self.tape.lift(other), self)

    def __sub__(self, other):
        return sub(self, self.tape.lift(other))

    def __rsub__(self, other):
        return sub(self.tape.lift(other), self)

    def __mul__(self, other):
        return mul(self, self.tape.lift(other))

    def __rmul__(self, other):
        return mul(self.tape.lift(other), self)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive applications (inputs precede outputs)."""

    def __init__(self, validate=True):
        self._values = []
        self._parents = []
        self._vjps = []
        self.validate = validate

    def __len__(self):
        return len(self._values)

    def leaf(self, value):
        """Record an input tensor (parameter or data constant)."""
        return self._record("leaf", as_tensor(value), (), None)

    def lift(self, x):
        """Return x unchanged if it is a Var, else record it as a leaf."""
        return x if isinstance(x, Var) else self.leaf(x)

    def _record(self, op, value, parents, vjp):
        if self.validate and not np.isfinite(value).all():
            raise NumericError(f"{op} produced a non-finite value")
        idx = len(self._values)
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(self, idx, value)


class Gradients:
    """Per-node gradients from one backward pass."""

    def __init__(self, tape, slots):
        self._tape = tape
        self._slots = slots

    def wrt(self, var):
        """Gradient w.r.t. ``var``; zeros if the output never touched it."""
        g = self._slots[var.idx]
        if g is None:
            return np.zeros_like(self._tape._values[var.idx])
        return g


def backward(out):
    """Gradients of a scalar output w.r.t. every node on its tape.

    Visits each node exactly once in reverse recording order; accumulation
    order is fixed, so the result is deterministic.
    """
    if out.value.shape != (1, 1):
        raise ContractError(
            f"backward requires a scalar (1,1) output, got {out.value.shape}"
        )
    tape = out.tape
    slots = [None] * len(tape)
    slots[out.idx] = np.ones((1, 1))
    for idx in range(out.idx, -1, -1):
        g = slots[idx]
        if g is None:
            continue
        vjp = tape._vjps[idx]
        if vjp is None:
            continue
        for parent, pg in zip(tape._parents[idx], vjp(g)):
            if pg is None:
                continue
            if slots[parent] is None:
                slots[parent] = pg
            else:
                # out-of-place: a slot may be a view into another gradient
                slots[parent] = slots[parent] + pg
    return Gradients(tape, slots)


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _same_tape(*vars_):
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


def matmul(a, b):
    """Matrix product with dC·Bᵀ / Aᵀ·dC accumulation on backward."""
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {av.shape} @ {bv.shape}"
        )

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape._record("matmul", av @ bv, (a.idx, b.idx), vjp)


def add(a, b):
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape._record("add", av + bv, (a.idx, b.idx), vjp)


def sub(a, b):
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape._record("sub", av - bv, (a.idx, b.idx), vjp)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._record("mul", av * bv, (a.idx, b.idx), vjp)


def scale(a, c):
    """Multiply by a Python float constant."""
    c = float(c)

    def vjp(g):
        return (g * c,)

    return a.tape._record("scale", a.value * c, (a.idx,), vjp)


def transpose(a):
    def vjp(g):
        return (g.T,)

    return a.tape._record("transpose", a.value.T.copy(), (a.idx,), vjp)


def reshape(a, rows, cols):
    if rows * cols != a.value.size:
        raise DimensionError(
            f"cannot reshape {a.value.shape} to ({rows}, {cols})"
        )
    shape = a.value.shape

    def vjp(g):
        return (g.reshape(shape),)

    return a.tape._record("reshape", a.value.reshape(rows, cols), (a.idx,), vjp)


def slice_rows(a, start, stop):
    """Rows [start, stop) as a new tensor."""
    n = a.value.shape[0]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"row slice [{start}, {stop}) out of range for {n} rows")
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return a.tape._record("slice_rows", a.value[start:stop].copy(), (a.idx,), vjp)


def _scatter_add_rows(n_rows, idx, g):
    """out[idx[e]] += g[e], computed via sort + reduceat (deterministic)."""
    if g.shape[1] == 1:
        return np.bincount(idx, weights=g[:, 0], minlength=n_rows).reshape(-1, 1)
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    sums = np.add.reduceat(g[order], starts, axis=0)
    out = np.zeros((n_rows, g.shape[1]))
    out[sidx[starts]] = sums
    return out


def gather_rows(a, idx):
    """Select rows by index (duplicates allowed); backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"gather index out of range for {n} rows")

    def vjp(g):
        return (_scatter_add_rows(n, idx, g),)

    return a.tape._record("gather_rows", a.value[idx], (a.idx,), vjp)


def _check_segments(segments):
    segments = np.asarray(segments, dtype=np.int64)
    if segments.ndim != 1 or segments.size == 0:
        raise ContractError("segments must be a nonempty 1-D index array")
    steps = segments[1:] - segments[:-1]
    if steps.size and steps.min() < 0:
        raise ContractError("segment ids must be sorted ascending")
    if segments[0] != 0 or (steps.size and steps.max() > 1):
        raise ContractError("segment ids must cover 0..S-1 with no gaps")
    return segments


def segment_sum(a, segments, num_segments):
    """Sum rows of ``a`` into ``num_segments`` output rows by segment id."""
    segments = _check_segments(segments)
    if segments.size != a.value.shape[0]:
        raise DimensionError("one segment id per row required")
    if segments[-1] >= num_segments:
        raise DimensionError("segment id exceeds num_segments")
    starts = np.flatnonzero(np.r_[True, segments[1:] != segments[:-1]])
    sums = np.add.reduceat(a.value, starts, axis=0)
    out = np.zeros((num_segments, a.value.shape[1]))
    out[segments[starts]] = sums

    def vjp(g):
        return (g[segments],)

    return a.tape._record("segment_sum", out, (a.idx,), vjp)


def weighted_neighbor_sum(alpha, p, plan):
    """Edge-list message passing: out[j] = sum over edges (j, m) of
    alpha_edge * p[m], fused through a CSR product so the (edges, dims)
    intermediate never materializes.

    ``plan`` is a prebuilt index structure (see graph.MessagePlan) whose
    edges are sorted by (target, source); ``alpha`` is the per-edge
    coefficient column aligned with that order.
    """
    pv = p.value
    av = alpha.value
    if av.shape != (plan.tgt.size, 1):
        raise DimensionError(
            f"alpha must be ({plan.tgt.size}, 1), got {av.shape}"
        )
    if pv.shape[0] != plan.n:
        raise DimensionError(
            f"features have {pv.shape[0]} rows, plan expects {plan.n}"
        )
    flat = av[:, 0].copy()
    out = _csr_matmul(plan.n, plan.indptr, plan.src, flat, pv)

    def vjp(g):
        # d_alpha_e = g[tgt_e] . p[src_e], sampled from one dense product
        d_alpha = (g @ pv.T)[plan.tgt, plan.src].reshape(-1, 1)
        dp = _csr_matmul(
            plan.n, plan.indptr_t, plan.indices_t, flat[plan.perm_t], g
        )
        return d_alpha, dp

    return p.tape._record(
        "weighted_neighbor_sum", out, (alpha.idx, p.idx), vjp
    )


def segment_softmax(logits, segments, weights):
    """Weighted softmax within each segment of a column vector.

    ``out_e = w_e exp(l_e - m_s) / sum_{e' in s} w_e' exp(l_e' - m_s)`` with
    ``m_s`` the segment max logit. Weights are fixed (non-differentiable) and
    must be nonnegative with at least one positive entry per segment. The
    denominator is exactly rounded, so the output of a segment does not
    depend on the order of its entries.
    """
    segments = _check_segments(segments)
    lv = logits.value
    if lv.shape != (segments.size, 1):
        raise DimensionError(
            f"logits must be ({segments.size}, 1), got {lv.shape}"
        )
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.size != segments.size:
        raise DimensionError("one weight per logit required")
    if np.any(weights < 0):
        raise ContractError("segment_softmax weights must be nonnegative")

    starts = np.flatnonzero(np.r_[True, segments[1:] != segments[:-1]])
    ends = np.r_[starts[1:], segments.size]
    flat = lv[:, 0]
    seg_max = np.maximum.reduceat(flat, starts)
    terms = weights * np.exp(flat - seg_max[segments])
    term_list = terms.tolist()  # bulk-unbox once; fsum is far faster on floats
    denom = np.array([math.fsum(term_list[s:e]) for s, e in zip(starts, ends)])
    dead = np.flatnonzero(denom == 0.0)
    if dead.size:
        raise DegenerateSegmentError(int(segments[starts[dead[0]]]))
    out = (terms / denom[segments]).reshape(-1, 1)

    def vjp(g):
        # Softmax Jacobian: dl_e = out_e * (g_e - sum_{e' in s} g_e' out_e').
        gw = (g[:, 0] * out[:, 0])
        seg_dot = np.add.reduceat(gw, starts)
        return ((out[:, 0] * (g[:, 0] - seg_dot[segments])).reshape(-1, 1),)

    return logits.tape._record("segment_softmax", out, (logits.idx,), vjp)


_ACTIVATIONS = ("relu", "leaky_relu", "elu", "tanh", "sigmoid")


def _sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(kind, a, slope=LEAKY_RELU_SLOPE):
    """Elementwise nonlinearity with its analytic derivative on backward."""
    if kind not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation kind {kind!r}")
    x = a.value
    if kind == "leaky_relu" and not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must be in (0,1), got {slope}")

    if kind == "relu":
        y = np.maximum(x, 0.0)
        d = (x > 0).astype(np.float64)
    elif kind == "leaky_relu":
        y = np.where(x > 0, x, slope * x)
        d = np.where(x > 0, 1.0, slope)
    elif kind == "elu":
        # alpha = 1; derivative at 0 taken as 1
        ex = np.exp(np.minimum(x, 0.0))
        y = np.where(x > 0, x, ex - 1.0)
        d = np.where(x >= 0, 1.0, ex)
    elif kind == "tanh":
        y = np.tanh(x)
        d = 1.0 - y * y
    else:  # sigmoid
        y = _sigmoid(x)
        d = y * (1.0 - y)

    def vjp(g):
        return (g * d,)

    return a.tape._record(kind, y, (a.idx,), vjp)


def relu(a):
    return activation("relu", a)


def leaky_relu(a, slope=LEAKY_RELU_SLOPE):
    return activation("leaky_relu", a, slope)


def elu(a):
    return activation("elu", a)


def tanh(a):
    return activation("tanh", a)


def sigmoid(a):
    return activation("sigmoid", a)


def log(a):
    x = a.value
    if np.any(x <= 0):
        raise NumericError("log requires strictly positive input")

    def vjp(g):
        return (g / x,)

    return a.tape._record("log", np.log(x), (a.idx,), vjp)


def clip(a, lo, hi=None):
    """Clamp values; gradient passes only where the input was interior."""
    x = a.value
    y = np.clip(x, lo, hi)
    passthrough = (x > lo) if hi is None else (x > lo) & (x < hi)
    d = passthrough.astype(np.float64)

    def vjp(g):
        return (g * d,)

    return a.tape._record("clip", y, (a.idx,), vjp)


def sum_all(a):
    """Sum of all entries as a (1,1) scalar."""
    shape = a.value.shape

    def vjp(g):
        return (np.full(shape, g[0, 0]),)

    return a.tape._record("sum_all", np.array([[a.value.sum()]]), (a.idx,), vjp)


def colsum_exact(a):
    """Column sums as a (1, cols) tensor, exactly rounded per column.

    The exact rounding makes the result independent of row order, which the
    attention-weighted pooling relies on for exact permutation invariance.
    """
    cols = np.ascontiguousarray(a.value.T).tolist()
    out = np.array([[math.fsum(col) for col in cols]])
    shape = a.value.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record("colsum_exact", out, (a.idx,), vjp)


def grad_check(f, x, eps=1e-5, coords=None, rng=None):
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps a Var to a scalar Var and must be deterministic. ``coords``
    optionally limits the check to that many coordinates sampled with
    ``rng``. The error at a coordinate is |ad-fd| / max(1, |ad|, |fd|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"eps must be in (0, 1e-2], got {eps}")
    x = as_tensor(x).copy()

    def value_at(arr):
        t = Tape()
        out = f(t.leaf(arr))
        v = out.value
        if v.shape != (1, 1):
            raise ContractError("grad_check target must return a scalar")
        if not np.isfinite(v).all():
            raise EvaluationError("checked function returned a non-finite value")
        return float(v[0, 0])

    tape = Tape()
    var = tape.leaf(x)
    out = f(var)
    if out.value.shape != (1, 1):
        raise ContractError("grad_check target must return a scalar")
    if not np.isfinite(out.value).all():
        raise EvaluationError("checked function returned a non-finite value")
    ad = backward(out).wrt(var)

    flat_idx = np.arange(x.size)
    if coords is not None and coords < x.size:
        if rng is None:
            rng = np.random.default_rng(0)
        flat_idx = rng.choice(x.size, size=coords, replace=False)

    max_err = 0.0
    for i in flat_idx:
        r, c = divmod(int(i), x.shape[1])
        orig = x[r, c]
        x[r, c] = orig + eps
        f_plus = value_at(x)
        x[r, c] = orig - eps
        f_minus = value_at(x)
        x[r, c] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        adi = ad[r, c]
        err = abs(adi - fd) / max(1.0, abs(adi), abs(fd))
        max_err = max(max_err, err)
    return max_err


class AdamState:
    """First/second moment accumulators per named parameter plus a step count."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999,
              eps_adam=1e-8, weight_decay=0.0):
    """One in-place Adam update with bias correction.

    Weight decay is the classic L2 form added to the gradient before the
    moment updates. ``params`` and ``state`` are mutated; ``t`` increments
    by exactly one.
    """
    if lr <= 0:
        raise ContractError(f"lr must be positive, got {lr}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(
                f"grad shape {g.shape} != param shape {p.shape} for {name!r}"
            )
        if weight_decay != 0.0:
            g = g + weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps_adam)
