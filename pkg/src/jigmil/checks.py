"""Finite-difference verification suite for every differentiable primitive
and for the full joint objective. Used by the ``gradcheck`` CLI command and
the acceptance tests."""

from dataclasses import dataclass

import numpy as np

from . import diffengine as de, jigsaw, pooling
from .config import TrainConfig
from .data import PatchBag
from .encoder import gat_layer_forward, mlp_encode
from .graph import build_slide_graph
from .model import forward_bag, init_model

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_err: float

    @property
    def ok(self):
        return self.max_err < TOLERANCE


def _weighted(c):
    """Sum against a fixed random weight; catches transposed/mixed-up vjps."""

    def wrap(out):
        return de.sum_all(de.mul(out, out.tape.leaf(c)))

    return wrap


def _dense_sorted_segments(rng, size, max_segments):
    raw = np.sort(rng.integers(0, max_segments, size=size))
    return np.unique(raw, return_inverse=True)[1]


def _op_cases(rng):
    """(name, f, x0) triples, one random instance each. Every f is a
    deterministic Var -> scalar Var function."""
    cases = []

    b = rng.standard_normal((4, 3))
    w = _weighted(rng.standard_normal((2, 3)))
    cases.append(("matmul.wrt_a",
                  lambda x, b=b, w=w: w(de.matmul(x, x.tape.leaf(b))),
                  rng.standard_normal((2, 4))))

    a = rng.standard_normal((2, 4))
    w = _weighted(rng.standard_normal((2, 3)))
    cases.append(("matmul.wrt_b",
                  lambda x, a=a, w=w: w(de.matmul(x.tape.leaf(a), x)),
                  rng.standard_normal((4, 3))))

    for opname, op in (("add", de.add), ("sub", de.sub), ("mul", de.mul)):
        other = rng.standard_normal((1, 4))  # broadcasts over rows
        w = _weighted(rng.standard_normal((3, 4)))
        cases.append((f"{opname}.wrt_a",
                      lambda x, op=op, o=other, w=w: w(op(x, x.tape.leaf(o))),
                      rng.standard_normal((3, 4))))
        first = rng.standard_normal((3, 4))
        w = _weighted(rng.standard_normal((3, 4)))
        cases.append((f"{opname}.wrt_b_broadcast",
                      lambda x, op=op, f_=first, w=w: w(op(x.tape.leaf(f_), x)),
                      rng.standard_normal((1, 4))))

    w = _weighted(rng.standard_normal((3, 4)))
    cases.append(("scale", lambda x, w=w: w(de.scale(x, -1.7)),
                  rng.standard_normal((3, 4))))

    w = _weighted(rng.standard_normal((4, 3)))
    cases.append(("transpose", lambda x, w=w: w(de.transpose(x)),
                  rng.standard_normal((3, 4))))

    w = _weighted(rng.standard_normal((4, 3)))
    cases.append(("reshape", lambda x, w=w: w(de.reshape(x, 4, 3)),
                  rng.standard_normal((3, 4))))

    w = _weighted(rng.standard_normal((3, 3)))
    cases.append(("slice_rows", lambda x, w=w: w(de.slice_rows(x, 1, 4)),
                  rng.standard_normal((5, 3))))

    idx = rng.integers(0, 5, size=8)
    w = _weighted(rng.standard_normal((8, 3)))
    cases.append(("gather_rows", lambda x, idx=idx, w=w: w(de.gather_rows(x, idx)),
                  rng.standard_normal((5, 3))))

    seg = _dense_sorted_segments(rng, 9, 4)
    n_seg = int(seg.max()) + 1
    w = _weighted(rng.standard_normal((n_seg, 3)))
    cases.append(("segment_sum",
                  lambda x, s=seg, n=n_seg, w=w: w(de.segment_sum(x, s, n)),
                  rng.standard_normal((9, 3))))

    seg = _dense_sorted_segments(rng, 12, 4)
    sw = rng.uniform(0.1, 2.0, size=12)
    w = _weighted(rng.standard_normal((12, 1)))
    cases.append(("segment_softmax",
                  lambda x, s=seg, sw=sw, w=w: w(de.segment_softmax(x, s, sw)),
                  rng.standard_normal((12, 1))))

    for kind in de._ACTIVATIONS:
        x0 = rng.standard_normal((3, 4))
        x0[np.abs(x0) < 1e-3] = 0.1  # stay off the relu/leaky kinks
        w = _weighted(rng.standard_normal((3, 4)))
        cases.append((f"activation.{kind}",
                      lambda x, k=kind, w=w: w(de.activation(k, x)), x0))

    w = _weighted(rng.standard_normal((3, 4)))
    cases.append(("log", lambda x, w=w: w(de.log(x)),
                  rng.uniform(0.2, 3.0, size=(3, 4))))

    x0 = rng.uniform(-1.0, 1.0, size=(3, 4))
    x0[np.abs(np.abs(x0) - 0.5) < 1e-3] = 0.0  # stay off the clamp edges
    w = _weighted(rng.standard_normal((3, 4)))
    cases.append(("clip", lambda x, w=w: w(de.clip(x, -0.5, 0.5)), x0))

    cases.append(("sum_all", de.sum_all, rng.standard_normal((3, 4))))

    w = _weighted(rng.standard_normal((1, 3)))
    cases.append(("colsum_exact", lambda x, w=w: w(de.colsum_exact(x)),
                  rng.standard_normal((5, 3))))
    return cases


def _tiny_setup(rng, variant="graph-abmil+jigsaw", aux="positional"):
    """A small random bag, its graph, and a matching random-param model."""
    n, d1 = 9, 5
    bag = PatchBag(
        slide_id="check", patient_id="check", label=int(rng.integers(2)),
        centroids=rng.random((n, 2)), features=rng.standard_normal((n, d1)),
    )
    cfg = TrainConfig(
        k_nn=3, grid_g=3, gat_hidden=6, gat_layers=2, d4=4,
        model_variant=variant, aux_task=aux,
        seed=int(rng.integers(1 << 31)),
    )
    graph = build_slide_graph(bag, cfg.k_nn, cfg.grid_g)
    model = init_model(cfg, d1)
    return bag, graph, model


def _block_cases(rng):
    """Composite blocks checked as functions of one input at a time."""
    cases = []

    bag, graph, model = _tiny_setup(rng)
    w_g0 = model.gat_layers[0].w_g
    v0 = model.gat_layers[0].v
    w = _weighted(rng.standard_normal((9, 6)))

    def gat_f(wrt):
        def f(var, wrt=wrt):
            t = var.tape
            x = var if wrt == "x" else t.leaf(bag.features)
            wg = var if wrt == "w_g" else t.leaf(w_g0)
            vv = var if wrt == "v" else t.leaf(v0)
            h, _ = gat_layer_forward(x, graph, wg, vv)
            return w(h)

        return f

    cases += [
        ("gat_layer.wrt_x", gat_f("x"), bag.features),
        ("gat_layer.wrt_w_g", gat_f("w_g"), w_g0),
        ("gat_layer.wrt_v", gat_f("v"), v0),
    ]

    w1 = rng.standard_normal((6, 5)) * 0.5
    b1 = rng.standard_normal((1, 6)) * 0.2
    w2 = rng.standard_normal((6, 6)) * 0.5
    b2 = rng.standard_normal((1, 6)) * 0.2
    wm = _weighted(rng.standard_normal((9, 6)))
    cases.append((
        "mlp_encode.wrt_x",
        lambda var: wm(mlp_encode(
            var, var.tape.leaf(w1), var.tape.leaf(b1),
            var.tape.leaf(w2), var.tape.leaf(b2),
        )),
        bag.features,
    ))

    h0 = rng.standard_normal((7, 6))
    v_att0 = rng.standard_normal((4, 6)) * 0.5
    mu0 = rng.standard_normal((4, 1)) * 0.5
    beta_0 = rng.standard_normal((6, 1)) * 0.5
    bias0 = rng.standard_normal((1, 1)) * 0.1
    y_pool = int(rng.integers(2))

    def pool_f(wrt):
        def f(var, wrt=wrt):
            t = var.tape
            h = var if wrt == "h" else t.leaf(h0)
            v = var if wrt == "v_att" else t.leaf(v_att0)
            mu = var if wrt == "mu" else t.leaf(mu0)
            beta = var if wrt == "beta" else t.leaf(beta_0)
            bb = var if wrt == "beta0" else t.leaf(bias0)
            a = pooling.abmil_attention(h, v, mu)
            z = pooling.slide_embedding(h, a)
            return pooling.mil_loss(pooling.classify(z, beta, bb), [y_pool])

        return f

    pool_inputs = {"h": h0, "v_att": v_att0, "mu": mu0,
                   "beta": beta_0, "beta0": bias0}
    cases += [(f"pool_pipeline.wrt_{k}", pool_f(k), x0)
              for k, x0 in pool_inputs.items()]

    jw0 = rng.standard_normal((9, 6)) * 0.5
    jb0 = rng.standard_normal((1, 9)) * 0.2
    j_labels = rng.integers(0, 9, size=7)
    j_mask = np.sort(rng.choice(7, size=5, replace=False))

    def jig_f(wrt):
        def f(var, wrt=wrt):
            t = var.tape
            h = var if wrt == "h" else t.leaf(h0)
            jw = var if wrt == "w" else t.leaf(jw0)
            jb = var if wrt == "b" else t.leaf(jb0)
            probs = jigsaw.jigsaw_forward(h, jw, jb)
            return jigsaw.jigsaw_loss(probs, j_labels, j_mask)

        return f

    jig_inputs = {"h": h0, "w": jw0, "b": jb0}
    cases += [(f"jigsaw.wrt_{k}", jig_f(k), x0) for k, x0 in jig_inputs.items()]

    hf0 = rng.standard_normal((7, 6))
    dw0 = rng.standard_normal((6, 1)) * 0.5
    db0 = rng.standard_normal((1, 1)) * 0.1

    def cons_f(wrt):
        def f(var, wrt=wrt):
            t = var.tape
            real = var if wrt == "h_real" else t.leaf(h0)
            fake = var if wrt == "h_fake" else t.leaf(hf0)
            dw = var if wrt == "w" else t.leaf(dw0)
            db = var if wrt == "b" else t.leaf(db0)
            return jigsaw.consistency_loss(real, fake, dw, db)

        return f

    cons_inputs = {"h_real": h0, "h_fake": hf0, "w": dw0, "b": db0}
    cases += [(f"consistency.wrt_{k}", cons_f(k), x0)
              for k, x0 in cons_inputs.items()]
    return cases


def joint_objective_fn(model, bag, graph, mask, lam, name):
    """The full supervised + weighted auxiliary loss as a function of the
    single parameter tensor ``name``; returns (f, x0)."""
    base = {k: v.copy() for k, v in model.named_params().items()}

    def f(var):
        tape = var.tape
        pvars = {k: tape.leaf(v) for k, v in base.items()}
        pvars[name] = var
        h, _, _, p = forward_bag(model, pvars, tape.leaf(bag.features), graph)
        mil = pooling.mil_loss(p, [bag.label])
        if model.config.aux_task == "positional":
            probs = jigsaw.jigsaw_forward(h, pvars["aux.w"], pvars["aux.b"])
            jig = jigsaw.jigsaw_loss(probs, graph.bin_labels, mask)
            return de.add(mil, de.scale(jig, lam))
        return mil

    return f, base[name]


def run_suite(trials=10, seed=20240501, coords_per_param=20):
    """Every primitive, every composite block, and the joint objective.

    Returns one CheckResult per check name with the max error observed
    across ``trials`` random instantiations.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(trials):
        for name, f, x0 in _op_cases(rng) + _block_cases(rng):
            err = de.grad_check(f, x0)
            worst[name] = max(worst.get(name, 0.0), err)

    joint_worst = 0.0
    for _ in range(trials):
        bag, graph, model = _tiny_setup(rng)
        mask = jigsaw.sample_mask(bag.n_patches, 0.9, rng)
        lam = float(rng.uniform(0.2, 2.0))
        for pname in model.named_params():
            f, x0 = joint_objective_fn(model, bag, graph, mask, lam, pname)
            err = de.grad_check(f, x0, coords=coords_per_param, rng=rng)
            joint_worst = max(joint_worst, err)
    worst["joint_objective"] = joint_worst
    return [CheckResult(name, err) for name, err in worst.items()]
