"""End-to-end training: per-slide joint loss, Adam updates, the epoch loop
with auxiliary-weight calibration, patient-grouped k-fold cross-validation,
ROC-AUC evaluation, and attention export."""

from dataclasses import dataclass, field

import numpy as np

from . import calibrate, diffengine as de, jigsaw, pooling
from .errors import (
    ConfigError,
    DivergenceError,
    NumericError,
    UndefinedMetricError,
    UnsupportedOperationError,
)
from .graph import build_slide_graph
from .model import (
    RS_CORRUPT,
    RS_MASK,
    RS_SHUFFLE,
    forward_bag,
    forward_embedding,
    init_model,
    lift_params,
    stream,
)

RS_FOLDS = 6


@dataclass
class EpochRecord:
    epoch: int
    mil_loss: float
    jigsaw_loss: float
    lam: float
    train_auc: float


@dataclass
class RunHistory:
    """Per-epoch trace for one fold plus its final test AUC."""

    epochs: list = field(default_factory=list)
    test_auc: float = None


@dataclass
class StepResult:
    total_loss: float
    mil_loss: float
    jigsaw_loss: float  # None when the variant has no auxiliary head
    grads: dict


@dataclass
class CvResult:
    models: list
    histories: list
    test_aucs: list
    fold_ids: np.ndarray


def roc_auc(scores, labels):
    """Mann-Whitney AUC: (concordant + 0.5 * tied) / (pos * neg) pairs."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise ConfigError("scores and labels must have equal length")
    if not np.isin(labels, (0, 1)).all():
        raise ConfigError("labels must be 0 or 1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    _, inverse, counts = np.unique(scores[order], return_inverse=True,
                                   return_counts=True)
    starts = np.cumsum(counts) - counts
    avg_rank = starts + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(scores.size)
    ranks[order] = avg_rank[inverse]
    return float(
        (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    )


def kfold_split(records, k_folds, seed):
    """Fold id per record; patients shuffled by seed and dealt round-robin,
    so all slides of a patient share a fold."""
    if k_folds < 2:
        raise ConfigError(f"k_folds must be >= 2, got {k_folds}")
    patients = sorted({r.patient_id for r in records})
    if len(patients) < k_folds:
        raise ConfigError(
            f"{len(patients)} patients cannot fill {k_folds} folds"
        )
    perm = np.random.default_rng([seed, RS_FOLDS]).permutation(len(patients))
    fold_of = {patients[j]: i % k_folds for i, j in enumerate(perm)}
    return np.array([fold_of[r.patient_id] for r in records], dtype=np.int64)


def _build_graphs(bags, cfg):
    return [
        build_slide_graph(b, cfg.k_nn, cfg.grid_g, cfg.sigma_rule) for b in bags
    ]


def train_slide_step(bag, graph, model, lam, rng, corrupt_rng=None, epoch=0):
    """Forward + backward for one slide under the joint objective.

    The auxiliary loss is always evaluated when a head exists (its value
    feeds the calibration trace), but it is only recorded into the objective
    when lam != 0, so a zero weight leaves the supervised-branch gradients
    bit-for-bit identical to a model without the head.
    """
    cfg = model.config
    try:
        tape = de.Tape()
        pvars = lift_params(tape, model)
        x = tape.leaf(bag.features)
        h, _, _, p = forward_bag(model, pvars, x, graph)
        mil = pooling.mil_loss(p, [bag.label])

        jig = None
        if cfg.aux_task == "positional":
            mask = jigsaw.sample_mask(bag.n_patches, cfg.mask_keep_rate, rng)
            probs = jigsaw.jigsaw_forward(h, pvars["aux.w"], pvars["aux.b"])
            jig = jigsaw.jigsaw_loss(probs, graph.bin_labels, mask)
        elif cfg.aux_task == "consistency":
            crng = corrupt_rng if corrupt_rng is not None else rng
            corrupted = jigsaw.corrupt_features(bag.features, crng)
            h_fake = forward_embedding(model, pvars, tape.leaf(corrupted), graph)
            jig = jigsaw.consistency_loss(
                h, h_fake, pvars["disc.w"], pvars["disc.b"]
            )

        if jig is None or lam == 0.0:
            total = mil
        else:
            total = de.add(mil, de.scale(jig, lam))
        grads = de.backward(total)
    except NumericError as exc:
        raise DivergenceError(bag.slide_id, epoch, str(exc)) from exc
    return StepResult(
        total_loss=float(total.value[0, 0]),
        mil_loss=float(mil.value[0, 0]),
        jigsaw_loss=None if jig is None else float(jig.value[0, 0]),
        grads={name: grads.wrt(var) for name, var in pvars.items()},
    )


def _scores_with_graphs(model, bags, graphs):
    scores = np.empty(len(bags))
    for i, (bag, graph) in enumerate(zip(bags, graphs)):
        tape = de.Tape()
        pvars = lift_params(tape, model)
        _, _, _, p = forward_bag(model, pvars, tape.leaf(bag.features), graph)
        scores[i] = p.value[0, 0]
    return scores


def _graphs_for(model, bags):
    if model.uses_graph or model.config.aux_task == "positional":
        return _build_graphs(bags, model.config)
    return [None] * len(bags)


def predict_scores(model, bags, graphs=None):
    """P(y=1) per slide, forward only."""
    if graphs is None:
        graphs = _graphs_for(model, bags)
    return _scores_with_graphs(model, bags, graphs)


def evaluate(model, bags, graphs=None):
    """ROC-AUC of the slide scores plus the scores themselves."""
    scores = predict_scores(model, bags, graphs)
    labels = np.array([b.label for b in bags])
    return roc_auc(scores, labels), scores


def jigsaw_bin_accuracy(model, bags, graphs=None):
    """Top-1 grid-bin accuracy of the location head over all patches."""
    if model.jigsaw_head is None:
        raise UnsupportedOperationError("model has no location head")
    if graphs is None:
        graphs = _build_graphs(bags, model.config)
    correct = 0
    total = 0
    for bag, graph in zip(bags, graphs):
        tape = de.Tape()
        pvars = lift_params(tape, model)
        h = forward_embedding(model, pvars, tape.leaf(bag.features), graph)
        probs = jigsaw.jigsaw_forward(h, pvars["aux.w"], pvars["aux.b"])
        pred = probs.value.argmax(axis=1)
        correct += int((pred == graph.bin_labels).sum())
        total += bag.n_patches
    return correct / total


def train(bags, config, fold_index=0, graphs=None):
    """Run the epoch loop on one training split; deterministic given
    (seed, fold_index, config, data)."""
    labels = {b.label for b in bags}
    if len(bags) < 2 or labels != {0, 1}:
        raise ConfigError("training needs >= 2 slides with both labels present")
    d1s = {b.features.shape[1] for b in bags}
    if len(d1s) != 1:
        raise ConfigError(f"inconsistent feature dims across slides: {sorted(d1s)}")

    cfg = config
    if graphs is None:
        graphs = _build_graphs(bags, cfg)
    model = init_model(cfg, d1s.pop(), fold_index)
    params = model.named_params()
    adam_state = de.AdamState(params)
    has_aux = cfg.aux_task != "none"
    lam_state = calibrate.initial_state(
        mode=cfg.lambda_mode,
        alpha=cfg.lambda_alpha,
        beta=cfg.lambda_beta,
        n_lambda=cfg.n_lambda,
        fixed_value=cfg.lambda_fixed,
    )

    history = RunHistory()
    n = len(bags)
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, fold_index, RS_SHUFFLE, epoch).permutation(n)
        mil_sum = 0.0
        jig_sum = 0.0
        for si in order:
            si = int(si)
            step = train_slide_step(
                bags[si],
                graphs[si],
                model,
                lam_state.lambda_current if has_aux else 0.0,
                stream(cfg.seed, fold_index, RS_MASK, epoch, si),
                stream(cfg.seed, fold_index, RS_CORRUPT, epoch, si),
                epoch=epoch,
            )
            de.adam_step(
                params, step.grads, adam_state,
                lr=cfg.lr, weight_decay=cfg.weight_decay,
            )
            mil_sum += step.mil_loss
            if step.jigsaw_loss is not None:
                jig_sum += step.jigsaw_loss
        mean_mil = mil_sum / n
        mean_jig = jig_sum / n if has_aux else 0.0
        train_scores = _scores_with_graphs(model, bags, graphs)
        train_auc = roc_auc(train_scores, [b.label for b in bags])
        history.epochs.append(
            EpochRecord(
                epoch=epoch,
                mil_loss=mean_mil,
                jigsaw_loss=mean_jig,
                lam=lam_state.lambda_current,
                train_auc=train_auc,
            )
        )
        if has_aux:
            lam_state = calibrate.maybe_update(lam_state, mean_jig)
    return model, history


def cross_validate(bags, config, k_folds):
    """Patient-grouped k-fold CV; returns per-fold models, traces, AUCs."""
    fold_ids = kfold_split(bags, k_folds, config.seed)
    models = []
    histories = []
    test_aucs = []
    for fold in range(k_folds):
        train_bags = [b for b, f in zip(bags, fold_ids) if f != fold]
        test_bags = [b for b, f in zip(bags, fold_ids) if f == fold]
        model, history = train(train_bags, config, fold_index=fold)
        auc, _ = evaluate(model, test_bags)
        history.test_auc = auc
        models.append(model)
        histories.append(history)
        test_aucs.append(auc)
    return CvResult(
        models=models, histories=histories, test_aucs=test_aucs, fold_ids=fold_ids
    )


def export_attention(model, bag, graph=None):
    """Per-patch attention rows (patch_index, cx, cy, attention), in bag order."""
    if not model.uses_attention:
        raise UnsupportedOperationError(
            "the mean-pooling variant has no attention to export"
        )
    if graph is None and model.uses_graph:
        graph = build_slide_graph(
            bag, model.config.k_nn, model.config.grid_g, model.config.sigma_rule
        )
    tape = de.Tape()
    pvars = lift_params(tape, model)
    _, a, _, _ = forward_bag(model, pvars, tape.leaf(bag.features), graph)
    weights = a.value[:, 0]
    rows = np.empty((bag.n_patches, 4))
    rows[:, 0] = np.arange(bag.n_patches)
    rows[:, 1:3] = bag.centroids
    rows[:, 3] = weights
    return rows


def write_train_log(path, histories):
    """CSV epoch,fold,mil_loss,jigsaw_loss,lambda,train_auc (no timestamps)."""
    lines = ["epoch,fold,mil_loss,jigsaw_loss,lambda,train_auc"]
    for fold, hist in enumerate(histories):
        for rec in hist.epochs:
            lines.append(
                f"{rec.epoch},{fold},{rec.mil_loss!r},{rec.jigsaw_loss!r},"
                f"{rec.lam!r},{rec.train_auc!r}"
            )
    _write_lines(path, lines)


def write_metrics(path, test_aucs):
    lines = ["fold,test_auc"]
    lines += [f"{fold},{auc!r}" for fold, auc in enumerate(test_aucs)]
    _write_lines(path, lines)


def write_attention_csv(path, rows):
    """Attention export with 9 significant digits."""
    lines = ["patch_index,cx,cy,attention"]
    for idx, cx, cy, att in rows:
        lines.append(f"{int(idx)},{cx:.9g},{cy:.9g},{att:.9g}")
    _write_lines(path, lines)


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
