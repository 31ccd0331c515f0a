"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data/format/config error,
4 numerical failure (training divergence or a failed gradient check).
"""

import argparse
import sys
from pathlib import Path

from . import checks, trainer
from .config import TrainConfig
from .data import (
    SynthSpec,
    generate_synthetic_dataset,
    load_config,
    load_dataset,
    write_dataset,
)
from .errors import DataError, JigmilError, NumericError
from .graph import build_slide_graph, graph_stats
from .model import load_model, save_model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="jigmil",
        description="Spatially-aware multiple-instance learning at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", choices=["spatial", "presence"], default="spatial")
    p.add_argument("--slides", type=int, default=SynthSpec.n_slides)
    p.add_argument("--patches", type=int, default=SynthSpec.patches_per_slide)
    p.add_argument("--dim", type=int, default=SynthSpec.d1)
    p.add_argument("--seed", type=int, default=SynthSpec.seed)

    p = sub.add_parser("graph", help="print per-slide graph statistics as CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=TrainConfig.k_nn)
    p.add_argument("--sigma-rule", choices=["main", "appendix"], default="main")

    p = sub.add_parser("train", help="cross-validated training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="TrainConfig JSON (defaults otherwise)")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("attn", help="export per-patch attention for one slide")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--trials", type=int, default=10)
    return parser


def _cmd_synth(args):
    spec = SynthSpec(
        task=args.task,
        n_slides=args.slides,
        patches_per_slide=args.patches,
        d1=args.dim,
        seed=args.seed,
    )
    manifest, bags = generate_synthetic_dataset(spec)
    manifest_path = write_dataset(manifest, bags, args.out)
    print(manifest_path)
    return EXIT_OK


def _cmd_graph(args):
    manifest, bags = load_dataset(args.manifest)
    print("slide_id,n_patches,n_edges,min_degree,max_degree,sigma,degenerate_sigma")
    for bag in bags:
        g = build_slide_graph(bag, args.k, TrainConfig.grid_g, args.sigma_rule)
        s = graph_stats(bag.slide_id, g)
        print(
            f"{s['slide_id']},{s['n_patches']},{s['n_edges']},"
            f"{s['min_degree']},{s['max_degree']},{s['sigma']!r},"
            f"{s['degenerate_sigma']}"
        )
    return EXIT_OK


def _cmd_train(args):
    config = load_config(args.config) if args.config else TrainConfig()
    _, bags = load_dataset(args.manifest)
    result = trainer.cross_validate(bags, config, args.folds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer.write_train_log(out_dir / "train_log.csv", result.histories)
    trainer.write_metrics(out_dir / "metrics.csv", result.test_aucs)
    for fold, model in enumerate(result.models):
        save_model(model, out_dir / f"fold_{fold}.model")
    mean_auc = sum(result.test_aucs) / len(result.test_aucs)
    print(f"mean_test_auc,{mean_auc!r}")
    return EXIT_OK


def _cmd_eval(args):
    model = load_model(args.model)
    _, bags = load_dataset(args.manifest)
    auc, _ = trainer.evaluate(model, bags)
    print(f"{auc:.9g}")
    return EXIT_OK


def _cmd_attn(args):
    model = load_model(args.model)
    _, bags = load_dataset(args.manifest)
    matches = [b for b in bags if b.slide_id == args.slide]
    if not matches:
        raise DataError(f"slide {args.slide!r} not found in manifest")
    rows = trainer.export_attention(model, matches[0])
    trainer.write_attention_csv(args.out, rows)
    return EXIT_OK


def _cmd_gradcheck(args):
    results = checks.run_suite(trials=args.trials)
    failed = [r for r in results if not r.ok]
    print("check,max_rel_err")
    for r in results:
        print(f"{r.name},{r.max_err:.3e}")
    overall = max(r.max_err for r in results)
    status = "FAIL" if failed else "PASS"
    print(f"overall,{overall:.3e},{status}")
    return EXIT_NUMERIC if failed else EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "graph": _cmd_graph,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "attn": _cmd_attn,
    "gradcheck": _cmd_gradcheck,
}


def run(argv):
    """Parse argv and dispatch; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except JigmilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
