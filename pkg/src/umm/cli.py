"""``umm`` command-line interface: gen, train, eval and probe subcommands.

Exit codes: 0 on success, 1 for usage errors (bad flags, unreadable or
malformed inputs, shape mismatches), 2 for runtime failures such as
diverged training.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as umm_io
from .errors import DivergedTrainingError, InvalidArgumentError
from .evaluation import (EmbeddingTable, clustering_nmi, cosine_histogram, knn_accuracy,
                         mean_uncertainty, recall_at)
from .probes import OUTLIER_MODES, OutlierDatasetConfig, make_outlier_dataset, pac_bayes_bound, vanishing_probe
from .training import TrainConfig, embed, fit

PROBES = ("vanish", "pacbayes")


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list = field(default_factory=list)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; usage errors here are status 1
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _fail(code: int, message: str) -> CommandResult:
    print(message, file=sys.stderr)
    return CommandResult(code)


def sidecar_path(out: Path) -> Path:
    return out.with_name(out.stem + ".flags.jsonl")


def cmd_gen(args) -> CommandResult:
    try:
        cfg = OutlierDatasetConfig(classes=args.classes, per_class=args.per_class, input_dim=args.input_dim,
                                   class_separation=args.separation, outlier_fraction=args.outlier_fraction,
                                   outlier_mode=args.outlier_mode, seed=args.seed)
    except InvalidArgumentError as exc:
        return _fail(1, f"gen: {exc}")
    ds = make_outlier_dataset(cfg)
    out = Path(args.out)
    flags = Path(args.flags_out) if args.flags_out else sidecar_path(out)
    umm_io.write_dataset(out, ds.x, ds.labels)
    umm_io.write_flags(flags, ds.outlier)
    return CommandResult(0, [out, flags])


def holdout_split(m: int, fraction: float, seed: int):
    """Seeded ``(train_idx, holdout_idx)``; the holdout keeps at least one row."""
    perm = np.random.default_rng([seed, 0x484F]).permutation(m)
    n_hold = min(m - 1, max(1, int(round(fraction * m))))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def cmd_train(args) -> CommandResult:
    try:
        cfg = umm_io.load_config(args.config) if args.config else TrainConfig()
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        x, labels = umm_io.read_dataset(args.data)
    except (OSError, InvalidArgumentError) as exc:
        return _fail(1, f"train: {exc}")
    if args.eval_every is not None and args.eval_every < 1:
        return _fail(1, "train: --eval-every must be a positive integer")
    if not 0.0 < args.holdout < 1.0:
        return _fail(1, "train: --holdout must lie in (0, 1)")

    eval_fn = None
    if args.eval_every:
        if x.shape[0] < 2:
            return _fail(1, "train: need at least two rows to hold out an evaluation split")
        tr, ho = holdout_split(x.shape[0], args.holdout, cfg.seed)

        def eval_fn(model):
            mu_tr, _ = embed(model, x[tr], cfg)
            mu_ho, _ = embed(model, x[ho], cfg)
            return knn_accuracy(EmbeddingTable.from_mu(mu_tr, labels[tr]),
                                EmbeddingTable.from_mu(mu_ho, labels[ho]))

        x_fit = x[tr]
    else:
        x_fit = x

    try:
        state, history = fit(x_fit, cfg, eval_fn=eval_fn, eval_every=args.eval_every)
    except DivergedTrainingError as exc:
        path = umm_io.write_history(args.history_out, exc.history)
        print(f"train: {exc}", file=sys.stderr)
        return CommandResult(2, [path])
    ckpt = umm_io.save_checkpoint(args.checkpoint_out, state, cfg)
    hist = umm_io.write_history(args.history_out, history)
    return CommandResult(0, [ckpt, hist])


def metric_paths(metrics_out: Path) -> dict:
    stem = metrics_out.with_suffix("")
    return {"pos": Path(f"{stem}.pos_hist.csv"), "neg": Path(f"{stem}.neg_hist.csv")}


def cmd_eval(args) -> CommandResult:
    try:
        state, cfg = umm_io.load_checkpoint(args.checkpoint)
        x_tr, y_tr = umm_io.read_dataset(args.train_data)
        x_te, y_te = umm_io.read_dataset(args.test_data)
    except (OSError, KeyError, InvalidArgumentError) as exc:
        return _fail(1, f"eval: {exc}")
    dim = state.model.input_dim
    for name, x in (("train", x_tr), ("test", x_te)):
        if x.shape[1] != dim:
            return _fail(1, f"eval: {name} data has input dimension {x.shape[1]}, checkpoint expects {dim}")
    if x_te.shape[0] < 2:
        return _fail(1, "eval: test data needs at least two rows")

    mu_tr, std_tr = embed(state.model, x_tr, cfg)
    train_table = EmbeddingTable.from_mu(mu_tr, y_tr, std_tr)
    same = x_tr.shape == x_te.shape and np.array_equal(x_tr, x_te) and np.array_equal(y_tr, y_te)
    if same:
        test_table = train_table
    else:
        mu_te, std_te = embed(state.model, x_te, cfg)
        test_table = EmbeddingTable.from_mu(mu_te, y_te, std_te)

    metrics = {"knn_acc": knn_accuracy(train_table, test_table, top_k=args.top_k, tau=args.knn_tau)}
    metrics.update({f"recall@{k}": v for k, v in recall_at(test_table, (1, 2, 4)).items()})
    metrics["nmi"] = clustering_nmi(test_table, seed=args.seed)
    metrics["mean_sigma"] = mean_uncertainty(test_table.sigmas)
    metrics["self_excluded"] = int(same)

    out = Path(args.metrics_out)
    centers, pos, neg = cosine_histogram(test_table, bins=args.bins)
    paths = metric_paths(out)
    written = [umm_io.write_metrics(out, metrics),
               umm_io.write_histogram(paths["pos"], centers, pos),
               umm_io.write_histogram(paths["neg"], centers, neg)]
    if args.embeddings_out:
        written.append(umm_io.write_embeddings(args.embeddings_out, test_table.features,
                                               test_table.sigmas, test_table.labels))
    return CommandResult(0, written)


def cmd_probe(args) -> CommandResult:
    if args.name not in PROBES:
        return _fail(1, f"probe: unknown probe {args.name!r}; valid names: {', '.join(PROBES)}")
    try:
        if args.name == "pacbayes":
            report = {"probe": "pacbayes", "kl": args.kl, "n": args.n, "delta": args.delta,
                      "value": pac_bayes_bound(args.kl, args.n, args.delta)}
        else:
            r = vanishing_probe(n=args.n, tau=args.tau, k=args.k, sigma_scale=args.sigma_scale,
                                seed=args.seed, dim=args.dim)
            report = {"probe": "vanish", **r.to_dict()}
    except InvalidArgumentError as exc:
        return _fail(1, f"probe: {exc}")
    path = umm_io.atomic_write(args.report_out, json.dumps(report, sort_keys=True, indent=2) + "\n")
    return CommandResult(0, [path])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="umm", description="Uncertainty-aware unsupervised embedding learning on vector data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seed_flag(p, default):
        p.add_argument("--seed", type=int, default=default,
                       help="seed for every random draw of the command" +
                            (" (overrides the config file's seed)" if default is None else f" (default {default})"))

    g = sub.add_parser("gen", help="generate a labeled blob dataset with outliers")
    g.add_argument("--out", required=True, help="dataset output path (JSON lines)")
    g.add_argument("--flags-out", help="outlier-flag sidecar path (default: <out stem>.flags.jsonl)")
    g.add_argument("--classes", type=int, default=10, help="number of classes (default 10)")
    g.add_argument("--per-class", type=int, default=100, help="points per class (default 100)")
    g.add_argument("--input-dim", type=int, default=16, help="input dimension (default 16)")
    g.add_argument("--separation", type=float, default=4.0, help="pairwise class-center distance (default 4.0)")
    g.add_argument("--outlier-fraction", type=float, default=0.1, help="fraction of outlier points (default 0.1)")
    g.add_argument("--outlier-mode", default=OUTLIER_MODES[0], help=f"one of {', '.join(OUTLIER_MODES)}")
    seed_flag(g, 0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train an encoder and write a checkpoint and a history table")
    t.add_argument("--config", help="TOML training config (default: built-in defaults)")
    t.add_argument("--data", required=True, help="training dataset (JSON lines)")
    t.add_argument("--checkpoint-out", required=True, help="checkpoint output path")
    t.add_argument("--history-out", required=True, help="per-epoch history CSV output path")
    t.add_argument("--eval-every", type=int, help="run kNN on a held-out split every N epochs")
    t.add_argument("--holdout", type=float, default=0.2,
                   help="held-out fraction used when --eval-every is set (default 0.2)")
    seed_flag(t, None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on labeled data")
    e.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    e.add_argument("--train-data", required=True, help="memory-bank dataset for kNN")
    e.add_argument("--test-data", required=True, help="query dataset")
    e.add_argument("--metrics-out", required=True,
                   help="metrics CSV; cosine histograms go next to it as <stem>.pos_hist.csv/<stem>.neg_hist.csv")
    e.add_argument("--embeddings-out", help="optional JSON-lines export of test embeddings")
    e.add_argument("--top-k", type=int, default=200, help="kNN neighbours (default 200)")
    e.add_argument("--knn-tau", type=float, default=0.1, help="kNN vote temperature (default 0.1)")
    e.add_argument("--bins", type=int, default=20, help="cosine histogram bins (default 20)")
    seed_flag(e, 0)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help=f"run an analysis probe ({', '.join(PROBES)})")
    p.add_argument("name", help=f"probe name: {', '.join(PROBES)}")
    p.add_argument("--report-out", required=True, help="JSON report output path")
    p.add_argument("--kl", type=float, default=0.0, help="pacbayes: KL(Q||P) (default 0)")
    p.add_argument("--n", type=int, default=None, help="pacbayes: sample count (default 1); vanish: batch size (default 64)")
    p.add_argument("--delta", type=float, default=1.0, help="pacbayes: confidence parameter (default 1)")
    p.add_argument("--tau", type=float, default=0.07, help="vanish: temperature (default 0.07)")
    p.add_argument("--k", type=int, default=5, help="vanish: candidates per set (default 5)")
    p.add_argument("--sigma-scale", type=float, default=0.3, help="vanish: sampling std (default 0.3)")
    p.add_argument("--dim", type=int, default=128, help="vanish: feature dimension (default 128)")
    seed_flag(p, 0)
    p.set_defaults(func=cmd_probe)
    return parser


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, str(exc))
    if getattr(args, "command", None) == "probe" and args.n is None:
        args.n = 1 if args.name == "pacbayes" else 64
    try:
        return args.func(args)
    except InvalidArgumentError as exc:
        return _fail(1, f"{args.command}: {exc}")
    except (ArithmeticError, RuntimeError) as exc:
        return _fail(2, f"{args.command}: {exc}")


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
