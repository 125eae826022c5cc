"""Command line entry point: ``neatrec <subcommand> ...``.

Stages communicate through files so labels and reports can be regenerated
without retraining::

    neatrec synth --spec synth.cfg --out tx.csv
    neatrec ingest --input tx.csv --out-dir data --filter-same-category
    neatrec train --data data --out-dir model
    neatrec labelgen --stats data/stats.tsv --p-value 0.001 --out labels.tsv
    neatrec eval --labels labels.tsv --data data --model model --method pop,popco,neat
    neatrec recommend --model model --query item0003 --n 10
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from neatrec import __version__, corpus, gaussian, kernels, labelgen, trainer
from neatrec.config import parse_kv
from neatrec.evaluator import (
    DEFAULT_KS,
    DEFAULT_RECALL_SIZE,
    CosineScorer,
    EvaluationError,
    PopCoScorer,
    PopScorer,
    RecallSet,
    build_recall_set,
    evaluate_methods,
)

logger = logging.getLogger("neatrec")


class CommandError(Exception):
    pass


def _write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace,
                    resolved: dict, paths: dict, started: float) -> None:
    """Append one key/value block describing this run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        "[run]",
        f"subcommand = {subcommand}",
        f"version = {__version__}",
        f"timestamp = {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}",
        f"seed = {args.seed}",
        f"deterministic = {args.deterministic}",
        f"threads = {args.threads}",
    ]
    lines += [f"config.{k} = {v}" for k, v in resolved.items()]
    lines += [f"path.{k} = {v}" for k, v in paths.items()]
    lines.append(f"wallclock_seconds = {time.perf_counter() - started:.3f}")
    with open(out_dir / "manifest.txt", "a", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n\n")


def _config_values(args: argparse.Namespace) -> dict[str, str]:
    if not args.config:
        return {}
    return parse_kv(Path(args.config).read_text(encoding="utf-8"))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"{what} not found: {path}")
    return path


# --- subcommands ------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    values = _config_values(args)
    if args.spec:
        values.update(parse_kv(Path(args.spec).read_text(encoding="utf-8")))
    spec = corpus.SynthSpec.from_mapping(values)
    seed = args.seed if args.seed is not None else 0
    data = corpus.generate_synthetic(spec, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        corpus.write_transactions(data, fh)
    print(f"wrote {data.n_transactions} transactions to {out}")
    _write_manifest(out.parent, "synth", args, asdict(spec), {"out": out}, started)
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    values = _config_values(args)
    window = args.window if args.window is not None else int(values.get("window", 5))
    with open(_require(Path(args.input), "transaction file"), "rb") as fh:
        data = corpus.ingest_transactions(fh, args.delimiter)
    pairs = corpus.sample_pairs(data, window)
    n_sampled = len(pairs)
    if args.filter_same_category:
        pairs = corpus.filter_same_category(pairs, data.categories)
    stats = corpus.build_stats(pairs)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "pairs.tsv", "w", encoding="utf-8") as fh:
        corpus.write_pairs(pairs, fh)
    with open(out_dir / "stats.tsv", "w", encoding="utf-8") as fh:
        corpus.write_stats(stats, fh)
    with open(out_dir / "items.tsv", "w", encoding="utf-8") as fh:
        corpus.write_items(data, fh)

    summary = data.summary()
    summary.update(pairs_sampled=n_sampled, pairs_kept=len(pairs), distinct_pairs=len(stats.pair_freq))
    for key, value in summary.items():
        print(f"{key}: {value}")
    _write_manifest(out_dir, "ingest", args,
                    {"window": window, "filter_same_category": args.filter_same_category, **summary},
                    {"input": args.input, "out_dir": out_dir}, started)
    return 0


TRAIN_FLAGS = [f.name for f in fields(trainer.TrainConfig) if f.name not in ("seed", "threads", "deterministic")]


def resolve_train_config(args: argparse.Namespace) -> trainer.TrainConfig:
    """Built-in defaults < config file < command line flags."""
    values = {k: v for k, v in _config_values(args).items() if k in TRAIN_FLAGS or k == "seed"}
    for name in TRAIN_FLAGS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if args.seed is not None:
        values["seed"] = args.seed
    values["threads"] = args.threads
    values["deterministic"] = args.deterministic or args.threads == 1
    return trainer.TrainConfig.from_mapping(values)


def cmd_train(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config = resolve_train_config(args)
    data_dir = Path(args.data)
    with open(_require(data_dir / "pairs.tsv", "pairs file"), encoding="utf-8") as fh:
        pairs = corpus.read_pairs(fh)
    catalog = None
    if (data_dir / "items.tsv").exists():
        with open(data_dir / "items.tsv", encoding="utf-8") as fh:
            catalog = sorted(corpus.read_items(fh)[0])
    result = trainer.train(pairs, config, catalog=catalog, backend=args.backend)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "items.emb", "w", encoding="utf-8") as fh:
        gaussian.save_items(result.table, fh)
    if config.bpr:
        with open(out_dir / "users.emb", "w", encoding="utf-8") as fh:
            gaussian.save_users(result.table, fh)
    with open(out_dir / "loss.csv", "w", encoding="utf-8", newline="") as fh:
        trainer.write_trace(result.trace, fh)
    for rec in result.trace:
        print(f"epoch {rec.epoch}: mean loss {rec.mean_loss:.6f} ({rec.wallclock_seconds:.1f}s)")
    resolved = asdict(config)
    resolved["backend"] = result.backend
    _write_manifest(out_dir, "train", args, resolved, {"data": data_dir, "out_dir": out_dir}, started)
    return 0


def _load_stats(path: Path) -> corpus.CoPurchaseStats:
    with open(_require(path, "stats file"), encoding="utf-8") as fh:
        return corpus.read_stats(fh)


def cmd_labelgen(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    stats = _load_stats(Path(args.stats))
    if stats.total == 0:
        raise CommandError("co-purchase statistics are empty")
    result = labelgen.generate_labels(stats, args.p_value)
    records = labelgen.dedupe_symmetric(result.qualified)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        labelgen.write_labels(records, result.p_value, result.threshold, fh)
    diag = out.with_name(out.name + ".diag.json")
    with open(diag, "w", encoding="utf-8") as fh:
        labelgen.write_diagnostics(result, fh)
    for key, value in result.diagnostics().items():
        print(f"{key}: {value}")
    print(f"labels_written: {len(records)}")
    _write_manifest(out.parent, "labelgen", args,
                    {"p_value": args.p_value, "threshold": result.threshold},
                    {"stats": args.stats, "out": out, "diagnostics": diag}, started)
    return 0


def _load_table(model_dir: Path, users: bool = False) -> gaussian.EmbeddingTable:
    items_path = _require(model_dir / "items.emb", "item embeddings")
    users_path = model_dir / "users.emb"
    with open(items_path, encoding="utf-8") as fh:
        if users and users_path.exists():
            with open(users_path, encoding="utf-8") as ufh:
                return gaussian.load_table(fh, ufh)
        return gaussian.load_table(fh)


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    methods = [m.strip().lower() for m in args.method.split(",") if m.strip()]
    unknown = set(methods) - {"pop", "popco", "neat"}
    if unknown:
        raise CommandError(f"unknown method(s): {', '.join(sorted(unknown))}")
    ks = [int(k) for k in args.k.split(",")]
    with open(_require(Path(args.labels), "label file"), encoding="utf-8") as fh:
        _, labels = labelgen.read_labels(fh)
    data_dir = Path(args.data)
    stats = _load_stats(data_dir / "stats.tsv")

    scorers = []
    for method in methods:
        if method == "pop":
            with open(_require(data_dir / "items.tsv", "item file"), encoding="utf-8") as fh:
                counts = corpus.read_items(fh)[1]
            scorers.append(PopScorer(counts, depth=args.recall_size))
        elif method == "popco":
            scorers.append(PopCoScorer(stats))
        else:
            if args.model is None:
                raise CommandError("--model is required for method neat")
            scorers.append(CosineScorer(_load_table(Path(args.model))))
    report = evaluate_methods(labels, stats, scorers, ks, args.recall_size)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        report.write_csv(fh)
    print(report.format_table())
    _write_manifest(out.parent, "eval", args,
                    {"methods": ",".join(methods), "k": args.k, "recall_size": args.recall_size},
                    {"labels": args.labels, "data": data_dir, "model": args.model, "out": out}, started)
    return 0


def cmd_recommend(args: argparse.Namespace) -> int:
    table = _load_table(Path(args.model))
    if args.query not in table:
        raise CommandError(f"unknown query item {args.query!r}")
    scorer = CosineScorer(table)
    if not scorer.can_score(args.query):
        raise CommandError(f"query item {args.query!r} has a zero mean vector")
    if args.data:
        recall = build_recall_set(args.query, _load_stats(Path(args.data) / "stats.tsv"), args.recall_size)
        if recall is None:
            raise CommandError(f"query item {args.query!r} has no co-purchases")
        candidates = recall.candidates
    else:
        candidates = [item for item in table.item_ids if item != args.query]
    ranked = scorer.rank(RecallSet(args.query, candidates))[: args.n]
    q = table.item(args.query)
    for item in ranked:
        print(f"{item}\t{gaussian.cosine_score(q, table.item(item)):.6f}")
    return 0


# --- parser -------------------------------------------------------------------------


def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    def default(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--seed", type=int, default=default(None), help="random seed")
    parser.add_argument("--config", default=default(None), help="key/value config file")
    parser.add_argument("--deterministic", action="store_true", default=default(False),
                        help="single-threaded, bit-reproducible training")
    parser.add_argument("--threads", type=int, default=default(1), help="training worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neatrec", description="Gaussian item embeddings for complementary-item recommendation.")
    _add_global_flags(parser, suppress=False)
    # global flags are also accepted after the subcommand; suppressed defaults
    # keep a subparser from overwriting values given before it
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, suppress=True)
    parser.add_argument("--version", action="version", version=f"neatrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a planted synthetic transaction file")
    p.add_argument("--spec", help="synthetic corpus spec (key/value)")
    p.add_argument("--out", required=True, help="transaction CSV to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="sample co-purchase pairs and statistics")
    p.add_argument("--input", required=True, help="transaction CSV")
    p.add_argument("--out-dir", required=True, help="writes pairs.tsv, stats.tsv, items.tsv")
    p.add_argument("--window", type=int, default=None, help="co-purchase window in basket positions")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--filter-same-category", action="store_true", help="drop pairs within one category")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train Gaussian item embeddings")
    p.add_argument("--data", required=True, help="directory written by ingest")
    p.add_argument("--out-dir", required=True, help="writes items.emb, users.emb, loss.csv")
    p.add_argument("--backend", choices=["auto", "compiled", "python"], default="auto",
                   help="SGD kernel (auto prefers compiled)")
    for name in TRAIN_FLAGS:
        kind = next(str(f.type) for f in fields(trainer.TrainConfig) if f.name == name)
        conv = {"int": int, "str": str}.get(kind, float)
        spellings = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
        p.add_argument(*spellings, dest=name, type=conv, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("labelgen", parents=[common], help="chi-squared trustworthy labels")
    p.add_argument("--stats", required=True, help="stats.tsv written by ingest")
    p.add_argument("--p-value", type=float, default=0.001, help="significance level")
    p.add_argument("--out", required=True, help="labels file to write")
    p.set_defaults(func=cmd_labelgen)

    p = sub.add_parser("eval", parents=[common], help="HR@K / NDCG@K report")
    p.add_argument("--labels", required=True, help="labels file written by labelgen")
    p.add_argument("--data", required=True, help="training directory written by ingest")
    p.add_argument("--model", help="directory written by train")
    p.add_argument("--method", default="pop,popco,neat", help="comma-separated methods")
    p.add_argument("--k", default=",".join(map(str, DEFAULT_KS)), help="comma-separated cutoffs")
    p.add_argument("--recall-size", type=int, default=DEFAULT_RECALL_SIZE)
    p.add_argument("--out", required=True, help="report CSV to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recommend", parents=[common], help="rank complements for one item")
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True, help="query item id")
    p.add_argument("--n", type=int, default=10, help="number of recommendations")
    p.add_argument("--data", help="restrict candidates to the query's recall set")
    p.add_argument("--recall-size", type=int, default=DEFAULT_RECALL_SIZE)
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logger.debug("kernel backend: %s", kernels.BACKEND)
    try:
        return args.func(args)
    except (CommandError, corpus.CorpusError, labelgen.DataInconsistency, labelgen.DegenerateTable,
            trainer.TrainingDiverged, EvaluationError, gaussian.UnknownIdError,
            ValueError, OSError) as exc:
        print(f"neatrec {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
