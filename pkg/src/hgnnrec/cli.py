"""Command-line pipeline: prepare, train, evaluate, recommend, explain, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data, evaluation, explain, training, tsg
from .errors import ConfigError, DataError, NumericalError
from .model import Ablation, Hyper, forward, load_checkpoint, save_checkpoint

SPLIT_FILES = {"train": "train.tsv", "validation": "val.tsv", "test": "test.tsv"}
VOCAB_FILE = "vocab.json"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _window(text: str) -> int:
    value = int(text)
    if value < 2:
        raise argparse.ArgumentTypeError(f"window must be >= 2, got {value}")
    return value


def _cutoffs(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad cutoff list {text!r}") from None
    if not values or any(k < 1 for k in values):
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return values


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _dims(text: str) -> dict[str, int]:
    out = {}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        if not sep or key.strip() not in ("N", "d", "H", "K"):
            raise argparse.ArgumentTypeError(f"bad dims entry {part!r}; use N=..,d=..,H=..,K=..")
        out[key.strip()] = int(value)
    return out


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def merge_config(parser: argparse.ArgumentParser, args: argparse.Namespace, path) -> argparse.Namespace:
    """Fill options not given on the command line from the config file, then from defaults.

    Options must be registered with ``default=argparse.SUPPRESS`` so that
    command-line presence can be detected; real defaults live in ``parser.hgn_defaults``.
    """
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    values = read_config(path) if path else {}
    for key, text in values.items():
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r}")
        if hasattr(args, key):
            continue  # the command line wins
        action = actions[key]
        convert = _bool if action.nargs == 0 else (action.type or str)
        try:
            setattr(args, key, convert(text))
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"config key {key}: {exc}") from None
    for key, default in parser.hgn_defaults.items():
        if not hasattr(args, key):
            setattr(args, key, default)
    return args


# ---------------------------------------------------------------------------
# model sidecar
# ---------------------------------------------------------------------------


def sidecar_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".json")


def log_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".log.csv")


def read_sidecar(checkpoint) -> tuple[float, Ablation]:
    """Return (T in seconds, ablation) recorded at training time; defaults if absent."""
    path = sidecar_path(checkpoint)
    if not path.exists():
        return training.TrainConfig().T, Ablation()
    meta = json.loads(path.read_text(encoding="utf-8"))
    config = meta.get("config", {})
    T = float(config.get("t_days", 7.0)) * tsg.DAY
    return T, Ablation(config.get("no_gat1", False), config.get("no_gat2", False), config.get("no_timespan", False))


def _load_model(args):
    params = load_checkpoint(args.checkpoint)
    T, ablation = read_sidecar(args.checkpoint)
    if getattr(args, "t_days", None) is not None:
        T = args.t_days * tsg.DAY
    return params, T, ablation


def _read_split(path) -> list[data.EncodedSample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing sample file {path}")
    return data.read_samples(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    with open(args.data, "rb") as fh:
        interactions = data.parse_interactions(fh)
    by_user = data.build_sequences(interactions, args.window)
    vocab = data.Vocabulary.from_interactions(interactions)
    splits = data.split(by_user)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, filename in SPLIT_FILES.items():
        counts[name] = data.write_samples((vocab.encode(s) for s in splits[name]), out / filename)
    vocab.save(out / VOCAB_FILE)
    for name, count in counts.items():
        print(f"{name}\t{count}")
    print(f"total\t{sum(counts.values())}")
    return EXIT_OK


def cmd_train(args) -> int:
    hyper = Hyper(d=args.d, heads=args.heads, k=args.k, gamma=args.gamma, mu=args.mu_days * tsg.DAY)
    if args.no_entropy:
        args.lambda_ent = 0.0
    fields = set(training.TrainConfig.field_names())
    config = training.TrainConfig(**{k: v for k, v in vars(args).items() if k in fields})
    src = Path(args.data)
    splits = {name: _read_split(src / filename) for name, filename in SPLIT_FILES.items() if name != "test"}
    vocab = data.Vocabulary.load(src / VOCAB_FILE)
    if not splits["train"]:
        raise DataError("training split is empty")
    if args.dump_adjacency:
        s = splits["train"][0]
        graph = tsg.build_graph(s.items, s.times, config.T, hyper.mu)
        Path(args.dump_adjacency).write_text(graph.to_csv(), encoding="utf-8")
    result = training.train(splits, len(vocab), hyper, config)
    save_checkpoint(result.params, args.out)
    training.write_log(result.log, log_path(args.out))
    meta = {"hyper": asdict(hyper), "config": asdict(config), "best_epoch": result.best_epoch}
    sidecar_path(args.out).write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    print(f"best epoch {result.best_epoch} of {len(result.log)}; checkpoint {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, T, ablation = _load_model(args)
    samples = _read_split(args.samples)
    if not samples:
        raise DataError(f"{args.samples}: no samples")
    if max(s.target for s in samples) >= params.n_items or max(max(s.items) for s in samples) >= params.n_items:
        raise DataError("sample item index outside the checkpoint vocabulary")
    with ThreadPoolExecutor(args.workers) as pool:
        report = evaluation.evaluate(params, samples, args.cutoffs, T, ablation, pool=pool)
    print(report.to_json())
    return EXIT_OK


def cmd_recommend(args) -> int:
    params, T, ablation = _load_model(args)
    vocab = data.Vocabulary.load(args.vocab)
    with open(args.history, "rb") as fh:
        events = sorted(data.parse_interactions(fh), key=lambda e: e.timestamp)
    events = events[-args.window:]
    if len(events) < 2:
        raise DataError("history needs at least two interactions")
    unknown = [e.item_id for e in events if e.item_id not in vocab.item_index]
    if unknown:
        raise DataError(f"history items not in vocabulary: {sorted(set(unknown))}")
    now = args.now if args.now is not None else events[-1].timestamp
    if now < events[-1].timestamp:
        raise DataError("--now precedes the last history event")
    sample = data.EncodedSample(-1, tuple(vocab.item_index[e.item_id] for e in events),
                                tuple(e.timestamp for e in events), 0, now)
    trace = forward(sample, np.arange(params.n_items), now, params, T, ablation)
    order = np.lexsort((np.arange(params.n_items), -trace.logit))[: args.top]
    for rank, item in enumerate(order, start=1):
        print(f"{rank}\t{vocab.items[item]}\t{trace.yhat[item]:.6f}")
    return EXIT_OK


def cmd_explain(args) -> int:
    params, T, ablation = _load_model(args)
    vocab = data.Vocabulary.load(args.vocab)
    if args.genres:
        vocab.set_genres(data.read_genre_file(args.genres))
    samples = _read_split(args.samples)
    if not 0 <= args.sample_id < len(samples):
        raise DataError(f"sample id {args.sample_id} out of range (0..{len(samples) - 1})")
    sample = samples[args.sample_id]
    scores = evaluation.catalog_scores(params, data.SampleArrays.from_samples([sample]), T, ablation)[0]
    top = int(np.lexsort((np.arange(params.n_items), -scores))[0])
    candidate = top if args.item is None else vocab.item_index.get(args.item)
    if candidate is None:
        raise DataError(f"item {args.item!r} not in vocabulary")
    trace = forward(sample, candidate, sample.target_time, params, T, ablation)
    explanation = explain.explain_prediction(trace, vocab)
    if args.assignments:
        explain.export_assignments([trace], args.assignments, vocab, [args.sample_id])
    print(explanation.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dims = {"N": 4, "d": 4, "H": 2, "K": 3, **args.dims}
    report = training.gradcheck(
        seed=args.seed, n=dims["N"], d=dims["d"], heads=dims["H"], k=dims["K"], gamma=args.gamma,
        lambda_ent=args.lambda_ent, lambda_l2=args.lambda_l2,
    )
    for name, err in report.max_rel_error.items():
        print(f"{name}\t{err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"max relative error {report.worst:.3e} (tolerance {report.tolerance:g}) {verdict} in {report.seconds:.2f}s")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _train_parser(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("train", help="fit a model on prepared samples",
                       description="Options may also come from --config (key = value, dashes become underscores).")
    defaults = {
        "data": None, "out": None, "d": 64, "heads": 2, "k": 5, "gamma": 0.8, "mu_days": 1.0,
        "learning_rate": 1e-3, "batch_size": 1024, "lambda_ent": 1e-4, "lambda_l2": 1e-4, "negatives": 1,
        "max_epochs": 200, "patience": 10, "seed": 0, "t_days": 7.0, "no_gat1": False, "no_gat2": False,
        "no_timespan": False, "no_entropy": False, "workers": os.cpu_count() or 1, "dump_adjacency": None,
    }
    S = argparse.SUPPRESS
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--data", default=S, help="directory written by prepare")
    p.add_argument("--out", default=S, help="checkpoint path; log and metadata are written beside it")
    p.add_argument("--d", type=_positive_int, default=S, help="embedding width (64)")
    p.add_argument("--heads", type=_positive_int, default=S, help="attention heads (2)")
    p.add_argument("--k", type=_positive_int, default=S, help="number of factors (5)")
    p.add_argument("--gamma", type=float, default=S, help="mix between feature and timespan attention (0.8)")
    p.add_argument("--mu-days", type=float, default=S, help="timespan scale in days (1)")
    p.add_argument("--learning-rate", type=float, default=S, help="Adam step size (0.001)")
    p.add_argument("--batch-size", type=_positive_int, default=S, help="samples per update (1024)")
    p.add_argument("--lambda-ent", type=float, default=S, help="entropy regularizer weight (1e-4); 0 disables it")
    p.add_argument("--lambda-l2", type=float, default=S, help="L2 weight (1e-4)")
    p.add_argument("--negatives", type=_positive_int, default=S, help="negatives per positive (1)")
    p.add_argument("--max-epochs", type=int, default=S, help="epoch budget (200)")
    p.add_argument("--patience", type=_positive_int, default=S, help="epochs without validation gain before stopping (10)")
    p.add_argument("--seed", type=int, default=S, help="single source of randomness (0)")
    p.add_argument("--t-days", type=float, default=S, help="edge timespan threshold in days (7)")
    p.add_argument("--no-gat1", action="store_true", default=S, help="skip node refinement")
    p.add_argument("--no-gat2", action="store_true", default=S, help="skip clustering; one factor per node")
    p.add_argument("--no-timespan", action="store_true", default=S, help="unit edge weights and no temporal scoring")
    p.add_argument("--no-entropy", action="store_true", default=S, help="same as --lambda-ent 0")
    p.add_argument("--workers", type=_positive_int, default=S, help="threads for batch work; never changes results")
    p.add_argument("--dump-adjacency", default=S, metavar="CSV", help="debug: write the first training graph")
    p.hgn_defaults = defaults
    return p


def build_parser() -> tuple[Parser, argparse.ArgumentParser]:
    parser = Parser(prog="hgnnrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("prepare", help="interaction CSV -> sample files and vocabulary")
    p.add_argument("--data", required=True, help="CSV with user_id,item_id,timestamp[,genres]")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--window", type=_window, default=12, help="window length N, at least 2 (12)")

    train_parser = _train_parser(sub)

    p = sub.add_parser("evaluate", help="Hit@K and RR@K over a sample file, as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True, help="sample file from prepare")
    p.add_argument("--cutoffs", type=_cutoffs, default=[5, 10], help="comma-separated K values (5,10)")
    p.add_argument("--t-days", type=float, default=None, help="override the recorded timespan threshold")
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)

    p = sub.add_parser("recommend", help="top items for one interaction history")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True, help="vocab.json from prepare")
    p.add_argument("--history", required=True, help="CSV with user_id,item_id,timestamp rows")
    p.add_argument("--now", type=int, default=None, help="prediction time (defaults to the last event)")
    p.add_argument("--top", type=_positive_int, default=10, help="number of items to print (10)")
    p.add_argument("--window", type=_window, default=12, help="most recent events used (12)")
    p.add_argument("--t-days", type=float, default=None, help="override the recorded timespan threshold")

    p = sub.add_parser("explain", help="factor breakdown of one prediction, as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True, help="vocab.json from prepare")
    p.add_argument("--samples", required=True, help="sample file from prepare")
    p.add_argument("--sample-id", type=int, required=True, help="0-based line in the sample file")
    p.add_argument("--genres", default=None, help="item_id,genres CSV (needed unless the vocabulary has genres)")
    p.add_argument("--item", default=None, help="explain this item instead of the top prediction")
    p.add_argument("--assignments", default=None, metavar="CSV", help="also export node assignments")
    p.add_argument("--t-days", type=float, default=None, help="override the recorded timespan threshold")

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_dims, default={}, help='sizes, e.g. "N=4,d=4,H=2,K=3"')
    p.add_argument("--gamma", type=float, default=0.8)
    p.add_argument("--lambda-ent", type=float, default=1e-4)
    p.add_argument("--lambda-l2", type=float, default=1e-4)
    return parser, train_parser


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "recommend": cmd_recommend,
    "explain": cmd_explain,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser, train_parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            merge_config(train_parser, args, args.config)
            missing = [k for k in ("data", "out") if getattr(args, k) is None]
            if missing:
                raise UsageError("train: missing " + ", ".join("--" + k for k in missing))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
