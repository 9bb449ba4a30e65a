"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .dataset import (build_lda_classes, ingest, load_amazon, load_dataset, load_split,
                      p_core_filter, save_dataset, save_split, temporal_split)
from .embeddings import (EmbeddingMatrix, SyntheticTextProvider, fetch_embeddings,
                         provider_from_env, synthetic_embeddings)
from .evaluation import evaluate
from .exceptions import ConfigError
from .finetune import (TASKS, build_class_pairs, build_genitem_pairs, build_genlist_pairs,
                       build_rank_pairs, cached_text_embedder, resolution_summary,
                       resolve_hallucinations, write_pairs_jsonl)
from .hybrid import PopularityTable, popularity_bucket_hit_rates, position_hit_rates
from .pipeline import load_config, run
from .pooling import PoolingStrategy, strategy_names
from .reduction import make_reducer
from .registry import DEFAULT_SPACES, MODELS, build_model, fold_objective
from .tune import parse_space, search

logger = logging.getLogger("sessionlab")

POOLING_HELP = ("pooling strategies: " + ", ".join(strategy_names())
                + "; weighted names accept ',oldest_first' and ',raw' flags")


def _json_arg(text: str | None, what: str) -> dict:
    if not text:
        return {}
    try:
        path = Path(text)
        return json.loads(path.read_text() if path.exists() else text)
    except ValueError as exc:
        raise ConfigError(f"{what}: not valid JSON: {exc}") from None


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1, default=str))


def _load_embeddings(path: str | None) -> EmbeddingMatrix | None:
    return EmbeddingMatrix.load(path) if path else None


def _pooling_override(params: dict, args) -> dict:
    """Apply --pool-direction / --pool-normalize to every pooling parameter."""
    if args.pool_direction == "recent_first" and args.pool_normalize:
        return params
    out = dict(params)
    for key in ("pooling", "train_pooling", "prompt_pooling"):
        if key in out or key == "pooling":
            strategy = PoolingStrategy.parse(out.get(key, "mean"))
            if strategy.kind == "weighted":
                strategy = PoolingStrategy("weighted", strategy.technique,
                                           recency_first=args.pool_direction == "recent_first",
                                           normalize=args.pool_normalize)
                out[key] = str(strategy)
    return out


def _model_from_args(args, embeddings):
    if args.model not in MODELS:
        raise ConfigError(f"--model: unknown model {args.model!r}; choose from {', '.join(MODELS)}")
    params = _json_arg(args.params, "--params")
    if args.model in ("llmseqsim", "sknn_emb"):
        params = _pooling_override(params, args)
    return build_model(args.model, params, embeddings)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    if args.amazon:
        ds = load_amazon(args.interactions, args.catalog)
    else:
        ds = ingest(args.interactions, args.format, args.catalog)
    if args.pcore > 1:
        ds = p_core_filter(ds, args.pcore)
    save_dataset(ds, args.out)
    _print(asdict(ds.stats))
    return 0


def cmd_stats(args) -> int:
    ds = load_dataset(args.dataset)
    _print(asdict(ds.stats))
    return 0


def cmd_split(args) -> int:
    ds = load_dataset(args.dataset)
    split = temporal_split(ds, args.test_frac)
    out = Path(args.out or Path(args.dataset) / "split")
    save_split(split, out)
    _print({"train_sessions": len(split.train.sessions), "test_sessions": len(split.test),
            "folds": len(split.folds), "out": str(out)})
    return 0


def cmd_embed(args) -> int:
    ds = load_dataset(args.dataset)
    items = sorted(ds.catalog)
    if args.provider == "synthetic":
        sessions = [s.items for s in ds.sessions] if args.semantic else None
        matrix = synthetic_embeddings(items, args.dim, args.seed, sessions)
    else:
        provider = provider_from_env(args.provider, args.model, args.batch_size)
        texts = {i: ds.catalog[i].embedding_text(args.with_keywords) for i in items}
        matrix = fetch_embeddings(texts, provider, args.cache)
    matrix.save(args.out)
    _print({"items": len(matrix.item_ids), "dim": matrix.dim, "out": args.out})
    return 0


def cmd_reduce(args) -> int:
    matrix = EmbeddingMatrix.load(args.embeddings)
    reducer = make_reducer(args.method, args.k, args.seed)
    if args.method == "lda":
        if not args.dataset:
            raise ConfigError("--dataset: required for lda (class labels come from keywords)")
        labels = build_lda_classes(load_dataset(args.dataset).catalog)
        items = [i for i in matrix.item_ids if i in labels]
        reducer.fit(matrix.rows(items), [labels[i] for i in items])
    else:
        reducer.fit(matrix.vectors)
    reducer.save(args.out)
    if args.transformed:
        EmbeddingMatrix(matrix.item_ids, reducer.transform(matrix.vectors),
                        f"{matrix.provider}+{args.method}{args.k}").save(args.transformed)
    _print({"method": args.method, "input_dim": matrix.dim, "output_dim": reducer.output_dim_,
            "out": args.out})
    return 0


def cmd_evaluate(args) -> int:
    split = load_split(args.split)
    model = _model_from_args(args, _load_embeddings(args.embeddings)).fit(split.train)
    report = evaluate(model, split, tuple(args.ks), name=args.label or args.model,
                      config={"model": args.model, "params": model.get_params(deep=False)
                              if hasattr(model, "get_params") else {}})
    if args.out:
        report.to_json(args.out)
    print(report.to_json())
    return 0


def cmd_tune(args) -> int:
    if args.model not in MODELS:
        raise ConfigError(f"--model: unknown model {args.model!r}")
    split = load_split(args.split)
    if not split.folds:
        raise ConfigError("--split: too few training sessions for validation folds")
    space = parse_space(_json_arg(args.space, "--space") or DEFAULT_SPACES[args.model])
    objective = fold_objective(args.model, _load_embeddings(args.embeddings),
                               _json_arg(args.params, "--params"))
    result = search(space, split.folds, objective, args.budget, args.seed, patience=args.patience,
                    time_budget=args.time_budget)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_log(out / "trials.jsonl")
    best = {"number": result.best.number, "config": result.best.config,
            "objective": result.best.objective, "stopped_early": result.stopped_early}
    (out / "best.json").write_text(json.dumps(best, sort_keys=True, indent=1) + "\n")
    _print(best)
    return 0


def cmd_finetune_prep(args) -> int:
    split = load_split(args.split)
    train = split.train
    if args.task == "genitem":
        pairs = build_genitem_pairs(train)
    elif args.task in ("genlist", "rank"):
        teacher = _model_from_args(args, _load_embeddings(args.embeddings)).fit(train)
        pairs = (build_genlist_pairs(train, teacher, args.k) if args.task == "genlist"
                 else build_rank_pairs(train, teacher, args.k, args.seed))
    else:
        if not args.embeddings:
            raise ConfigError("--embeddings: required for the class task")
        pairs, _ = build_class_pairs(train, EmbeddingMatrix.load(args.embeddings), args.clusters,
                                     args.k, args.seed)
    write_pairs_jsonl(pairs, args.out)
    _print({"task": args.task, "pairs": len(pairs), "out": args.out})
    return 0


def _read_generations(path: str) -> list[str]:
    texts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError:
                texts.append(line)
                continue
            text = record.get("completion", "") if isinstance(record, dict) else str(record)
            texts.extend(t for t in text.split("\n") if t.strip())
    return texts


def cmd_resolve(args) -> int:
    ds = load_dataset(args.dataset)
    matrix = EmbeddingMatrix.load(args.embeddings)
    if args.provider == "synthetic":
        provider = SyntheticTextProvider(matrix.dim, args.seed)
    else:
        provider = provider_from_env(args.provider, args.model)
    embed = cached_text_embedder(provider, args.cache)
    resolutions = resolve_hallucinations(_read_generations(args.generations), ds.catalog,
                                         matrix, embed)
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in resolutions:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    _print(resolution_summary(resolutions))
    return 0


def cmd_diagnose(args) -> int:
    split = load_split(args.split)
    model = _model_from_args(args, _load_embeddings(args.embeddings)).fit(split.train)
    if args.kind == "popularity":
        rows = popularity_bucket_hit_rates(model, split.test, PopularityTable.from_dataset(split.train),
                                           args.buckets, args.k)
    else:
        rows = position_hit_rates(model, split.test, args.max_position, args.k)
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1) + "\n")
    _print(rows)
    return 0


_KEY_PART = re.compile(r"([^.\[\]]+)|\[(\d+)\]")


def _split_key(key: str) -> list:
    """``models[0].params.k`` -> ``["models", 0, "params", "k"]``."""
    parts, pos = [], 0
    for m in _KEY_PART.finditer(key):
        gap = key[pos:m.start()]
        if gap not in ("", ".") or (gap == "" and pos and m.group(1)):
            raise ConfigError(f"--set {key}: malformed key")
        parts.append(m.group(1) if m.group(1) is not None else int(m.group(2)))
        pos = m.end()
    if not parts or pos != len(key):
        raise ConfigError(f"--set {key}: malformed key")
    return parts


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected dotted.key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        parts = _split_key(key)
        node = config
        for part, nxt in zip(parts, parts[1:]):
            if isinstance(part, int):
                if not isinstance(node, list) or part >= len(node):
                    raise ConfigError(f"--set {key}: index {part} out of range")
                node = node[part]
            elif isinstance(node, dict):
                node = node.setdefault(part, [] if isinstance(nxt, int) else {})
            else:
                raise ConfigError(f"--set {key}: {part} is not inside a block")
        last = parts[-1]
        if isinstance(last, int):
            if not isinstance(node, list) or last >= len(node):
                raise ConfigError(f"--set {key}: index {last} out of range")
        elif not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {last} is not inside a block")
        node[last] = value
    return config


def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("--config: a run config file is required")
    config = _apply_overrides(load_config(args.config), args.set or [])
    summary = run(config, args.out)
    _print({"config_hash": summary["config_hash"], "stages": summary["stages"],
            "leaderboard": [{"model": r["model"], "ndcg@20": r.get("ndcg@20")}
                            for r in summary["leaderboard"]]})
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model_args(p, default_model: str = "llmseqsim") -> None:
    p.add_argument("--model", default=default_model, help=f"one of: {', '.join(MODELS)}")
    p.add_argument("--params", help="model parameters as JSON text or a JSON file")
    p.add_argument("--embeddings", help="embedding matrix (.npz) for embedding-based models")
    p.add_argument("--pool-direction", choices=("recent_first", "oldest_first"),
                   default="recent_first", help="decay index origin for weighted pooling")
    p.add_argument("--pool-normalize", action=argparse.BooleanOptionalAction, default=True,
                   help="normalize decay weights to sum to one")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sessionlab", description="Sequential recommendation with LLM item embeddings.",
        epilog=POOLING_HELP)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="run config (JSON); without a subcommand runs the pipeline")
    parser.add_argument("--jobs", type=int, default=1, help="cap on worker threads")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest", help="read interactions and catalog into a dataset directory")
    p.add_argument("--interactions", required=True)
    p.add_argument("--catalog")
    p.add_argument("--format", choices=("csv", "jsonl"))
    p.add_argument("--amazon", action="store_true",
                   help="inputs are an Amazon ratings/reviews dump and metadata file")
    p.add_argument("--pcore", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="print dataset statistics")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="temporal train/test split with validation folds")
    p.add_argument("dataset")
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("embed", help="embed catalog items")
    p.add_argument("--dataset", required=True)
    p.add_argument("--provider", choices=("openai", "google", "synthetic"), default="synthetic")
    p.add_argument("--model", help="provider model name")
    p.add_argument("--dim", type=int, default=64, help="dimension of synthetic vectors")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--semantic", action=argparse.BooleanOptionalAction, default=True,
                   help="synthetic vectors follow co-occurrence in the dataset sessions")
    p.add_argument("--with-keywords", action="store_true")
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--cache", default="embedding_cache.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("reduce", help="fit a dimensionality reduction on an embedding matrix")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--method", choices=("pca", "lda", "rp"), required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", help="dataset whose keywords define lda classes")
    p.add_argument("--out", required=True, help="reducer model file")
    p.add_argument("--transformed", help="also write the reduced embedding matrix here")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("evaluate", help="fit a model on a split and report metrics",
                       epilog=POOLING_HELP)
    p.add_argument("--split", required=True)
    _add_model_args(p)
    p.add_argument("--label")
    p.add_argument("--ks", type=int, nargs="+", default=[10, 20])
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tune", help="random search over validation folds")
    p.add_argument("--split", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--params", help="fixed parameters merged under every sampled config")
    p.add_argument("--embeddings")
    p.add_argument("--space", help="search space as JSON text or file")
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patience", type=int, default=100)
    p.add_argument("--time-budget", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("finetune-prep", help="write a prompt/completion corpus",
                       epilog=POOLING_HELP)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--split", required=True)
    _add_model_args(p, default_model="sknn")
    p.add_argument("--k", type=int, default=20, help="list length or number of categories")
    p.add_argument("--clusters", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune_prep)

    p = sub.add_parser("resolve", help="map generated item names to catalog items")
    p.add_argument("--generations", required=True,
                   help="JSONL with a completion field, or plain text one name per line")
    p.add_argument("--dataset", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--provider", choices=("openai", "google", "synthetic"), default="synthetic")
    p.add_argument("--model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", default="generation_cache.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_resolve)

    p = sub.add_parser("diagnose", help="hit rate by last-item popularity or by position",
                       epilog=POOLING_HELP)
    p.add_argument("--split", required=True)
    _add_model_args(p)
    p.add_argument("--kind", choices=("popularity", "position"), default="popularity")
    p.add_argument("--buckets", type=int, default=10)
    p.add_argument("--max-position", type=int, default=10)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("run", help="execute a run config end to end")
    p.add_argument("--config", dest="run_config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. split.test_fraction=0.1")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        if not args.config:
            parser.print_help(sys.stderr)
            return 2
        args.func, args.set, args.out = cmd_run, [], None
    elif args.command == "run":
        args.config = args.run_config or args.config
    try:
        with threadpool_limits(limits=max(args.jobs, 1)):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
