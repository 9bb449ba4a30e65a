"""Config-driven experiment runs: dataset, embeddings, models, reports, leaderboard.

Each stage writes into its own directory under the output root together with a
``stage.json`` stamp holding the stage's content hash. A re-run whose hash
matches reuses the stored artifacts instead of recomputing them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .dataset import (Dataset, SplitSpec, ingest, load_dataset, p_core_filter, save_dataset,
                      temporal_split)
from .embeddings import (EmbeddingMatrix, fetch_embeddings, provider_from_env,
                         synthetic_embeddings)
from .evaluation import (MetricsReport, evaluate, leaderboard, leaderboard_markdown,
                         write_leaderboard_csv)
from .exceptions import ConfigError
from .registry import DEFAULT_SPACES, EMBEDDING_MODELS, MODELS, build_model, fold_objective
from .synthetic import make_corpus
from .tune import parse_space, search

logger = logging.getLogger(__name__)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    config.setdefault("_base_dir", str(Path(path).resolve().parent))
    return config


def validate_config(config: dict) -> dict:
    """Check structure, model names and referenced paths; returns the config."""
    base = Path(config.get("_base_dir", "."))
    ds = config.get("dataset")
    if not isinstance(ds, dict):
        raise ConfigError("dataset: block is required")
    if "synthetic" not in ds:
        for key in ("interactions",):
            if key not in ds:
                raise ConfigError(f"dataset.{key}: required unless dataset.synthetic is given")
        for key in ("interactions", "catalog"):
            if key in ds and not (base / ds[key]).exists():
                raise ConfigError(f"dataset.{key}: path {ds[key]} does not exist")
    models = config.get("models")
    if not isinstance(models, list) or not models:
        raise ConfigError("models: a non-empty list of model blocks is required")
    for n, block in enumerate(models):
        name = block.get("name") if isinstance(block, dict) else None
        if name not in MODELS:
            raise ConfigError(f"models[{n}].name: unknown model {name!r}")
        for inner in ("unpopular_model", "popular_model"):
            sub = (block.get("params") or {}).get(inner)
            if sub is not None and sub.get("name") not in MODELS:
                raise ConfigError(f"models[{n}].params.{inner}.name: unknown model {sub.get('name')!r}")
    needs_embeddings = any(b["name"] in EMBEDDING_MODELS or b["name"] == "hybrid_switch"
                           for b in models)
    if needs_embeddings and "embeddings" not in config:
        raise ConfigError("embeddings: block is required by the configured models")
    emb = config.get("embeddings")
    if emb is not None and emb.get("provider", "synthetic") not in ("synthetic", "openai", "google"):
        raise ConfigError(f"embeddings.provider: unknown provider {emb.get('provider')!r}")
    tune = config.get("tune")
    if tune is not None and tune.get("model") not in MODELS:
        raise ConfigError(f"tune.model: unknown model {tune.get('model')!r}")
    ks = config.get("eval", {}).get("ks", [10, 20])
    if not ks or any(not isinstance(k, int) or k < 1 for k in ks):
        raise ConfigError("eval.ks: positive integers required")
    return config


class Stage:
    def __init__(self, root: Path, name: str, key: dict, config_hash: str):
        self.dir = root / name
        self.name = name
        self.hash = _hash(key)
        self.config_hash = config_hash

    def fresh(self) -> bool:
        stamp = self.dir / "stage.json"
        if not stamp.exists():
            return False
        try:
            return json.loads(stamp.read_text()).get("hash") == self.hash
        except ValueError:
            return False

    def begin(self) -> None:
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)

    def done(self) -> None:
        (self.dir / "stage.json").write_text(json.dumps(
            {"stage": self.name, "hash": self.hash, "config_hash": self.config_hash,
             "version": __version__}, sort_keys=True) + "\n")

    def fail(self, exc: BaseException) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")


def _run_stage(stage: Stage, compute: Callable[[], Any], load: Callable[[], Any], log: list):
    if stage.fresh():
        log.append((stage.name, "skipped"))
        return load()
    stage.begin()
    try:
        out = compute()
    except Exception as exc:
        stage.fail(exc)
        raise
    stage.done()
    log.append((stage.name, "ran"))
    return out


def _build_dataset(cfg: dict, base: Path) -> Dataset:
    if "synthetic" in cfg:
        ds = make_corpus(**cfg["synthetic"])
    else:
        catalog = base / cfg["catalog"] if cfg.get("catalog") else None
        ds = ingest(base / cfg["interactions"], cfg.get("format"), catalog)
    if cfg.get("pcore", 1) > 1:
        ds = p_core_filter(ds, int(cfg["pcore"]))
    return ds


def _build_embeddings(cfg: dict, dataset: Dataset, split: SplitSpec, cache: Path) -> EmbeddingMatrix:
    items = sorted(dataset.catalog)
    provider = cfg.get("provider", "synthetic")
    if provider == "synthetic":
        sessions = [s.items for s in split.train.sessions] if cfg.get("semantic", True) else None
        return synthetic_embeddings(items, int(cfg.get("dim", 64)), int(cfg.get("seed", 0)), sessions)
    texts = {i: dataset.catalog[i].embedding_text(cfg.get("with_keywords", False)) for i in items}
    prov = provider_from_env(provider, cfg.get("model"), int(cfg.get("batch_size", 100)))
    return fetch_embeddings(texts, prov, cache)


def run(config: dict, out_dir: str | Path | None = None) -> dict:
    """Execute every configured stage; returns a summary with the leaderboard rows."""
    validate_config(config)
    base = Path(config.get("_base_dir", "."))
    root = Path(out_dir or config.get("out", "artifacts"))
    if not root.is_absolute():
        root = base / root if out_dir is None else root
    root.mkdir(parents=True, exist_ok=True)
    public = {k: v for k, v in config.items() if not k.startswith("_")}
    chash = _hash(public)
    log: list = []

    ds_key = {"dataset": config["dataset"], "inputs": {
        k: _file_digest(base / config["dataset"][k])
        for k in ("interactions", "catalog") if config["dataset"].get(k)}}
    ds_stage = Stage(root, "dataset", ds_key, chash)

    def compute_dataset():
        ds = _build_dataset(config["dataset"], base)
        save_dataset(ds, ds_stage.dir / "data")
        return ds

    dataset = _run_stage(ds_stage, compute_dataset, lambda: load_dataset(ds_stage.dir / "data"), log)
    split = temporal_split(dataset, float(config.get("split", {}).get("test_fraction", 0.2)))

    embeddings = None
    if "embeddings" in config:
        emb_key = {**ds_key, "embeddings": config["embeddings"], "split": config.get("split")}
        emb_stage = Stage(root, "embeddings", emb_key, chash)
        cache = root / "embedding_cache.jsonl"

        def compute_embeddings():
            m = _build_embeddings(config["embeddings"], dataset, split, cache)
            m.save(emb_stage.dir / "embeddings.npz")
            return m

        embeddings = _run_stage(emb_stage, compute_embeddings,
                                lambda: EmbeddingMatrix.load(emb_stage.dir / "embeddings.npz"), log)

    ks = tuple(config.get("eval", {}).get("ks", [10, 20]))
    reports = []
    for n, block in enumerate(config["models"]):
        label = block.get("label") or block["name"]
        key = {**ds_key, "split": config.get("split"), "embeddings": config.get("embeddings"),
               "model": block, "ks": ks}
        stage = Stage(root, f"models/{n:02d}_{label}", key, chash)

        def compute_report(block=block, label=label, stage=stage):
            model = build_model(block["name"], block.get("params"), embeddings).fit(split.train)
            rep = evaluate(model, split, ks, name=label, config=block)
            if rep.n_excluded:
                raise RuntimeError(f"{label}: {rep.n_excluded} test sessions failed: {rep.errors[:3]}")
            rep.to_json(stage.dir / "report.json")
            return rep

        reports.append(_run_stage(
            stage, compute_report,
            lambda stage=stage: MetricsReport.from_dict(json.loads((stage.dir / "report.json").read_text())),
            log))

    summary: dict = {"config_hash": chash, "version": __version__, "stages": log}
    tune_cfg = config.get("tune")
    if tune_cfg:
        key = {**ds_key, "split": config.get("split"), "embeddings": config.get("embeddings"),
               "tune": tune_cfg}
        stage = Stage(root, "tune", key, chash)

        def compute_tune():
            space = parse_space(tune_cfg.get("space") or DEFAULT_SPACES[tune_cfg["model"]])
            result = search(space, split.folds, fold_objective(tune_cfg["model"], embeddings,
                                                               tune_cfg.get("params")),
                            int(tune_cfg.get("budget", 20)), int(tune_cfg.get("seed", config.get("seed", 0))),
                            patience=int(tune_cfg.get("patience", 100)))
            result.write_log(stage.dir / "trials.jsonl")
            best = {"number": result.best.number, "config": result.best.config,
                    "objective": result.best.objective}
            (stage.dir / "best.json").write_text(json.dumps(best, sort_keys=True, indent=1) + "\n")
            return best

        summary["tune"] = _run_stage(stage, compute_tune,
                                     lambda: json.loads((stage.dir / "best.json").read_text()), log)

    rows = leaderboard(reports)
    write_leaderboard_csv(rows, root / "leaderboard.csv")
    (root / "leaderboard.md").write_text(leaderboard_markdown(rows))
    summary["leaderboard"] = rows
    (root / "run.json").write_text(json.dumps(
        {"config_hash": chash, "version": __version__, "stages": log}, sort_keys=True, indent=1) + "\n")
    return summary
