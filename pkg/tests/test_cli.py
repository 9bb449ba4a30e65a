import json

import pytest

from sessionlab import __version__
from sessionlab.cli import main
from sessionlab.dataset import load_dataset, save_dataset
from sessionlab.pooling import strategy_names
from sessionlab.synthetic import make_corpus


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_dataset(make_corpus(n_sessions=150, n_items=30, n_topics=5, seed=4), root / "ds")
    return root


@pytest.fixture(scope="module")
def prepared(workspace):
    assert main(["split", str(workspace / "ds"), "--out", str(workspace / "sp")]) == 0
    assert main(["embed", "--dataset", str(workspace / "ds"), "--dim", "8",
                 "--out", str(workspace / "emb.npz")]) == 0
    return workspace


def test_help_lists_pooling_names(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in strategy_names():
        assert name in out


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert __version__ in capsys.readouterr().out


def test_no_command_is_usage_error(capsys):
    assert main([]) == 2


def test_ingest_and_stats(tmp_path, capsys):
    (tmp_path / "i.csv").write_text("session_id,item_id,timestamp\n"
                                    "a,x,1\na,y,2\nb,x,3\nb,y,4\nc,z,5\n")
    code, out, _ = run_cli(capsys, "ingest", "--interactions", tmp_path / "i.csv",
                           "--pcore", 2, "--out", tmp_path / "ds")
    assert code == 0 and json.loads(out)["sessions"] == 2
    code, out, _ = run_cli(capsys, "stats", tmp_path / "ds")
    assert code == 0 and json.loads(out)["items"] == 2


def test_split_writes_layout(prepared):
    for name in ("train", "catalog.jsonl", "test.jsonl"):
        assert (prepared / "sp" / name).exists()


def test_evaluate(prepared, capsys, tmp_path):
    code, out, _ = run_cli(capsys, "evaluate", "--split", prepared / "sp", "--model", "llmseqsim",
                           "--embeddings", prepared / "emb.npz", "--params", '{"pooling": "weighted:harmonic"}',
                           "--ks", 5, 20, "--out", tmp_path / "rep.json")
    assert code == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert set(rep["metrics"]) == {"5", "20"}


def test_evaluate_pool_flags(prepared, capsys):
    code, _, _ = run_cli(capsys, "evaluate", "--split", prepared / "sp", "--model", "sknn_emb",
                         "--embeddings", prepared / "emb.npz", "--pool-direction", "oldest_first",
                         "--no-pool-normalize")
    assert code == 0


def test_unknown_model_is_config_error(prepared, capsys):
    code, _, err = run_cli(capsys, "evaluate", "--split", prepared / "sp", "--model", "mostpop")
    assert code == 2 and "config error" in err and "mostpop" in err


def test_missing_input_is_runtime_error(tmp_path, capsys):
    code, _, err = run_cli(capsys, "stats", tmp_path / "missing")
    assert code == 1 and err.startswith("error:")


def test_reduce(prepared, capsys, tmp_path):
    for method in ("pca", "rp", "lda"):
        extra = ["--dataset", prepared / "ds"] if method == "lda" else []
        code, _, _ = run_cli(capsys, "reduce", "--embeddings", prepared / "emb.npz", "--method", method,
                             "--k", 2, "--out", tmp_path / f"{method}.bin",
                             "--transformed", tmp_path / f"{method}.npz", *extra)
        assert code == 0 and (tmp_path / f"{method}.npz").exists(), method


def test_tune(prepared, capsys, tmp_path):
    code, _, _ = run_cli(capsys, "tune", "--split", prepared / "sp", "--model", "sknn", "--budget", 3,
                         "--space", '{"k_neighbors": [5, 10, 20]}', "--out", tmp_path / "tune")
    assert code == 0
    assert len((tmp_path / "tune" / "trials.jsonl").read_text().splitlines()) == 3
    best = json.loads((tmp_path / "tune" / "best.json").read_text())
    assert best["config"]["k_neighbors"] in (5, 10, 20)


@pytest.mark.parametrize("task", ["genitem", "genlist", "rank", "class"])
def test_finetune_prep(prepared, capsys, tmp_path, task):
    out = tmp_path / f"{task}.jsonl"
    code, _, _ = run_cli(capsys, "finetune-prep", "--task", task, "--split", prepared / "sp",
                         "--embeddings", prepared / "emb.npz", "--clusters", 5, "--k", 3, "--out", out)
    assert code == 0
    first = json.loads(out.read_text().splitlines()[0])
    assert set(first) == {"prompt", "completion"}


def test_class_task_needs_embeddings(prepared, capsys, tmp_path):
    code, _, _ = run_cli(capsys, "finetune-prep", "--task", "class", "--split", prepared / "sp",
                         "--out", tmp_path / "c.jsonl")
    assert code == 2


def test_resolve(prepared, capsys, tmp_path):
    ds = load_dataset(prepared / "ds")
    name = ds.catalog[sorted(ds.catalog)[0]].text
    (tmp_path / "gen.jsonl").write_text(json.dumps({"completion": f"{name}\nSomething Else"}) + "\n")
    code, out, _ = run_cli(capsys, "resolve", "--generations", tmp_path / "gen.jsonl",
                           "--dataset", prepared / "ds", "--embeddings", prepared / "emb.npz",
                           "--cache", tmp_path / "c.jsonl", "--out", tmp_path / "res.jsonl")
    assert code == 0 and json.loads(out)["n"] == 2
    rows = [json.loads(l) for l in (tmp_path / "res.jsonl").read_text().splitlines()]
    assert rows[0]["item_id"] == sorted(ds.catalog)[0] and not rows[0]["was_hallucination"]


@pytest.mark.parametrize("kind", ["popularity", "position"])
def test_diagnose(prepared, capsys, kind):
    code, out, _ = run_cli(capsys, "diagnose", "--split", prepared / "sp", "--model", "most_popular",
                           "--kind", kind, "--buckets", 3)
    assert code == 0 and isinstance(json.loads(out), list)


def test_run_with_overrides(tmp_path, capsys):
    cfg = {"dataset": {"synthetic": {"n_sessions": 120, "n_items": 25, "seed": 1}},
           "models": [{"name": "most_popular"}], "out": "art"}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out, _ = run_cli(capsys, "run", "--config", tmp_path / "c.json",
                           "--set", "models=[{\"name\": \"sknn\"}]")
    assert code == 0
    assert json.loads(out)["leaderboard"][0]["model"] == "sknn"
    assert (tmp_path / "art" / "leaderboard.csv").exists()
    code, _, err = run_cli(capsys, "--config", tmp_path / "c.json", "run", "--set", "nokey")
    assert code == 2 and "nokey" in err


def test_override_keys_with_list_indices():
    from sessionlab.cli import _apply_overrides
    from sessionlab.exceptions import ConfigError

    config = {"models": [{"name": "sknn"}, {"name": "llmseqsim"}]}
    _apply_overrides(config, ["models[1].params.pooling=weighted:log", "eval.ks=[5, 10]",
                              "models[0].name=most_popular"])
    assert config == {"models": [{"name": "most_popular"},
                                 {"name": "llmseqsim", "params": {"pooling": "weighted:log"}}],
                      "eval": {"ks": [5, 10]}}
    for bad in ("models[2].name=x", "models.name=x", "a..b=1", "a[b]=1"):
        with pytest.raises(ConfigError):
            _apply_overrides({"models": [{}]}, [bad])
