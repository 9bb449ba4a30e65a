import json
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sessionlab.dataset import Dataset, ItemInfo, Session
from sessionlab.embeddings import EmbeddingMatrix, SyntheticTextProvider, normalize
from sessionlab.finetune import (ReplayCompletionProvider, RecordingCompletionProvider,
                                 aggregate_single_generations, build_class_pairs,
                                 build_genitem_pairs, build_genlist_pairs, build_rank_pairs,
                                 cached_text_embedder, force_head, generate_single_items, kmeans,
                                 resolution_summary, resolve_hallucinations, write_pairs_jsonl)
from sessionlab.recommenders import LLMSeqSim, RecommendationList

GOLDEN = Path(__file__).parent / "golden"
TERMINATOR = "\n\n###\n\n"

NAMES = {
    "p1": "Rose Shampoo", "p2": "Rose Conditioner", "p3": "Argan Hair Oil", "p4": "Matte Lipstick",
    "p5": "Lip Liner", "p6": "Nail Polish Red", "p7": "Nail Polish Remover", "p8": "Face Serum",
}


def five_sessions() -> Dataset:
    items = [["p1", "p2", "p3"], ["p4", "p5"], ["p6", "p7", "p6"], ["p8", "p1", "p2"], ["p4", "p6", "p5"]]
    sessions = tuple(Session.from_items(f"s{n}", s, start_ts=10 * n) for n, s in enumerate(items))
    return Dataset(sessions, {i: ItemInfo(t) for i, t in NAMES.items()})


def fixture_embeddings() -> EmbeddingMatrix:
    # three loose themes: hair, lips, nails (face serum sits near hair)
    base = {"hair": [1.0, 0.1, 0.0], "lips": [0.0, 1.0, 0.1], "nails": [0.1, 0.0, 1.0]}
    theme = {"p1": "hair", "p2": "hair", "p3": "hair", "p4": "lips", "p5": "lips",
             "p6": "nails", "p7": "nails", "p8": "hair"}
    rng = np.random.default_rng(42)
    ids = sorted(NAMES)
    vecs = np.array([base[theme[i]] for i in ids]) + 0.05 * rng.standard_normal((len(ids), 3))
    return EmbeddingMatrix(tuple(ids), vecs)


def corpus(task):
    train = five_sessions()
    emb = fixture_embeddings()
    teacher = LLMSeqSim(emb).fit(train)
    if task == "genitem":
        return build_genitem_pairs(train)
    if task == "genlist":
        return build_genlist_pairs(train, teacher, k=4)
    if task == "rank":
        return build_rank_pairs(train, teacher, k=4, seed=7)
    return build_class_pairs(train, emb, k_clusters=3, top_c=2, seed=7)[0]


@pytest.mark.parametrize("task", ["genitem", "genlist", "class", "rank"])
def test_byte_golden_corpora(tmp_path, task):
    out = tmp_path / f"{task}.jsonl"
    write_pairs_jsonl(corpus(task), out)
    golden = GOLDEN / f"{task}.jsonl"
    if os.environ.get("SESSIONLAB_REGEN_GOLDEN"):
        golden.write_bytes(out.read_bytes())
    assert out.read_bytes() == golden.read_bytes()


def test_genitem_hand_built():
    pairs = build_genitem_pairs(five_sessions())
    assert len(pairs) == 5
    assert pairs[0].prompt == "Rose Shampoo\nRose Conditioner" + TERMINATOR
    assert pairs[0].completion == "Argan Hair Oil"
    for pair in pairs:
        assert pair.prompt.endswith(TERMINATOR) and pair.completion


def test_genitem_missing_text():
    ds = Dataset((Session.from_items("s", ["a", "b"]),), {"a": ItemInfo("A"), "b": ItemInfo("")})
    with pytest.raises(ValueError, match="'b'"):
        build_genitem_pairs(ds)


@pytest.mark.parametrize("teacher, truth, expected", [
    (["g", "x", "y"], "g", ["g", "x", "y"]),
    (["x", "y", "z"], "g", ["g", "x", "y"]),
    (["x", "y", "g", "z"], "g", ["g", "x", "y", "z"]),
])
def test_force_head(teacher, truth, expected):
    assert force_head(teacher, truth, len(teacher)) == expected


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcdefgh"), max_size=8, unique=True), st.sampled_from("abcdefghij"),
       st.integers(1, 8))
def test_force_head_properties(teacher, truth, k):
    out = force_head(teacher, truth, k)
    assert out[0] == truth and len(out) <= k and len(set(out)) == len(out)
    assert [i for i in out[1:]] == [i for i in teacher if i != truth][:len(out) - 1]


class FailingTeacher:
    def recommend(self, prompt, k):
        if prompt[0] == "p4":
            raise RuntimeError("boom")
        return RecommendationList(("p8",), (1.0,))


def test_teacher_failure_skips_session(caplog):
    pairs = build_genlist_pairs(five_sessions(), FailingTeacher(), k=3)
    assert [p.session_id for p in pairs] == ["s0", "s2", "s3"]
    assert "boom" in caplog.text


def test_rank_completions_are_permutations_with_truth_first():
    train = five_sessions()
    pairs = build_rank_pairs(train, LLMSeqSim(fixture_embeddings()).fit(train), k=4, seed=3)
    for pair, session in zip(pairs, train.sessions):
        options = pair.prompt.split("\n\nOptions:\n")[1][: -len(TERMINATOR)].split("\n")
        completion = pair.completion.split("\n")
        assert sorted(options) == sorted(completion)
        assert completion[0] == NAMES[session.items[-1]]


def test_rank_shuffle_is_seeded():
    train = five_sessions()
    teacher = LLMSeqSim(fixture_embeddings()).fit(train)
    assert build_rank_pairs(train, teacher, 4, seed=1) == build_rank_pairs(train, teacher, 4, seed=1)
    prompts = {tuple(p.prompt for p in build_rank_pairs(train, teacher, 4, seed=s)) for s in range(6)}
    assert len(prompts) > 1


def test_class_completions_reference_prompt_categories():
    train = five_sessions()
    pairs = build_class_pairs(train, fixture_embeddings(), k_clusters=3, top_c=2, seed=0)[0]
    for pair in pairs:
        categories = pair.prompt.split("\n\nCategories:\n")[1][: -len(TERMINATOR)].split("\n")
        assert set(pair.completion.split("\n")) <= set(categories)


def test_class_representative_truth_ranked_first():
    train = five_sessions()
    emb = fixture_embeddings()
    pairs, model = build_class_pairs(train, emb, k_clusters=3, top_c=2, seed=0)
    assert len(set(model.representatives)) == len(model.representatives)
    for pair, session in zip(pairs, train.sessions):
        if session.items[-1] in model.representatives:
            assert pair.completion.split("\n")[0] == NAMES[session.items[-1]]


# ---------------------------------------------------------------------------
# k-means


def test_kmeans_two_blobs():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]])
    m = kmeans(X, 2, seed=0)
    assert m.labels[0] == m.labels[1] != m.labels[2] == m.labels[3]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_kmeans_objective_non_increasing(seed, k):
    X = np.random.default_rng(seed).standard_normal((25, 3))
    m = kmeans(X, k, seed=seed)
    assert all(b <= a + 1e-9 for a, b in zip(m.inertia_history, m.inertia_history[1:]))
    assert len(m.labels) == 25


def test_kmeans_duplicate_points_and_bounds():
    X = np.zeros((5, 2))
    X[4] = 1.0
    m = kmeans(X, 3, seed=1)
    assert len(m.centroids) == 3
    with pytest.raises(ValueError):
        kmeans(X, 6)


# ---------------------------------------------------------------------------
# hallucination resolution


def synthetic_embedder(tmp_path, dim=3):
    return cached_text_embedder(SyntheticTextProvider(dim=dim, seed=0), tmp_path / "cache.jsonl")


def test_exact_names_resolve_to_themselves(tmp_path):
    emb = normalize(fixture_embeddings())
    res = resolve_hallucinations(list(NAMES.values()), {i: ItemInfo(t) for i, t in NAMES.items()},
                                 emb, synthetic_embedder(tmp_path))
    for r, item in zip(res, NAMES):
        assert r.item_id == item and not r.was_hallucination
        assert abs(r.similarity - 1.0) <= 1e-6


def test_nearest_neighbor_resolution(tmp_path):
    emb = normalize(fixture_embeddings())
    catalog = {i: ItemInfo(t) for i, t in NAMES.items()}
    target = emb.vectors[emb.index()["p5"]]

    def embed(texts):
        return np.array([target + 0.01 for _ in texts])

    res = resolve_hallucinations(["Lip Pencil"], catalog, emb, embed)[0]
    assert res.item_id == "p5" and res.was_hallucination
    sims = emb.vectors @ ((target + 0.01) / np.linalg.norm(target + 0.01))
    assert res.similarity == pytest.approx(sims.max())


def test_empty_generation_skipped(tmp_path):
    catalog = {i: ItemInfo(t) for i, t in NAMES.items()}
    res = resolve_hallucinations(["", "Lip Liner"], catalog, fixture_embeddings(), synthetic_embedder(tmp_path))
    assert res[0].skipped and res[0].item_id is None
    summary = resolution_summary(res)
    assert summary == {"n": 1, "hallucination_rate": 0.0, "mean_similarity": pytest.approx(1.0)}


def test_embedding_failure_names_string():
    def broken(texts):
        raise RuntimeError("offline")

    with pytest.raises(Exception, match="Mystery Cream"):
        resolve_hallucinations(["Mystery Cream"], {i: ItemInfo(t) for i, t in NAMES.items()},
                               fixture_embeddings(), broken)


def test_generation_cache_reused(tmp_path):
    calls = []

    class Counting(SyntheticTextProvider):
        def embed(self, texts):
            calls.append(list(texts))
            return super().embed(texts)

    embed = cached_text_embedder(Counting(dim=3), tmp_path / "c.jsonl")
    embed(["x", "y"])
    embed(["x", "y", "z"])
    assert calls == [["x", "y"], ["z"]]


# ---------------------------------------------------------------------------
# aggregation and providers


def test_aggregate_frequency():
    out = aggregate_single_generations(["A", "A", "B", "A", "C", "B"], 20)
    assert out.items == ("A", "B", "C") and out.scores == (3.0, 2.0, 1.0)
    assert aggregate_single_generations(["x", "y", "z"]).items == ("x", "y", "z")
    assert aggregate_single_generations([]).items == ()


def test_replayed_generations_aggregate(tmp_path):
    responses = ["Lip Liner"] * 7 + ["Matte Lipstick"] * 5 + ["Nail Polish Red"] * 5 + ["Face Serum"] * 3
    rng = np.random.default_rng(0)
    responses = [responses[i] for i in rng.permutation(20)]
    path = tmp_path / "rec.jsonl"
    recorder = RecordingCompletionProvider(ReplayCompletionProvider(responses), path)
    first = generate_single_items(recorder, "prompt", repeats=20, temperature=0.7)
    replayed = generate_single_items(ReplayCompletionProvider(path), "prompt", repeats=20)
    assert first == replayed
    out = aggregate_single_generations(replayed, 3)
    first_seen = {r: replayed.index(r) for r in set(replayed)}
    tie = sorted(["Matte Lipstick", "Nail Polish Red"], key=first_seen.get)
    assert out.items == ("Lip Liner", *tie)


def test_replay_exhausted():
    with pytest.raises(IndexError):
        ReplayCompletionProvider([]).complete("p")


def test_http_completion_provider():
    import httpx

    from sessionlab.finetune import HttpCompletionProvider

    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        return httpx.Response(200, json={"choices": [{"text": " Lip Liner"}]})

    p = HttpCompletionProvider("http://llm", "ft-model", transport=httpx.MockTransport(handler),
                               stop="\n")
    assert generate_single_items(p, "x" + TERMINATOR, repeats=2, temperature=0.3) == ["Lip Liner"] * 2
    assert seen[0]["temperature"] == 0.3 and seen[0]["stop"] == "\n"
