import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sessionlab.dataset import (Dataset, ItemInfo, Session, build_lda_classes,
                                ingest, leave_one_out, load_dataset, load_split,
                                make_validation_folds, p_core_filter, save_dataset, save_split,
                                temporal_split)
from sessionlab.exceptions import DataError

from conftest import dataset_of, make_dataset


def write_csv(path, rows):
    path.write_text("session_id,item_id,timestamp\n" + "".join(f"{s},{i},{t}\n" for s, i, t in rows))
    return path


# ---------------------------------------------------------------------------
# ingest


def test_singleton_session_dropped(tmp_path):
    ds = ingest(write_csv(tmp_path / "x.csv", [("a", "i1", 1), ("a", "i2", 2), ("b", "i3", 3)]))
    assert len(ds.sessions) == 1
    assert ds.sessions[0].items == ("i1", "i2")
    assert set(ds.catalog) == {"i1", "i2"}


def test_empty_file_errors(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(DataError, match="no interactions"):
        ingest(tmp_path / "e.csv")
    (tmp_path / "h.csv").write_text("session_id,item_id,timestamp\n")
    with pytest.raises(DataError, match="no interactions"):
        ingest(tmp_path / "h.csv")


def test_shuffled_timestamps_sorted_within_session(tmp_path):
    rows = [("s", "c", 30), ("s", "a", 10), ("t", "y", 5), ("s", "b", 20), ("t", "x", 1), ("t", "z", 9)]
    ds = ingest(write_csv(tmp_path / "x.csv", rows))
    by_id = {s.session_id: s for s in ds.sessions}
    for sid, s in by_id.items():
        oracle = [i for _, i, _ in sorted(((t, i, sid) for ss, i, t in rows if ss == sid))]
        assert list(s.items) == oracle
    assert by_id["s"].timestamps == (10, 20, 30)


def test_equal_timestamps_keep_input_order(tmp_path):
    ds = ingest(write_csv(tmp_path / "x.csv", [("s", "b", 1), ("s", "a", 1), ("s", "c", 1)]))
    assert ds.sessions[0].items == ("b", "a", "c")


def test_malformed_row_names_line(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("session_id,item_id,timestamp\ns,a,1\ns,b,notanumber\n")
    with pytest.raises(DataError, match="line 3"):
        ingest(p)


def test_jsonl_and_catalog(tmp_path):
    inter = tmp_path / "i.jsonl"
    inter.write_text("\n".join(json.dumps({"session_id": "s", "item_id": i, "timestamp": t})
                               for i, t in [("a", 1), ("b", 2)]) + "\n")
    cat = tmp_path / "c.jsonl"
    cat.write_text(json.dumps({"item_id": "a", "item_text": "Apple", "keywords": ["fruit"]}) + "\n"
                   + json.dumps({"item_id": "b", "item_text": "Bread"}) + "\n")
    ds = ingest(inter, catalog_path=cat)
    assert ds.catalog["a"] == ItemInfo("Apple", ("fruit",))
    assert ds.catalog["a"].embedding_text(with_keywords=True).startswith("Apple")
    assert "fruit" in ds.catalog["a"].embedding_text(with_keywords=True)


def test_missing_catalog_item_listed(tmp_path):
    inter = write_csv(tmp_path / "i.csv", [("s", "a", 1), ("s", "zz", 2)])
    cat = tmp_path / "c.jsonl"
    cat.write_text(json.dumps({"item_id": "a", "item_text": "A"}) + "\n")
    with pytest.raises(DataError, match="zz"):
        ingest(inter, catalog_path=cat)


def test_serialization_is_byte_identical(tmp_path):
    rows = [("s1", "a", 1), ("s1", "b", 2), ("s2", "b", 3), ("s2", "c", 4)]
    inter = write_csv(tmp_path / "x.csv", rows)
    save_dataset(ingest(inter), tmp_path / "d1")
    save_dataset(ingest(inter), tmp_path / "d2")
    for name in ("sessions.jsonl", "catalog.jsonl", "stats.json"):
        assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes()
    assert load_dataset(tmp_path / "d1") == ingest(inter)


def test_stats_density_consistent():
    ds = make_dataset([["a", "b", "c"], ["b", "c"], ["c", "d"]])
    st_ = ds.stats
    assert (st_.sessions, st_.items, st_.interactions) == (3, 4, 7)
    assert st_.avg_length == pytest.approx(7 / 3)
    assert math.isclose(st_.density, st_.interactions / (st_.sessions * st_.items), rel_tol=1e-12)


# ---------------------------------------------------------------------------
# p-core


def naive_pcore(sessions, p):
    """Repeated full passes until nothing changes."""
    sessions = [list(s) for s in sessions]
    while True:
        counts = {}
        for s in sessions:
            for i in s:
                counts[i] = counts.get(i, 0) + 1
        new = [[i for i in s if counts[i] >= p] for s in sessions]
        new = [s for s in new if len(s) >= p]
        if new == sessions:
            return sessions
        sessions = new


def test_pcore_p1_identity():
    ds = make_dataset([["a", "b"], ["c", "d", "e"]])
    assert p_core_filter(ds, 1) == ds


def test_pcore_cascade_matches_naive_oracle():
    # removing rare item x drops s2 below p=2, which drops y below 2 and then s3
    sessions = [["a", "b"], ["a", "x"], ["b", "y"], ["a", "b", "y"]]
    out = p_core_filter(make_dataset(sessions), 2)
    assert [list(s.items) for s in out.sessions] == naive_pcore(sessions, 2)


def test_pcore_eliminates_everything():
    with pytest.raises(DataError, match="p-core eliminated all data"):
        p_core_filter(make_dataset([["a", "b"], ["c", "d"]]), 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefgh"), min_size=2, max_size=7), min_size=2, max_size=25),
       st.integers(1, 4))
def test_pcore_properties(sessions, p):
    expected = naive_pcore(sessions, p)
    ds = make_dataset(sessions)
    if not expected:
        with pytest.raises(DataError):
            p_core_filter(ds, p)
        return
    out = p_core_filter(ds, p)
    assert [list(s.items) for s in out.sessions] == expected
    assert min(out.item_counts().values()) >= p
    assert min(len(s) for s in out.sessions) >= p
    assert p_core_filter(out, p) == out


# ---------------------------------------------------------------------------
# splitting


def ten_sessions():
    return dataset_of(Session(f"s{t:02d}", (f"a{t}", f"b{t}", f"c{t}"), (t, t, t))
                      for t in range(1, 11))


def test_temporal_split_ten_sessions():
    split = temporal_split(ten_sessions(), 0.2)
    assert [s.start_ts for s in split.train.sessions] == list(range(1, 9))
    assert [p.start_ts for p, _ in split.test] == [9, 10]


def test_temporal_split_ties_by_session_id():
    ds = dataset_of(Session(sid, ("a", "b"), (5, 6)) for sid in ["c", "a", "b", "d", "e"])
    split = temporal_split(ds, 0.4)
    assert [s.session_id for s in split.train.sessions] == ["a", "b", "c"]
    assert [p.session_id for p, _ in split.test] == ["d", "e"]


def test_temporal_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        temporal_split(ten_sessions(), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=5, max_size=40, unique=True),
       st.floats(0.05, 0.6))
def test_temporal_split_invariant(starts, frac):
    ds = dataset_of(Session(f"s{k}", ("a", "b"), (t, t + 1)) for k, t in enumerate(starts))
    split = temporal_split(ds, frac)
    assert len(split.test) == math.ceil(frac * len(starts))
    assert min(p.start_ts for p, _ in split.test) >= max(s.start_ts for s in split.train.sessions)


def test_leave_one_out():
    s = Session.from_items("x", ["a", "b", "c"])
    prompt, truth = leave_one_out(s)
    assert prompt.items == ("a", "b") and truth == "c"
    assert leave_one_out(Session.from_items("y", ["a", "b"]))[0].items == ("a",)
    with pytest.raises(DataError):
        leave_one_out(Session("z", ("a",), (1,)))


def test_leave_one_out_on_split_prompts():
    split = temporal_split(ten_sessions(), 0.2)
    for prompt, truth in split.test:
        assert len(prompt) == 2 and truth.startswith("c")


def test_validation_folds_quartiles():
    ds = dataset_of(Session(f"s{t}", ("a", "b"), (t, t)) for t in range(1, 9))
    folds = make_validation_folds(ds)
    assert len(folds) == 3
    assert [s.start_ts for s in folds[0].train.sessions] == [1, 2]
    assert [p.start_ts for p, _ in folds[0].test] == [3, 4]
    assert len(folds[2].train.sessions) == 3 * len(folds[0].train.sessions)
    for f in folds:
        assert min(p.start_ts for p, _ in f.test) >= max(s.start_ts for s in f.train.sessions)


def test_validation_folds_need_four_sessions():
    with pytest.raises(DataError):
        make_validation_folds(dataset_of(Session(f"s{t}", ("a", "b"), (t, t)) for t in range(3)))


def test_split_round_trip(tmp_path):
    split = temporal_split(make_dataset([["a", "b"], ["b", "c"], ["c", "a"], ["a", "c", "b"],
                                         ["b", "a"], ["c", "b"]]), 0.3)
    save_split(split, tmp_path / "sp")
    back = load_split(tmp_path / "sp")
    assert back.train == split.train and back.test == split.test and back.catalog == split.catalog
    assert back.folds == split.folds


# ---------------------------------------------------------------------------
# LDA classes


def test_lda_classes():
    cat = {"x": ItemInfo("X", ("B", "A")), "y": ItemInfo("Y", ("A", "B")), "z": ItemInfo("Z")}
    labels = build_lda_classes(cat)
    assert labels == {"x": "A_B", "y": "A_B"}


def test_lda_classes_four_combos():
    combos = [("hair",), ("hair", "shampoo"), ("skin",), ("nails", "skin")]
    cat = {f"i{k}": ItemInfo(f"item {k}", combos[k % 4]) for k in range(12)}
    assert len(set(build_lda_classes(cat).values())) == 4


def test_lda_classes_unavailable():
    with pytest.raises(DataError, match="LDA classes unavailable"):
        build_lda_classes({"x": ItemInfo("X")})


def test_dataset_requires_catalog_coverage():
    with pytest.raises(DataError):
        Dataset((Session.from_items("s", ["a", "b"]),), {"a": ItemInfo("A")})
