import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from placerank.index import (
    Candidate,
    FeatureStore,
    PlaceRecord,
    StoreError,
    StoreFormatError,
    recall_at_k,
)
from placerank.selection import LocalDescriptorSet, payload_bytes


def unit(rng, n, d=256):
    x = rng.normal(size=(n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def local_set(rng, n=6):
    f = unit(rng, n, 128)
    return LocalDescriptorSet(rng.random((n, 2)), np.sort(rng.random(n))[::-1], f)


def make_store(rng, n, split="reference", with_locals=True, dtype="f32"):
    store = FeatureStore(dtype)
    g = unit(rng, n)
    for i in range(n):
        store.add(PlaceRecord(f"r{i:04d}", tuple(rng.normal(size=2) * 100), split, g[i],
                              local_set(rng) if with_locals else None))
    return store


def test_add_and_duplicate():
    rng = np.random.default_rng(0)
    store = FeatureStore()
    rec = PlaceRecord("a", (0, 0), "reference", unit(rng, 1)[0])
    store.add(rec)
    assert len(store) == 1
    with pytest.raises(StoreError, match="duplicate"):
        store.add(PlaceRecord("a", (1, 1), "reference", unit(rng, 1)[0]))
    assert len(store) == 1


def test_rejects_bad_records():
    with pytest.raises(StoreError):
        FeatureStore().add(PlaceRecord("a", (0, 0), "reference", np.ones(256)))
    with pytest.raises(StoreError):
        FeatureStore().add(PlaceRecord("a", (0, 0), "reference", np.ones(10) / np.sqrt(10)))
    with pytest.raises(StoreError):
        PlaceRecord("a", (np.nan, 0), "reference", np.zeros(256))
    with pytest.raises(StoreError):
        PlaceRecord("a", (0, 0), "train", np.zeros(256))


def test_local_bytes_extrapolation():
    total = 18_871 * payload_bytes(500)
    assert total == 18_871 * 262_000
    assert abs(total / 1e9 - 4.79) / 4.79 < 0.05


def test_self_match_first():
    rng = np.random.default_rng(1)
    store = make_store(rng, 20)
    q = store["r0007"].global_desc
    top = store.knn(q, 5)
    assert top[0].id == "r0007"
    assert top[0].score == pytest.approx(1.0, abs=1e-6)


def test_orthogonal_references():
    store = FeatureStore()
    for i in range(3):
        g = np.zeros(256, np.float32)
        g[i] = 1
        store.add(PlaceRecord(f"r{i}", (0, 0), "reference", g))
    res = store.knn(store["r1"].global_desc, 3)
    assert [c.id for c in res] == ["r1", "r0", "r2"]  # equal zeros tie on id
    assert [c.score for c in res] == [1.0, 0.0, 0.0]


def brute_knn(store, q, k):
    rows = [(-float(np.dot(store[i].global_desc.astype(np.float64), q)), i) for i in store.ids("reference")]
    return [i for _, i in sorted(rows)[:k]]


def test_knn_matches_exhaustive_sort_1000():
    rng = np.random.default_rng(2)
    store = make_store(rng, 1000, with_locals=False)
    for q in unit(rng, 100):
        got = [c.id for c in store.knn(q, 100)]
        assert got == brute_knn(store, q.astype(np.float64), 100)


def test_knn_equals_l2_order_and_scores_sorted():
    rng = np.random.default_rng(3)
    store = make_store(rng, 200, with_locals=False)
    q = unit(rng, 1)[0]
    res = store.knn(q, 50)
    scores = [c.score for c in res]
    assert scores == sorted(scores, reverse=True)
    d2 = [float(np.sum((store[c.id].global_desc - q) ** 2)) for c in res]
    assert all(a <= b + 1e-6 for a, b in zip(d2, d2[1:]))


def test_knn_errors_and_split_filter():
    with pytest.raises(StoreError, match="empty store"):
        FeatureStore().knn(np.ones(256) / 16, 5)
    rng = np.random.default_rng(4)
    store = make_store(rng, 3)
    with pytest.raises(StoreError):
        store.knn(unit(rng, 1)[0], 0)
    store.add(PlaceRecord("q", (0, 0), "query", unit(rng, 1)[0]))
    assert "q" not in [c.id for c in store.knn(store["q"].global_desc, 10)]
    assert len(store.knn(unit(rng, 1)[0], 10)) == 3


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 60), k=st.integers(1, 70), seed=st.integers(0, 10_000))
def test_knn_property(n, k, seed):
    rng = np.random.default_rng(seed)
    store = make_store(rng, n, with_locals=False)
    q = unit(rng, 1)[0]
    assert [c.id for c in store.knn(q, k)] == brute_knn(store, q.astype(np.float64), k)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    store = make_store(rng, 100)
    store.add(PlaceRecord("no-locals", (1.5, -2), "query", unit(rng, 1)[0]))
    path = tmp_path / "s.r2fs"
    store.save(path)
    assert path.read_bytes()[:4] == b"R2FS"
    back = FeatureStore.load(path)
    assert back.ids() == store.ids()
    for rec in store:
        other = back[rec.id]
        assert np.array_equal(other.global_desc, rec.global_desc)
        assert other.geo == rec.geo and other.split == rec.split
        if rec.locals is None:
            assert other.locals is None
        else:
            assert other.locals.equals(rec.locals)


def test_f16_store_cosine_error(tmp_path):
    rng = np.random.default_rng(6)
    store = make_store(rng, 20, dtype="f16")
    back = FeatureStore.from_bytes(store.to_bytes())
    assert back.local_dtype == "f16"
    for rec in store:
        a, b = rec.locals.feats, back[rec.id].locals.feats
        q = a[0]
        assert np.abs(a @ q - b @ q).max() < 1e-2


def test_corrupt_store_files(tmp_path):
    data = make_store(np.random.default_rng(7), 3).to_bytes()
    with pytest.raises(StoreFormatError, match="offset"):
        FeatureStore.from_bytes(data[:-10])
    with pytest.raises(StoreFormatError, match="magic"):
        FeatureStore.from_bytes(b"NOPE" + data[4:])
    with pytest.raises(StoreFormatError, match="version"):
        FeatureStore.from_bytes(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(StoreFormatError, match="trailing"):
        FeatureStore.from_bytes(data + b"\x00")
    with pytest.raises(StoreFormatError, match="offset"):
        FeatureStore.from_bytes(data[:9])


# -- recall ----------------------------------------------------------------


def test_recall_simple_cases():
    refs = {"near": (10.0, 0.0), "far": (30.0, 0.0), "close": (5.0, 0.0)}
    r = recall_at_k({"q": ["near"]}, {"q": (0.0, 0.0)}, refs)
    assert r.recalls[1] == 1.0
    r = recall_at_k({"q": ["far", "far", "close"]}, {"q": (0.0, 0.0)}, refs, ks=(1, 5))
    assert r.recalls == {1: 0.0, 5: 1.0}


def test_recall_empty_list_is_miss_and_exclusion(caplog):
    refs = {"a": (0.0, 0.0)}
    queries = {"q1": (1.0, 0.0), "lost": (500.0, 0.0)}
    with caplog.at_level(logging.WARNING):
        r = recall_at_k({"q1": []}, queries, refs)
    assert r.recalls[1] == 0.0
    assert r.n_evaluated == 1 and r.n_excluded == 1 and r.excluded == ["lost"]
    assert "excluded" in caplog.text


def oracle_recall(results, qgeo, rgeo, k, radius=25.0):
    hit = total = 0
    for q, (qx, qy) in qgeo.items():
        if not any(((rx - qx) ** 2 + (ry - qy) ** 2) ** 0.5 <= radius for rx, ry in rgeo.values()):
            continue
        total += 1
        top = results.get(q, [])[:k]
        hit += any(((rgeo[c][0] - qx) ** 2 + (rgeo[c][1] - qy) ** 2) ** 0.5 <= radius for c in top)
    return hit / total


def test_recall_matches_oracle_and_is_monotone():
    rng = np.random.default_rng(8)
    for trial in range(20):
        rgeo = {f"r{i}": tuple(rng.uniform(0, 300, 2)) for i in range(40)}
        qgeo = {f"q{i}": tuple(rng.uniform(0, 300, 2)) for i in range(50)}
        results = {q: [Candidate(r, 0.0) for r in rng.permutation(list(rgeo))[:12]] for q in qgeo}
        ids = {q: [c.id for c in v] for q, v in results.items()}
        rep = recall_at_k(results, qgeo, rgeo, ks=(1, 5, 10))
        for k in (1, 5, 10):
            assert rep.recalls[k] == oracle_recall(ids, qgeo, rgeo, k)
        assert rep.recalls[1] <= rep.recalls[5] <= rep.recalls[10]
