"""Acceptance suite: one recorded pass/fail line per criterion (1 to 8).

Each test records its verdict through the ``criterion`` fixture before
asserting, and the verdicts are printed in the terminal summary.
"""

import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from placerank.desk import DeskConfig, run_seed
from placerank.encoder import EncoderConfig, ViTEncoder, interpolate_pos_embed
from placerank.flops import model_rerank_flops, rerank_flops
from placerank.index import FeatureStore, PlaceRecord
from placerank.rerank import (
    AblationFlags,
    RerankFormer,
    build_pair_features,
    prob_true,
    rerank,
    score_pair,
    stack_pairs,
)
from placerank.selection import LocalDescriptorSet, payload_bytes, quantize, select_top_k
from placerank.tensor_core import gradient_check
from placerank.training import (
    assign_positive,
    mine_global_top,
    mine_partial,
    rerank_ce_loss,
    triplet_loss,
)

INSTANCES = 100
DESK_SEEDS = (0, 1, 2)


def unit_rows(rng, n, dim):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def rand_set(rng, n, dim=128):
    return LocalDescriptorSet(rng.random((n, 2)), np.sort(rng.random(n))[::-1], unit_rows(rng, n, dim))


# -- 1: gradients -----------------------------------------------------------


def test_1_gradient_correctness(criterion):
    t0 = time.time()
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    model = RerankFormer(dim=32, depth1=2, depth2=6).double()
    pairs = [build_pair_features(rand_set(rng, 8), rand_set(rng, 8)) for _ in range(2)]
    feats, row_mask, slot_mask = stack_pairs(pairs)
    feats = feats.double().requires_grad_(True)
    labels = torch.tensor([1, 0])

    def rr_loss():
        logits = model(feats, row_mask, slot_mask)
        return rerank_ce_loss(logits, labels) + 0.5 * logits.pow(2).sum()

    rr_err = gradient_check(rr_loss, [*model.parameters(), feats], eps=1e-6, samples_per_param=8)

    enc = ViTEncoder(EncoderConfig()).double()
    imgs = torch.rand(3, enc.config.image_h, enc.config.image_w, 3, dtype=torch.float64)

    def enc_loss():
        g, loc, attn, _ = enc(imgs)
        return triplet_loss(g[0], g[1], g[2], 0.1) + (g[0] * g[2]).sum() + 0.1 * loc.sum() + attn.pow(2).sum()

    enc_err = gradient_check(enc_loss, list(enc.parameters()), eps=1e-6, samples_per_param=4)
    seconds = time.time() - t0
    ok = criterion(1, rr_err < 1e-4 and enc_err < 1e-4 and seconds < 120,
                   f"reranker rel err {rr_err:.2e}, encoder rel err {enc_err:.2e}, {seconds:.1f}s")
    assert ok


# -- 2: oracle equivalence ----------------------------------------------------


def oracle_knn(ids, mat, q, k):
    scores = (q[None, :].astype(np.float32) @ mat.T)[0]
    order = sorted(range(len(ids)), key=lambda j: (-float(scores[j]), ids[j]))
    return [ids[j] for j in order[:k]]


def check_knn(rng):
    n = int(rng.integers(5, 200))
    g = unit_rows(rng, n, 256).astype(np.float32)
    dup = rng.integers(0, n, size=n // 5)
    g[dup] = g[rng.integers(0, n, size=len(dup))]  # exact score ties
    ids = [f"r{int(v):05d}" for v in rng.permutation(10 * n)[:n]]
    store = FeatureStore()
    for i, rid in enumerate(ids):
        store.add(PlaceRecord(rid, (0.0, 0.0), "reference", g[i]))
    q = unit_rows(rng, 1, 256)[0].astype(np.float32)
    k = int(rng.integers(1, n + 3))
    got = [c.id for c in store.knn(q, k)]
    order = sorted(range(n), key=lambda j: ids[j])
    want = oracle_knn([ids[j] for j in order], g[order], q, min(k, n))
    return got == want


def check_selection(rng):
    gh, gw = (int(v) for v in rng.integers(1, 12, size=2))
    amap = rng.integers(0, 6, size=(gh, gw)).astype(np.float32) / 5  # heavy ties
    coords = np.array([(x, y) for y in range(gh) for x in range(gw)])
    feats = unit_rows(rng, gh * gw, 8)
    k = int(rng.integers(1, gh * gw + 3))
    s = select_top_k(SimpleNamespace(attn_map=amap, coords=coords, locals=feats), k)
    flat = list(amap.reshape(-1))
    order = sorted(range(len(flat)), key=lambda i: (-flat[i], i))[:k]
    xy = [((coords[i][0] + 0.5) / gw, (coords[i][1] + 0.5) / gh) for i in order]
    return (np.array_equal(s.attn, np.array([flat[i] for i in order], np.float32))
            and np.array_equal(s.feats, feats[order].astype(np.float32))
            and np.array_equal(s.xy, np.array(xy, np.float32)))


def check_pairs(rng):
    nq, nr = (int(v) for v in rng.integers(1, 20, size=2))
    q, r = rand_set(rng, nq, 16), rand_set(rng, nr, 16)
    if rng.random() < 0.3:  # duplicated features give tied similarities
        r.feats[-1] = r.feats[0]
    t = build_pair_features(q, r, 5)
    sim = np.clip(q.feats @ r.feats.T, -1.0, 1.0)
    want = np.zeros((nq + nr, 5, 7), np.float32)
    mask = np.zeros((nq + nr, 5), bool)
    for base, src, dst, s in ((0, q, r, sim), (nq, r, q, sim.T)):
        for i in range(len(src)):
            ranked = sorted(range(len(dst)), key=lambda j: (-float(s[i, j]), j))[:5]
            for slot in range(5):
                j = ranked[slot % len(ranked)]
                mask[base + i, slot] = slot < len(ranked)
                want[base + i, slot] = [*src.xy[i], src.attn[i], *dst.xy[j], dst.attn[j], s[i, j]]
    return np.array_equal(t.feats, want) and np.array_equal(t.slot_mask, mask)


def geometry(rng):
    n = int(rng.integers(1, 120))
    ref_geo = rng.random((n, 2)) * 80
    emb = unit_rows(rng, n, 16)
    dup = rng.integers(0, n, size=n // 6)
    emb[dup] = emb[rng.integers(0, n, size=len(dup))]
    return ref_geo, emb, rng.random(2) * 80, unit_rows(rng, 1, 16)[0]


def brute_dist(a, b):
    return math.hypot(float(a[0]) - float(b[0]), float(a[1]) - float(b[1]))


def brute_sq(a, b):
    return float(np.sum((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def check_positive(rng):
    ref_geo, emb, q_geo, q_emb = geometry(rng)
    near = [j for j in range(len(ref_geo)) if brute_dist(q_geo, ref_geo[j]) <= 10.0]
    want = min(near, key=lambda j: (brute_sq(q_emb, emb[j]), j)) if near else None
    return assign_positive(q_geo, q_emb, ref_geo, emb) == want


def check_partial(rng):
    ref_geo, emb, q_geo, q_emb = geometry(rng)
    size = int(rng.integers(1, 30))
    seed = int(rng.integers(1 << 30))
    got = mine_partial(q_geo, q_emb, ref_geo, emb, size, np.random.default_rng(seed))
    valid = [j for j in range(len(ref_geo)) if brute_dist(q_geo, ref_geo[j]) > 25.0]
    if not valid:
        return got is None
    subset = np.random.default_rng(seed).choice(np.array(valid), size=min(size, len(valid)), replace=False)
    want = min(subset.tolist(), key=lambda j: (brute_sq(q_emb, emb[j]), j))
    return got == want


def check_global_top(rng):
    ref_geo, emb, _, _ = geometry(rng)
    nq = int(rng.integers(1, 6))
    q_geo, q_emb = rng.random((nq, 2)) * 80, unit_rows(rng, nq, 16)
    top = int(rng.integers(1, 130))
    got = mine_global_top(q_geo, q_emb, ref_geo, emb, top)
    for i in range(nq):
        valid = [j for j in range(len(ref_geo)) if brute_dist(q_geo[i], ref_geo[j]) > 25.0]
        want = sorted(valid, key=lambda j: (brute_sq(q_emb[i], emb[j]), j))[:top]
        if got[i].tolist() != want:
            return False
    return True


ORACLES = {
    "knn": check_knn,
    "top-K selection": check_selection,
    "5-NN pairs": check_pairs,
    "positive": check_positive,
    "partial mining": check_partial,
    "global-top mining": check_global_top,
}


def test_2_oracle_equivalence(criterion):
    t0 = time.time()
    failures = {}
    for i, (name, check) in enumerate(ORACLES.items()):
        rng = np.random.default_rng(1000 + i)
        failures[name] = sum(not check(rng) for _ in range(INSTANCES))
    seconds = time.time() - t0
    detail = ", ".join(f"{name} {INSTANCES - bad}/{INSTANCES}" for name, bad in failures.items())
    ok = criterion(2, not any(failures.values()) and seconds < 300, f"{detail}, {seconds:.1f}s")
    assert ok


# -- 3: loss arithmetic -------------------------------------------------------


def test_3_loss_arithmetic(criterion):
    def vec(*v):
        return torch.tensor(v, dtype=torch.float64)

    q = vec(1.0, 0.0)
    cases = [
        (triplet_loss(q, q, vec(1.0, math.sqrt(0.2)), 0.1), 0.0),
        (triplet_loss(q, q, q, 0.1), 0.1),
        (triplet_loss(q, vec(1.0, 0.2), vec(1.0, 0.3), 0.1), 0.05),
        (rerank_ce_loss(vec(-10.0, 10.0), [1]), math.log1p(math.exp(-20))),
        (rerank_ce_loss(vec(-10.0, 10.0), [0]), 20 + math.log1p(math.exp(-20))),
    ]
    cases += [(rerank_ce_loss(vec(z, z), [label]), math.log(2)) for z in (-3.0, 0.0, 7.5) for label in (0, 1)]
    worst = max(abs(got.item() - want) for got, want in cases)
    ok = criterion(3, worst <= 1e-6, f"{len(cases)} examples, max abs err {worst:.1e}")
    assert ok


# -- 4: structural fidelity ---------------------------------------------------


def test_4_structural_fidelity(criterion):
    rng = np.random.default_rng(4)
    q = rand_set(rng, 500)
    t = build_pair_features(q, rand_set(rng, 500))
    with torch.no_grad():
        projected = RerankFormer().proj(torch.from_numpy(t.feats))
    payload = payload_bytes(500, 128, "f32")
    block = len(quantize(q, "f32"))
    total_gb = 18_871 * payload / 1e9
    checks = [
        t.feats.shape == (1000, 5, 7),
        tuple(projected.shape) == (1000, 5, 32),
        payload == 500 * 131 * 4 == 262_000,
        block == payload + 5,
        abs(total_gb / 4.79 - 1) <= 0.05,
    ]
    ok = criterion(4, all(checks),
                   f"pairs {t.feats.shape}, projected {tuple(projected.shape)}, payload {payload} B, "
                   f"18,871 images {total_gb:.3f} GB ({100 * (total_gb / 4.79 - 1):+.1f}% vs 4.79)")
    assert ok


# -- 5: invariances -----------------------------------------------------------


def test_5_invariances(criterion):
    torch.manual_seed(5)
    rng = np.random.default_rng(5)
    model = RerankFormer().eval()

    # shift: float32 logits and shifts are exact in float64, so softmax sees identical differences
    logits = rng.normal(size=(200, 2)).astype(np.float32)
    shifts = (rng.normal(size=(200, 1)) * 50).astype(np.float32)
    shifted = logits.astype(np.float64) + shifts.astype(np.float64)
    shift_ok = np.array_equal(prob_true(logits.astype(np.float64)), prob_true(shifted))

    flags = AblationFlags(use_pe=False)
    perm_err = 0.0
    for _ in range(20):
        nq, nr = (int(v) for v in rng.integers(2, 16, size=2))
        t = build_pair_features(rand_set(rng, nq), rand_set(rng, nr))
        base = score_pair(t, model, flags).logits
        perm = rng.permutation(t.rows)
        t.feats, t.slot_mask, t.neighbors = t.feats[perm], t.slot_mask[perm], t.neighbors[perm]
        perm_err = max(perm_err, float(np.abs(score_pair(t, model, flags).logits - base).max()))

    enc = ViTEncoder(EncoderConfig())
    grid = enc.config.grid
    interp_ok = torch.equal(interpolate_pos_embed(enc.pos_embed[0].detach(), grid, grid), enc.pos_embed[0].detach())

    store = FeatureStore()
    query = PlaceRecord("q", (0.0, 0.0), "query", unit_rows(rng, 1, 256)[0], rand_set(rng, 16))
    store.add(query)
    for i in range(60):
        locals_ = rand_set(rng, 16 if i % 3 else int(rng.integers(4, 16)))
        store.add(PlaceRecord(f"r{i:03d}", (float(i), 0.0), "reference", unit_rows(rng, 1, 256)[0], locals_))
    cands = store.knn(query.global_desc, 60)
    batched = {c.id: c.prob_true for c in rerank(query, cands, store, model)}
    sequential = {c.id: score_pair(build_pair_features(query.locals, store[c.id].locals), model).prob_true
                  for c in cands}
    batch_ok = batched == sequential

    ok = criterion(5, shift_ok and perm_err <= 1e-5 and interp_ok and batch_ok,
                   f"shift exact {shift_ok}, permutation max diff {perm_err:.1e}, "
                   f"interpolation identity {interp_ok}, batched == sequential {batch_ok}")
    assert ok


# -- 6 and 7: desk-scale training ---------------------------------------------


@pytest.fixture(scope="session")
def desk_runs():
    return {seed: run_seed(seed, DeskConfig()) for seed in DESK_SEEDS}


def r1(report) -> float:
    return report["recall@1"]


@pytest.mark.slow
def test_6_rerank_improves_recall(desk_runs, criterion):
    lines, ok = [], True
    for seed, run in desk_runs.items():
        base, full = r1(run["retrieval"]), r1(run["variants"]["full"]["rerank"])
        minutes = (run["seconds"]["retrieval"] + run["seconds"]["full"]) / 60
        sim = run["similarity"]
        seed_ok = full - base >= 0.05 and minutes < 60 and sim["same_place"] > sim["cross_place"]
        ok &= seed_ok
        lines.append(f"seed {seed}: R@1 {base:.3f} -> {full:.3f} ({100 * (full - base):+.1f} pts, "
                     f"{minutes:.1f} min, same/cross sim {sim['same_place']:.3f}/{sim['cross_place']:.3f})")
    assert criterion(6, ok, "; ".join(lines))


@pytest.mark.slow
def test_7_ablation_directions(desk_runs, criterion):
    def mean_r1(name):
        return float(np.mean([r1(run["variants"][name]["rerank"]) for run in desk_runs.values()]))

    full, no_s, top1 = mean_r1("full"), mean_r1("no_correlation"), mean_r1("top1")
    per_seed = ", ".join(
        f"seed {s}: " + "/".join(f"{r1(run['variants'][v]['rerank']):.3f}" for v in ("full", "no_correlation", "top1"))
        for s, run in desk_runs.items()
    )
    # "within a few points" is read as at most 5 recall points between the seed means
    ok = no_s < full and abs(top1 - full) <= 0.05
    assert criterion(7, ok, f"mean R@1 full {full:.3f}, no correlation {no_s:.3f}, nn=1 {top1:.3f} "
                            f"(full/no_correlation/top1 {per_seed})")


# -- 8: FLOP accounting -------------------------------------------------------


def test_8_flop_accounting(criterion):
    analytic = rerank_flops(1000, 5, 32, 2, 6)
    from_model = model_rerank_flops(RerankFormer(dim=32, depth1=2, depth2=6), 500)
    g = analytic.gflops
    ok = criterion(8, 0.226 / 2 <= g <= 0.226 * 2 and from_model == analytic,
                   f"{g:.4f} G per pair (ratio {g / 0.226:.3f} to 0.226), "
                   f"{analytic.total_gmacs:.4f} G including attention products")
    assert ok
