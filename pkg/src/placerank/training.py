"""Losses, positive/negative selection and the staged training schedule.

Stages:
  retrieval  encoder only, triplet loss, partial negative mining
  rerank     encoder frozen, reranker trained with CE on (query, positive)
             and (query, negative from the global top-100 hardest)
  finetune   both trained together, partial mining, triplet + CE
  end2end    both trained from scratch together, partial mining
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import (
    EncoderConfig,
    ViTEncoder,
    encode_batch,
    grid_coords,
    images_to_tensor,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
)
from .index import FeatureStore, PlaceRecord, recall_at_k
from .kernels import topk_rows
from .rerank import AblationFlags, RerankFormer, build_pair_features, pair_features_torch, rerank, stack_pairs
from .selection import normalized_coords, select_top_k

log = logging.getLogger(__name__)

POSITIVE_RADIUS_M = 10.0
NEGATIVE_RADIUS_M = 25.0
STAGES = ("retrieval", "rerank", "finetune", "end2end")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# -- losses ----------------------------------------------------------------


def triplet_loss(e_q, e_p, e_n, margin: float = 0.1, reduce: bool = True):
    """max(|q - p|^2 - |q - n|^2 + m, 0) with squared L2 distances."""
    d_p = (e_q - e_p).pow(2).sum(-1)
    d_n = (e_q - e_n).pow(2).sum(-1)
    loss = torch.clamp(d_p - d_n + margin, min=0.0)
    return loss.mean() if reduce else loss


def rerank_ce_loss(logits, labels):
    """Cross-entropy of softmax(logits) against labels; index 1 is the True logit."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() == 1:
        logits, labels = logits[None], labels.reshape(1)
    return F.cross_entropy(logits, labels)


# -- positives and mining --------------------------------------------------


def _sq_dists(q, refs) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    return np.maximum((q * q).sum(-1)[..., None] + (refs * refs).sum(-1) - 2 * q @ refs.T, 0.0)


def _geo_dists(q_geo, ref_geo) -> np.ndarray:
    diff = np.asarray(ref_geo, dtype=np.float64) - np.asarray(q_geo, dtype=np.float64)[..., None, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def assign_positive(q_geo, q_emb, ref_geo, ref_emb, radius: float = POSITIVE_RADIUS_M):
    """Index of the in-radius reference nearest in embedding space, or None."""
    near = np.flatnonzero(_geo_dists(q_geo, ref_geo) <= radius)
    if not len(near):
        return None
    d = _sq_dists(q_emb, np.asarray(ref_emb)[near])
    return int(near[topk_rows(d[None], 1, ascending=True)[0, 0]])


def valid_negatives(q_geo, ref_geo, radius: float = NEGATIVE_RADIUS_M) -> np.ndarray:
    return np.flatnonzero(_geo_dists(q_geo, ref_geo) > radius)


def mine_partial(q_geo, q_emb, ref_geo, ref_emb, subset_size: int, rng, radius: float = NEGATIVE_RADIUS_M):
    """Hardest valid negative within a random subset of the valid negatives."""
    valid = valid_negatives(q_geo, ref_geo, radius)
    if not len(valid):
        return None
    subset = np.sort(rng.choice(valid, size=min(subset_size, len(valid)), replace=False))
    d = _sq_dists(q_emb, np.asarray(ref_emb)[subset])
    return int(subset[topk_rows(d[None], 1, ascending=True)[0, 0]])


def mine_global_top(q_geos, q_embs, ref_geo, ref_emb, top: int = 100, radius: float = NEGATIVE_RADIUS_M):
    """Per query, up to ``top`` valid negatives sorted by ascending embedding distance."""
    q_geos = np.asarray(q_geos, dtype=np.float64).reshape(-1, 2)
    d = _sq_dists(np.asarray(q_embs).reshape(len(q_geos), -1), ref_emb)
    far = _geo_dists(q_geos, ref_geo) > radius
    d = np.where(far, d, np.inf)
    counts = far.sum(1)
    idx = topk_rows(d, min(top, d.shape[1]), ascending=True)
    return [row[: min(top, c)].copy() for row, c in zip(idx, counts)]


# -- configuration -------------------------------------------------------


@dataclass
class TrainConfig:
    stage: str = "retrieval"
    margin: float = 0.1
    lr: float = 5e-4
    weight_decay: float = 0.05
    batch_triplets: int = 64
    epochs: int = 50
    subset_size: int = 1000
    global_top: int = 100
    top_k_tokens: int = 500
    nn: int = 5
    eval_topk: int = 100
    val_fraction: float = 0.1
    seed: int = 0
    ablations: tuple[str, ...] = ()
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    rerank_dim: int = 32
    rerank_heads: int = 4
    rerank_depth1: int = 2
    rerank_depth2: int = 6

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.margin <= 0 or self.lr <= 0:
            raise ValueError("margin and lr must be positive")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.ablations = tuple(self.ablations)

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags.from_names(self.ablations, nn=self.nn)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Models:
    encoder: ViTEncoder
    reranker: RerankFormer | None = None
    meta: dict = field(default_factory=dict)

    def arrays(self) -> dict:
        out = module_arrays(self.encoder, "encoder.")
        if self.reranker is not None:
            out.update(module_arrays(self.reranker, "reranker."))
        return out

    def save(self, path, **extra) -> None:
        meta = dict(self.meta)
        meta["encoder"] = asdict(self.encoder.config)
        if self.reranker is not None:
            meta["reranker"] = self.reranker.config()
        meta.update(extra)
        save_checkpoint(path, self.arrays(), meta)

    @classmethod
    def load(cls, path) -> "Models":
        arrays, meta = load_checkpoint(path)
        enc = ViTEncoder(EncoderConfig(**meta["encoder"]))
        load_module_arrays(enc, arrays, "encoder.")
        rr = None
        if "reranker" in meta:
            rr = RerankFormer(**meta["reranker"])
            load_module_arrays(rr, arrays, "reranker.")
        return cls(enc, rr, meta)


def new_reranker(cfg: TrainConfig) -> RerankFormer:
    return RerankFormer(cfg.rerank_dim, cfg.rerank_heads, cfg.rerank_depth1, cfg.rerank_depth2, nn_count=cfg.nn)


# -- data split ------------------------------------------------------------


@dataclass
class Split:
    views: list
    refs: list[int]
    train_q: list[int]
    val_q: list[int]

    @property
    def ref_geo(self):
        return np.array([self.views[i].geo for i in self.refs])


def split_views(views, val_fraction: float, seed: int) -> Split:
    """References are shared; query views of a held-out set of places validate."""
    refs = [i for i, v in enumerate(views) if v.split == "reference"]
    queries = [i for i, v in enumerate(views) if v.split == "query"]
    places = sorted({views[i].place for i in queries})
    rng = np.random.default_rng(seed + 7919)
    n_val = int(round(val_fraction * len(places)))
    val_places = set(rng.choice(places, size=n_val, replace=False).tolist()) if n_val else set()
    val_q = [i for i in queries if views[i].place in val_places]
    train_q = [i for i in queries if views[i].place not in val_places]
    return Split(views, refs, train_q, val_q)


# -- evaluation helpers ----------------------------------------------------


def build_records(encoder: ViTEncoder, views, top_k_tokens: int) -> list[PlaceRecord]:
    encoded = encode_batch(encoder, np.stack([v.image for v in views]))
    return [
        PlaceRecord(v.id, v.geo, v.split, e.global_desc, select_top_k(e, top_k_tokens))
        for v, e in zip(views, encoded)
    ]


def build_store(encoder: ViTEncoder, views, top_k_tokens: int, local_dtype: str = "f32") -> FeatureStore:
    store = FeatureStore(local_dtype)
    for rec in build_records(encoder, views, top_k_tokens):
        store.add(rec)
    return store


def evaluate_store(store: FeatureStore, reranker: RerankFormer | None, topk: int = 100,
                   flags: AblationFlags = AblationFlags(), query_ids: Sequence[str] | None = None,
                   ks=(1, 5, 10)) -> dict:
    """Recall before and after reranking plus both orderings per query."""
    qids = list(query_ids) if query_ids is not None else store.ids("query")
    ref_ids = store.ids("reference")
    qg = np.stack([store[q].global_desc for q in qids])
    retrieved = dict(zip(qids, store.knn_batch(qg, topk)))
    reranked = {}
    if reranker is not None:
        for q in qids:
            reranked[q] = rerank(store[q], retrieved[q], store, reranker, flags)
    qgeo = {q: store[q].geo for q in qids}
    rgeo = {r: store[r].geo for r in ref_ids}
    out = {"retrieval": recall_at_k(retrieved, qgeo, rgeo, ks).as_dict(), "results": {}}
    if reranker is not None:
        out["rerank"] = recall_at_k(reranked, qgeo, rgeo, ks).as_dict()
    for q in qids:
        entry = {"retrieval": [[c.id, c.score] for c in retrieved[q]]}
        if reranker is not None:
            entry["rerank"] = [[c.id, c.score, c.prob_true] for c in reranked[q]]
        out["results"][q] = entry
    return out


# -- training --------------------------------------------------------------


def _cosine_lr(step: int, total: int, base: float) -> float:
    return 0.5 * base * (1 + math.cos(math.pi * min(step, total) / max(total, 1)))


class _Logger:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")

    def __call__(self, entry: dict):
        log.info("%s", entry)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _select(attn: torch.Tensor, k: int, grid) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-k token indices by attention (no gradient) and their normalized xy."""
    gh, gw = grid
    idx = torch.from_numpy(topk_rows(attn.detach().numpy(), min(k, attn.shape[1])))
    xy = torch.from_numpy(normalized_coords(grid_coords(gh, gw), gh, gw).astype(np.float32))
    return idx, xy[idx]


def _gather_sets(attn, tokens, encoder: ViTEncoder, k: int, grid):
    """Differentiable (xy, A, f) for the top-k tokens of every image in a batch."""
    idx, xy = _select(attn, k, grid)
    a = torch.gather(attn, 1, idx)
    tok = torch.gather(tokens, 1, idx[..., None].expand(-1, -1, tokens.shape[-1]))
    return xy, a, encoder.local_features(tok)


@torch.no_grad()
def _trunk_outputs(encoder, views, idx, batch=128):
    was = encoder.training
    encoder.eval()
    gs, toks, attns = [], [], []
    for s in range(0, len(idx), batch):
        x = images_to_tensor(np.stack([views[i].image for i in idx[s : s + batch]]))
        g, tok, a, _ = encoder.trunk(x)
        gs.append(g)
        toks.append(tok)
        attns.append(a)
    encoder.train(was)
    return torch.cat(gs), torch.cat(toks), torch.cat(attns)


def trainable_parameters(stage: str, models: "Models") -> list[tuple[str, torch.nn.Parameter]]:
    """The parameter set each stage is allowed to update.

    The rerank stage freezes the whole global retrieval path (backbone and
    global head) and trains the reranker together with the local reduction head.
    """
    enc, rr = models.encoder, models.reranker
    if stage == "retrieval":
        return [("encoder." + n, p) for n, p in enc.named_parameters() if not n.startswith("local_head.")]
    if stage == "rerank":
        out = [("encoder." + n, p) for n, p in enc.named_parameters() if n.startswith("local_head.")]
        return out + [("reranker." + n, p) for n, p in rr.named_parameters()]
    return [("encoder." + n, p) for n, p in enc.named_parameters()] + [
        ("reranker." + n, p) for n, p in rr.named_parameters()
    ]


class _FrozenTrunk:
    """Backbone outputs cached once for the rerank stage."""

    def __init__(self, encoder, views):
        self.globals, self.tokens, self.attn = _trunk_outputs(encoder, views, list(range(len(views))))


def train(cfg: TrainConfig, views, out_path=None, init: Models | None = None,
          metrics_path=None, progress: bool = False) -> tuple[Models, list[dict]]:
    """Run one stage; returns the best-recall@5 models and the per-epoch log."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    split = split_views(views, cfg.val_fraction, cfg.seed)
    if not split.train_q or not split.refs:
        raise ValueError("training data needs query and reference views")
    flags = cfg.flags
    if cfg.stage in ("rerank", "finetune"):
        if init is None:
            raise ValueError(f"stage {cfg.stage!r} needs a checkpoint from the previous stage")
        if cfg.stage == "finetune" and init.reranker is None:
            raise ValueError("finetune needs a checkpoint that already holds a reranker")
        # never mutate the caller's models: stage 2 trains the local head in place
        models = Models(copy.deepcopy(init.encoder), copy.deepcopy(init.reranker), dict(init.meta))
        if cfg.stage == "rerank":
            models.reranker = new_reranker(cfg)
    elif cfg.stage == "retrieval":
        models = Models(copy.deepcopy(init.encoder) if init else ViTEncoder(cfg.encoder))
    else:
        models = Models(ViTEncoder(cfg.encoder), new_reranker(cfg))
    enc, rr = models.encoder, models.reranker

    named = trainable_parameters(cfg.stage, models)
    train_ids = {id(p) for _, p in named}
    everything = list(enc.parameters()) + (list(rr.parameters()) if rr is not None else [])
    for p in everything:
        p.requires_grad_(id(p) in train_ids)
    opt = torch.optim.AdamW([p for _, p in named], lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(split.train_q) / cfg.batch_triplets)
    total_steps = steps_per_epoch * cfg.epochs
    emit = _Logger(metrics_path)
    views = split.views
    ref_geo = split.ref_geo

    frozen = None
    global_hard = None
    if cfg.stage == "rerank":
        # the retrieval path is frozen: trunk outputs and hard negatives are computed once
        frozen = _FrozenTrunk(enc, views)
        allg = frozen.globals.numpy()
        q_geo = np.array([views[i].geo for i in split.train_q])
        global_hard = mine_global_top(q_geo, allg[split.train_q], ref_geo, allg[split.refs], cfg.global_top)
        global_hard = dict(zip(split.train_q, global_hard))

    history = []
    best_key = None
    best_state = models.arrays()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        if frozen is None:
            ref_emb = _trunk_outputs(enc, views, split.refs)[0].numpy()
            q_emb = _trunk_outputs(enc, views, split.train_q)[0].numpy()
        else:
            ref_emb = allg[split.refs]
            q_emb = allg[split.train_q]
        triplets = []
        for qi, q in enumerate(split.train_q):
            qgeo = views[q].geo
            pos = assign_positive(qgeo, q_emb[qi], ref_geo, ref_emb)
            if pos is None:
                continue
            if global_hard is not None:
                cands = global_hard[q]
                if not len(cands):
                    continue
                neg = int(cands[rng.integers(0, len(cands))])
            else:
                neg = mine_partial(qgeo, q_emb[qi], ref_geo, ref_emb, cfg.subset_size, rng)
                if neg is None:
                    continue
            triplets.append((q, split.refs[pos], split.refs[neg]))
        order = rng.permutation(len(triplets))
        sums = {"triplet": 0.0, "ce": 0.0, "n": 0}
        enc.train()
        if rr is not None:
            rr.train()
        for s in range(0, len(order), cfg.batch_triplets):
            batch = [triplets[i] for i in order[s : s + cfg.batch_triplets]]
            for grp in opt.param_groups:
                grp["lr"] = _cosine_lr(step, total_steps, cfg.lr)
            loss, parts = _step_loss(cfg, enc, rr, views, batch, frozen, flags)
            if not torch.isfinite(loss):
                ckpt = Path(out_path) if out_path else None
                _restore(models, best_state)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; last good checkpoint: {ckpt}",
                    ckpt if ckpt is not None and ckpt.exists() else None,
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            for k, v in parts.items():
                sums[k] += v * len(batch)
            sums["n"] += len(batch)
        entry = {
            "stage": cfg.stage,
            "epoch": epoch,
            "triplets": sums["n"],
            "loss_triplet": sums["triplet"] / max(sums["n"], 1),
            "loss_ce": sums["ce"] / max(sums["n"], 1),
            "lr": _cosine_lr(step, total_steps, cfg.lr),
        }
        entry.update(_validate(cfg, models, split, flags))
        entry["seconds"] = round(time.time() - t0, 3)
        history.append(entry)
        emit(entry)
        if progress:
            print(json.dumps(entry), flush=True)
        key = (entry["recall@5"], entry["recall@1"])
        if best_key is None or key >= best_key:
            best_key = key
            best_state = models.arrays()
            if out_path:
                models.save(out_path, stage=cfg.stage, epoch=epoch, seed=cfg.seed, train_config=cfg.as_dict())
    _restore(models, best_state)
    for p in everything:
        p.requires_grad_(True)
    models.meta.update(stage=cfg.stage, seed=cfg.seed, train_config=cfg.as_dict())
    return models, history


def _restore(models: Models, arrays: dict) -> None:
    load_module_arrays(models.encoder, arrays, "encoder.")
    if models.reranker is not None:
        load_module_arrays(models.reranker, arrays, "reranker.")


def _pair_logits(cfg, enc, rr, xy, a, f, b, flags):
    """Logits for (q, p) then (q, n); rows of xy/a/f are ordered q, p, n."""
    iq = torch.cat([torch.arange(b), torch.arange(b)])
    ir = torch.arange(b, 3 * b)
    feats = pair_features_torch(xy[iq], a[iq], f[iq], xy[ir], a[ir], f[ir], flags.nn)
    masks = torch.ones(feats.shape[:2], dtype=torch.bool), torch.ones(feats.shape[:3], dtype=torch.bool)
    return rr(feats, *masks, flags=flags)


def _step_loss(cfg, enc, rr, views, batch, frozen, flags):
    q, p, n = (list(t) for t in zip(*batch))
    b = len(batch)
    labels = torch.cat([torch.ones(b), torch.zeros(b)]).long()
    grid = enc.config.grid
    if frozen is not None:
        sel = q + p + n
        xy, a, f = _gather_sets(frozen.attn[sel], frozen.tokens[sel], enc, cfg.top_k_tokens, grid)
        ce = rerank_ce_loss(_pair_logits(cfg, enc, rr, xy, a, f, b, flags), labels)
        return ce, {"triplet": 0.0, "ce": ce.item()}
    images = images_to_tensor(np.stack([views[i].image for i in q + p + n]))
    g, tokens, attn, _ = enc.trunk(images)
    tl = triplet_loss(g[:b], g[b : 2 * b], g[2 * b :], cfg.margin)
    if rr is None:
        return tl, {"triplet": tl.item(), "ce": 0.0}
    xy, a, f = _gather_sets(attn, tokens, enc, cfg.top_k_tokens, grid)
    ce = rerank_ce_loss(_pair_logits(cfg, enc, rr, xy, a, f, b, flags), labels)
    return tl + ce, {"triplet": tl.item(), "ce": ce.item()}


def _validate(cfg: TrainConfig, models: Models, split: Split, flags) -> dict:
    if not split.val_q:
        return {"recall@1": 0.0, "recall@5": 0.0, "recall@10": 0.0}
    views = split.views
    idx = split.refs + split.val_q
    store = build_store(models.encoder, [views[i] for i in idx], cfg.top_k_tokens)
    res = evaluate_store(store, models.reranker, cfg.eval_topk, flags)
    key = "rerank" if models.reranker is not None and cfg.stage != "retrieval" else "retrieval"
    out = {f"recall@{k}": res[key][f"recall@{k}"] for k in (1, 5, 10)}
    if key == "rerank":
        out.update({f"retrieval_recall@{k}": res["retrieval"][f"recall@{k}"] for k in (1, 5, 10)})
    return out
