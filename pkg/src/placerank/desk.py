"""Desk-scale end-to-end experiment: retrieval training, reranker variants,
evaluation on a disjoint synthetic world.

The schedule is scaled to a single CPU core: small encoder, 32 tokens per
image, the top-20 retrieval candidates reranked, and a partial-mining subset
that is the same small fraction of the reference set as in the large-scale
recipe.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .encoder import EncoderConfig
from .synthetic import WorldSpec, generate
from .training import TrainConfig, build_store, evaluate_store, train

VARIANTS = {
    "full": (),
    "no_correlation": ("no_correlation",),
    "top1": ("top1",),
}


@dataclass(frozen=True)
class DeskConfig:
    n_places: int = 200
    views_per_place: int = 4
    tokens: int = 32
    topk: int = 20
    subset_size: int = 10
    retrieval_epochs: int = 8
    rerank_epochs: int = 24
    retrieval_lr: float = 5e-4
    rerank_lr: float = 1e-3
    test_seed_offset: int = 1000
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def train_config(self, stage: str, seed: int, ablations=()) -> TrainConfig:
        rerank = stage == "rerank"
        return TrainConfig(
            stage=stage,
            seed=seed,
            epochs=self.rerank_epochs if rerank else self.retrieval_epochs,
            lr=self.rerank_lr if rerank else self.retrieval_lr,
            top_k_tokens=self.tokens,
            eval_topk=self.topk,
            global_top=self.topk,
            subset_size=self.subset_size,
            ablations=tuple(ablations),
            encoder=self.encoder,
        )


def place_similarity(store, views) -> dict:
    """Mean global cosine over same-place and cross-place view pairs."""
    g = np.stack([store[v.id].global_desc for v in views]).astype(np.float64)
    place = np.array([v.place for v in views])
    sim = g @ g.T
    same = (place[:, None] == place[None, :]) & ~np.eye(len(views), dtype=bool)
    cross = place[:, None] != place[None, :]
    return {"same_place": float(sim[same].mean()), "cross_place": float(sim[cross].mean())}


def run_seed(seed: int, cfg: DeskConfig = DeskConfig(), variants=tuple(VARIANTS), progress: bool = False) -> dict:
    """Train on world ``seed`` and evaluate on world ``seed + test_seed_offset``.

    Returns retrieval-only recall plus post-rerank recall per reranker variant.
    """
    torch.set_num_threads(1)
    train_views = generate(WorldSpec(seed=seed, n_places=cfg.n_places, views_per_place=cfg.views_per_place,
                                     image_size=cfg.encoder.image_h))
    test_views = generate(WorldSpec(seed=seed + cfg.test_seed_offset, n_places=cfg.n_places,
                                    views_per_place=cfg.views_per_place, image_size=cfg.encoder.image_h))
    t0 = time.time()
    stage1, hist1 = train(cfg.train_config("retrieval", seed), train_views, progress=progress)
    out = {"seed": seed, "config": asdict(cfg), "retrieval_history": hist1,
           "seconds": {"retrieval": time.time() - t0}, "variants": {}}
    store = build_store(stage1.encoder, test_views, cfg.tokens)
    out["retrieval"] = evaluate_store(store, None, cfg.topk)["retrieval"]
    out["similarity"] = place_similarity(store, test_views)
    for name in variants:
        t0 = time.time()
        tc = cfg.train_config("rerank", seed, VARIANTS[name])
        models, hist = train(tc, train_views, init=stage1, progress=progress)
        # the local head is trained in stage 2, so locals are re-extracted per variant
        store = build_store(models.encoder, test_views, cfg.tokens)
        res = evaluate_store(store, models.reranker, cfg.topk, tc.flags)
        out["variants"][name] = {"retrieval": res["retrieval"], "rerank": res["rerank"], "history": hist}
        out["seconds"][name] = time.time() - t0
    return out
