"""Cost report: latency medians, descriptor bytes and analytic FLOPs.

Latencies depend on the machine and are informative only; bytes and FLOPs
are exact functions of the configuration.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .encoder import ViTEncoder, encode_batch
from .flops import encoder_flops, model_rerank_flops
from .index import FeatureStore
from .rerank import AblationFlags, RerankFormer, rerank
from .selection import payload_bytes

MIN_REPEATS = 20


@dataclass
class CostReport:
    extract_ms: float | None
    retrieval_ms: float
    rerank_ms: float | None
    local_bytes_f32: int
    local_bytes_f16: int
    tokens_per_image: int
    topk: int
    repeats: int
    rerank_gflops_per_pair: float | None
    rerank_attention_gmacs_per_pair: float | None
    encode_gflops: float | None

    def as_dict(self) -> dict:
        return asdict(self)


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench(store: FeatureStore, encoder: ViTEncoder | None, reranker: RerankFormer | None,
          topk: int = 100, repeats: int = MIN_REPEATS, image: np.ndarray | None = None,
          flags: AblationFlags = AblationFlags()) -> CostReport:
    """Time extraction, retrieval and reranking for one query; never mutates the store."""
    repeats = max(int(repeats), MIN_REPEATS)
    qids = store.ids("query") or store.ids()
    if not qids:
        raise ValueError("empty store")
    query = store[qids[0]]
    with_locals = [r for r in store if r.locals is not None and len(r.locals)]
    k_tokens = max((len(r.locals) for r in with_locals), default=0)
    dim = with_locals[0].locals.dim if with_locals else 128
    retrieval_ms = _median_ms(lambda: store.knn(query.global_desc, topk), repeats)
    cands = store.knn(query.global_desc, topk)
    rerank_ms = None
    rr_flops = None
    if reranker is not None and query.locals is not None:
        rerank_ms = _median_ms(lambda: rerank(query, cands, store, reranker, flags), repeats)
        rr_flops = model_rerank_flops(reranker, k_tokens, flags.nn)
    extract_ms = None
    enc_flops = None
    if encoder is not None:
        cfg = encoder.config
        img = image if image is not None else np.zeros((cfg.image_h, cfg.image_w, cfg.channels), np.uint8)
        extract_ms = _median_ms(lambda: encode_batch(encoder, img[None]), repeats)
        enc_flops = encoder_flops(cfg, img.shape[0], img.shape[1]).gflops
    return CostReport(
        extract_ms=extract_ms,
        retrieval_ms=retrieval_ms,
        rerank_ms=rerank_ms,
        local_bytes_f32=payload_bytes(k_tokens, dim, "f32"),
        local_bytes_f16=payload_bytes(k_tokens, dim, "f16"),
        tokens_per_image=k_tokens,
        topk=topk,
        repeats=repeats,
        rerank_gflops_per_pair=rr_flops.gflops if rr_flops else None,
        rerank_attention_gmacs_per_pair=rr_flops.attention_macs / 1e9 if rr_flops else None,
        encode_gflops=enc_flops,
    )
