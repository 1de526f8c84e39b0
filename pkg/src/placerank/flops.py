"""Analytic forward cost of the encoder and the reranker.

Costs are multiply-accumulates of the dense (linear) layers, the convention
under which published ViT GFLOP figures are usually quoted. The attention
score and mixing products (QK^T and AV) depend quadratically on sequence
length and are counted separately in ``attention_macs``; normalization,
softmax and activation costs are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoder import EncoderConfig
from .rerank import PAIR_DIMS, RerankFormer


@dataclass(frozen=True)
class FlopCount:
    linear_macs: int
    attention_macs: int

    @property
    def gflops(self) -> float:
        """Headline figure: dense-layer MACs in units of 1e9."""
        return self.linear_macs / 1e9

    @property
    def total_gmacs(self) -> float:
        return (self.linear_macs + self.attention_macs) / 1e9

    def __add__(self, other: "FlopCount") -> "FlopCount":
        return FlopCount(self.linear_macs + other.linear_macs, self.attention_macs + other.attention_macs)

    def as_dict(self) -> dict:
        return {
            "linear_macs": self.linear_macs,
            "attention_macs": self.attention_macs,
            "gflops": self.gflops,
            "total_gmacs": self.total_gmacs,
        }


def transformer_layer(tokens: int, dim: int, mlp_ratio: int = 4, sequences: int = 1) -> FlopCount:
    """One pre-norm layer over ``sequences`` independent sequences of ``tokens`` each."""
    per_token = 4 * dim * dim + 2 * mlp_ratio * dim * dim  # qkv + out proj + two MLP layers
    return FlopCount(sequences * tokens * per_token, sequences * 2 * tokens * tokens * dim)


def encoder_flops(cfg: EncoderConfig, image_h: int | None = None, image_w: int | None = None,
                  mlp_ratio: int = 4) -> FlopCount:
    h = image_h or cfg.image_h
    w = image_w or cfg.image_w
    n = (h // cfg.patch) * (w // cfg.patch)
    d = cfg.dim
    embed = n * cfg.patch * cfg.patch * cfg.channels * d
    heads = d * cfg.global_dim + n * d * cfg.local_dim
    total = FlopCount(embed + heads, 0)
    for _ in range(cfg.depth):
        total = total + transformer_layer(n + 1, d, mlp_ratio)
    return total


def rerank_flops(rows: int, nn_count: int = 5, dim: int = 32, depth1: int = 2, depth2: int = 6,
                 mlp_ratio: int = 4) -> FlopCount:
    """One query/reference pair with ``rows`` pair rows (2K for K tokens per side)."""
    proj = rows * nn_count * PAIR_DIMS * dim
    total = FlopCount(proj + dim * 2, 0)
    for _ in range(depth1):
        total = total + transformer_layer(nn_count + 1, dim, mlp_ratio, sequences=rows)
    for _ in range(depth2):
        total = total + transformer_layer(rows + 1, dim, mlp_ratio)
    return total


def model_rerank_flops(model: RerankFormer, tokens_per_side: int, nn_count: int | None = None) -> FlopCount:
    return rerank_flops(2 * tokens_per_side, nn_count or model.nn_count, model.dim,
                        model.depth1, model.depth2, model.mlp_ratio)
