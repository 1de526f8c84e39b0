"""Correlation-based reranking transformer.

Each query/reference pair becomes a stack of rows, one per selected local
token on either side. A row holds the token's 5 nearest neighbours on the
other side as 7-vectors ``(x, y, A, x', y', A', S)``. Block-1 summarizes
every row into one token; Block-2 summarizes the rows into one vector, which
a linear head turns into (False, True) logits.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .index import Candidate, FeatureStore, PlaceRecord
from .kernels import topk_rows
from .selection import LocalDescriptorSet
from .tensor_core import TransformerLayer, init_transformer_weights, sinusoidal_table

PAIR_DIMS = 7
DEFAULT_NN = 5


@dataclass(frozen=True)
class AblationFlags:
    """Reranker toggles; the defaults give the full model."""

    use_pe: bool = True
    zero_attention: bool = False
    zero_xy: bool = False
    zero_correlation: bool = False
    nn: int = DEFAULT_NN
    use_block1: bool = True
    use_block2: bool = True

    @classmethod
    def from_names(cls, names: Sequence[str], **kw) -> "AblationFlags":
        table = {
            "no_pe": ("use_pe", False),
            "no_attention": ("zero_attention", True),
            "no_xy": ("zero_xy", True),
            "no_correlation": ("zero_correlation", True),
            "no_block1": ("use_block1", False),
            "no_block2": ("use_block2", False),
        }
        fields = dict(kw)
        for name in names:
            if name == "top1":
                fields["nn"] = 1
            elif name in table:
                key, val = table[name]
                fields[key] = val
            else:
                raise ValueError(f"unknown ablation {name!r}")
        return cls(**fields)


@dataclass
class PairFeatureTensor:
    feats: np.ndarray  # (R, nn, 7)
    row_mask: np.ndarray  # (R,)
    slot_mask: np.ndarray  # (R, nn)
    neighbors: np.ndarray  # (R, nn) index into the opposite set
    n_query_rows: int

    @property
    def rows(self) -> int:
        return self.feats.shape[0]


class MatchScore(NamedTuple):
    logits: np.ndarray  # (False, True)
    prob_true: float


def _neighbors(sim: np.ndarray, nn_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-nn columns per row; short rows repeat cyclically with the repeats masked."""
    have = min(nn_count, sim.shape[1])
    idx = topk_rows(sim, have)
    slots = np.arange(nn_count) % have
    return idx[:, slots], np.broadcast_to(np.arange(nn_count) < have, idx[:, slots].shape)


def build_pair_features(q: LocalDescriptorSet, r: LocalDescriptorSet, nn_count: int = DEFAULT_NN) -> PairFeatureTensor:
    """Query->reference rows first (query attention order), then reference->query."""
    if len(q) == 0 or len(r) == 0:
        raise ValueError("both descriptor sets must be non-empty")
    sim = np.clip(q.feats.astype(np.float32) @ r.feats.astype(np.float32).T, -1.0, 1.0)
    blocks, masks, nbrs = [], [], []
    for src, dst, s in ((q, r, sim), (r, q, np.ascontiguousarray(sim.T))):
        idx, valid = _neighbors(s, nn_count)
        own = np.concatenate([src.xy, src.attn[:, None]], axis=1)
        other = np.concatenate([dst.xy, dst.attn[:, None]], axis=1)
        rows = np.empty((len(src), nn_count, PAIR_DIMS), dtype=np.float32)
        rows[:, :, 0:3] = own[:, None, :]
        rows[:, :, 3:6] = other[idx]
        rows[:, :, 6] = np.take_along_axis(s, idx, axis=1)
        blocks.append(rows)
        masks.append(valid)
        nbrs.append(idx)
    feats = np.concatenate(blocks)
    return PairFeatureTensor(
        feats=feats,
        row_mask=np.ones(len(feats), dtype=bool),
        slot_mask=np.concatenate(masks).copy(),
        neighbors=np.concatenate(nbrs),
        n_query_rows=len(q),
    )


def pair_features_torch(q_xy, q_attn, q_feats, r_xy, r_attn, r_feats, nn_count: int = DEFAULT_NN):
    """Differentiable batch version for full sets of equal size, (B, K, .) inputs.

    Neighbour indices are chosen without gradient; the gathered values carry it.
    Returns feats (B, 2K, nn, 7).
    """
    sim = torch.matmul(q_feats, r_feats.transpose(-1, -2)).clamp(-1.0, 1.0)
    out = []
    for s, own_xy, own_a, oth_xy, oth_a in (
        (sim, q_xy, q_attn, r_xy, r_attn),
        (sim.transpose(-1, -2), r_xy, r_attn, q_xy, q_attn),
    ):
        b, k, m = s.shape
        have = min(nn_count, m)
        idx = topk_rows(s.detach().reshape(b * k, m).numpy(), have).reshape(b, k, have)
        idx = torch.from_numpy(idx[..., np.arange(nn_count) % have])
        own = torch.cat([own_xy, own_a[..., None]], dim=-1)
        other = torch.cat([oth_xy, oth_a[..., None]], dim=-1)
        gathered = torch.gather(other[:, None].expand(b, k, m, 3), 2, idx[..., None].expand(b, k, nn_count, 3))
        svals = torch.gather(s, 2, idx)
        out.append(torch.cat([own[:, :, None].expand(b, k, nn_count, 3), gathered, svals[..., None]], dim=-1))
    return torch.cat(out, dim=1)


def stack_pairs(tensors: Sequence[PairFeatureTensor], nn_count: int | None = None):
    """Stack into (B, R, nn, 7) with each pair's rows packed first and padding last.

    Packing keeps every row at the same Block-2 position it has unpadded.
    """
    nn_count = nn_count or tensors[0].feats.shape[1]
    r = max(t.rows for t in tensors)
    b = len(tensors)
    feats = np.zeros((b, r, nn_count, PAIR_DIMS), dtype=np.float32)
    row_mask = np.zeros((b, r), dtype=bool)
    slot_mask = np.zeros((b, r, nn_count), dtype=bool)
    slot_mask[..., 0] = True  # padded rows still need one attendable slot
    for i, t in enumerate(tensors):
        feats[i, : t.rows] = t.feats[:, :nn_count]
        row_mask[i, : t.rows] = t.row_mask
        slot_mask[i, : t.rows] = t.slot_mask[:, :nn_count]
    return torch.from_numpy(feats), torch.from_numpy(row_mask), torch.from_numpy(slot_mask)


class RerankFormer(nn.Module):
    def __init__(self, dim: int = 32, heads: int = 4, depth1: int = 2, depth2: int = 6,
                 mlp_ratio: int = 4, nn_count: int = DEFAULT_NN):
        super().__init__()
        self.dim, self.heads, self.nn_count = dim, heads, nn_count
        self.depth1, self.depth2, self.mlp_ratio = depth1, depth2, mlp_ratio
        self.proj = nn.Linear(PAIR_DIMS, dim)
        self.cls1 = nn.Parameter(torch.zeros(1, dim))
        self.cls2 = nn.Parameter(torch.zeros(1, dim))
        self.block1 = nn.ModuleList(TransformerLayer(dim, heads, mlp_ratio) for _ in range(depth1))
        self.block2 = nn.ModuleList(TransformerLayer(dim, heads, mlp_ratio) for _ in range(depth2))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, 2)
        init_transformer_weights(self)
        # fan-in scaled input projection keeps pair tokens on the same scale as the
        # unit-amplitude sinusoidal positions instead of being drowned by them
        self.proj.reset_parameters()
        nn.init.trunc_normal_(self.cls1, std=0.02)
        nn.init.trunc_normal_(self.cls2, std=0.02)
        self._pe_cache: dict[int, torch.Tensor] = {}

    def config(self) -> dict:
        return {"dim": self.dim, "heads": self.heads, "depth1": self.depth1, "depth2": self.depth2,
                "mlp_ratio": self.mlp_ratio, "nn_count": self.nn_count}

    def _pe(self, n: int, like: torch.Tensor) -> torch.Tensor:
        if n not in self._pe_cache:
            self._pe_cache[n] = sinusoidal_table(n, self.dim)
        return self._pe_cache[n].to(like.dtype)

    def _head(self, x):
        # explicit per-row reduction: a (B, d) @ (d, 2) GEMM takes a different
        # BLAS path for B == 1, which would break batched == sequential equality
        return (x[:, None, :] * self.head.weight).sum(-1) + self.head.bias

    def forward(self, feats, row_mask, slot_mask, flags: AblationFlags = AblationFlags(), return_attn=False):
        """feats (B, R, nn, 7) -> logits (B, 2); with ``return_attn`` also the
        last Block-2 head-averaged attention (B, R+1, R+1)."""
        if not bool(row_mask.any(dim=1).all()):
            raise ValueError("every pair tensor needs at least one valid row")
        nn_count = min(flags.nn, feats.shape[2])
        feats, slot_mask = feats[:, :, :nn_count], slot_mask[:, :, :nn_count]
        keep = torch.ones(PAIR_DIMS, dtype=feats.dtype)
        if flags.zero_xy:
            keep[[0, 1, 3, 4]] = 0
        if flags.zero_attention:
            keep[[2, 5]] = 0
        if flags.zero_correlation:
            keep[6] = 0
        if flags.zero_xy or flags.zero_attention or flags.zero_correlation:
            feats = feats * keep
        x = self.proj(feats)  # (B, R, nn, d)
        b, r = x.shape[0], x.shape[1]
        if flags.use_block1:
            cls = self.cls1.expand(b, r, 1, self.dim)
            x = torch.cat([cls, x], dim=2)
            if flags.use_pe:
                x = x + self._pe(nn_count + 1, x)
            mask1 = torch.cat([torch.ones(b, r, 1, dtype=torch.bool), slot_mask], dim=2)
            for layer in self.block1:
                x = layer(x, key_mask=mask1)
            rows = x[:, :, 0]
        else:
            w = slot_mask.to(x.dtype)[..., None]
            rows = (x * w).sum(2) / w.sum(2)
        attn = None
        if flags.use_block2:
            y = torch.cat([self.cls2.expand(b, 1, self.dim), rows], dim=1)
            if flags.use_pe:
                y = y + self._pe(r + 1, y)
            mask2 = torch.cat([torch.ones(b, 1, dtype=torch.bool), row_mask], dim=1)
            for i, layer in enumerate(self.block2):
                if return_attn and i == len(self.block2) - 1:
                    y, attn = layer(y, key_mask=mask2, return_attn=True)
                else:
                    y = layer(y, key_mask=mask2)
            pooled = y[:, 0]
        else:
            w = row_mask.to(rows.dtype)[..., None]
            pooled = (rows * w).sum(1) / w.sum(1)
        logits = self._head(self.norm(pooled))
        if return_attn:
            return logits, attn
        return logits


def prob_true(logits) -> np.ndarray:
    logits = torch.as_tensor(logits)
    return torch.softmax(logits.double(), dim=-1)[..., 1].numpy()


@torch.no_grad()
def score_pairs(tensors: Sequence[PairFeatureTensor], model: RerankFormer,
                flags: AblationFlags = AblationFlags(), batch_size: int = 256) -> list[MatchScore]:
    """Score pair tensors; tensors of equal shape share a forward pass.

    Grouping by shape means no pair is ever padded, so a tensor's score does
    not depend on what else is in the batch (batched equals one-at-a-time
    bit for bit).
    """
    was = model.training
    model.eval()
    groups: dict[tuple[int, int], list[int]] = {}
    for i, t in enumerate(tensors):
        groups.setdefault((t.n_query_rows, t.rows), []).append(i)
    out: list[MatchScore | None] = [None] * len(tensors)
    for idx in groups.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            logits = model(*stack_pairs([tensors[i] for i in chunk]), flags=flags).double().numpy()
            for i, row in zip(chunk, logits):
                out[i] = MatchScore(row, float(prob_true(row)))
    model.train(was)
    return out


def score_pair(t: PairFeatureTensor, model: RerankFormer, flags: AblationFlags = AblationFlags()) -> MatchScore:
    return score_pairs([t], model, flags)[0]


Scorer = Callable[[Sequence[PairFeatureTensor]], Sequence[float]]


def rerank(query: PlaceRecord, candidates: Sequence[Candidate], store: FeatureStore,
           model: RerankFormer | None = None, flags: AblationFlags = AblationFlags(),
           scorer: Scorer | None = None) -> list[Candidate]:
    """Reorder by descending prob_true, all candidates scored in one batch.

    The sort is stable, so equal scores keep retrieval order. Candidates
    without local descriptors keep their retrieval score and go last.
    """
    if query.locals is None or len(query.locals) == 0:
        return [replace(c) for c in candidates]
    scored, unscored, tensors = [], [], []
    for c in candidates:
        rec = store[c.id]
        if rec.locals is None or len(rec.locals) == 0:
            unscored.append(replace(c))
        else:
            scored.append(c)
            tensors.append(build_pair_features(query.locals, rec.locals, flags.nn))
    if scorer is not None:
        probs = list(scorer(tensors)) if tensors else []
    elif tensors:
        if model is None:
            raise ValueError("need a model or a scorer")
        probs = [s.prob_true for s in score_pairs(tensors, model, flags, batch_size=len(tensors))]
    else:
        probs = []
    ranked = [Candidate(c.id, c.score, float(p)) for c, p in zip(scored, probs)]
    ranked.sort(key=lambda c: -c.prob_true)
    return ranked + unscored


@dataclass
class AttentionPair:
    row: int
    xy: tuple[float, float]
    xy_match: tuple[float, float]
    similarity: float
    weight: float
    query_side: bool


@torch.no_grad()
def top_attention_pairs(t: PairFeatureTensor, model: RerankFormer, m: int = 20,
                        flags: AblationFlags = AblationFlags()) -> list[AttentionPair]:
    """Rows most attended by the Block-2 class token in the last layer, with
    each row's rank-1 neighbour."""
    if not flags.use_block2:
        raise ValueError("attention readout needs Block-2")
    was = model.training
    model.eval()
    _, attn = model(*stack_pairs([t]), flags=flags, return_attn=True)
    model.train(was)
    weights = attn[0, 0, 1:].double().numpy()
    valid = np.flatnonzero(t.row_mask)
    order = valid[topk_rows(weights[valid][None, :], min(m, len(valid)))[0]]
    out = []
    for row in order:
        f = t.feats[row, 0]
        out.append(AttentionPair(int(row), (float(f[0]), float(f[1])), (float(f[3]), float(f[4])),
                                 float(f[6]), float(weights[row]), bool(row < t.n_query_rows)))
    return out
