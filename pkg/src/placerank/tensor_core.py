"""Attention and transformer building blocks plus a finite-difference gradient check.

Dense kernels and reverse-mode differentiation come from torch. Everything
here works on ``(..., N, d)`` tensors so batched and single-sequence calls
run the same code path.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import torch
from torch import nn
import torch.nn.functional as F


class ShapeError(ValueError):
    """Raised when tensor extents do not line up."""


class GradientCheckError(RuntimeError):
    pass


class AttentionOutput(NamedTuple):
    tokens: torch.Tensor
    attn: torch.Tensor  # head-averaged, rows sum to 1


def multi_head_attention(
    tokens: torch.Tensor,
    qkv_weight: torch.Tensor,
    qkv_bias: torch.Tensor | None,
    proj_weight: torch.Tensor,
    proj_bias: torch.Tensor | None,
    heads: int,
    key_mask: torch.Tensor | None = None,
) -> AttentionOutput:
    """softmax(Q Kᵀ / sqrt(d_head)) V per head, heads concatenated and projected.

    ``key_mask`` is boolean ``(..., N)``; False keys receive -inf logits.
    """
    if tokens.dim() < 2:
        raise ShapeError(f"tokens must be (..., N, d), got {tuple(tokens.shape)}")
    n, d = tokens.shape[-2], tokens.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"dim {d} not divisible by {heads} heads")
    if qkv_weight.shape != (3 * d, d):
        raise ShapeError(f"qkv weight {tuple(qkv_weight.shape)} does not match dim {d}")
    if proj_weight.shape != (d, d):
        raise ShapeError(f"output projection {tuple(proj_weight.shape)} does not match dim {d}")
    dh = d // heads
    lead = tokens.shape[:-2]
    qkv = F.linear(tokens, qkv_weight, qkv_bias)
    qkv = qkv.reshape(*lead, n, 3, heads, dh).movedim(-3, 0).transpose(-3, -2)
    q, k, v = qkv[0], qkv[1], qkv[2]  # (..., heads, N, dh)
    logits = torch.matmul(q, k.transpose(-2, -1)) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        if key_mask.shape[-1] != n:
            raise ShapeError(f"key mask length {key_mask.shape[-1]} != {n}")
        logits = logits.masked_fill(~key_mask[..., None, None, :], float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    out = torch.matmul(attn, v).transpose(-3, -2).reshape(*lead, n, d)
    out = F.linear(out, proj_weight, proj_bias)
    return AttentionOutput(out, attn.mean(dim=-3))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None):
        return multi_head_attention(
            x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias, self.heads, key_mask
        )


class TransformerLayer(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.)) with GELU."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x, key_mask=None, return_attn=False):
        if x.shape[-1] != self.attn.dim:
            raise ShapeError(f"token width {x.shape[-1]} != layer dim {self.attn.dim}")
        a = self.attn(self.norm1(x), key_mask)
        x = x + a.tokens
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        if return_attn:
            return x, a.attn
        return x


def init_transformer_weights(module: nn.Module, std: float = 0.02) -> None:
    """Truncated-normal linear weights, zero biases, unit LayerNorm."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def sinusoidal_table(positions: int, dim: int) -> torch.Tensor:
    """Standard sin/cos positional table, shape (positions, dim)."""
    pos = torch.arange(positions, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    table = torch.zeros(positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table.float()


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    samples_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Compare autograd against central differences on sampled coordinates.

    Returns max |analytic - numeric| / max(1, |numeric|). ``params`` must be
    float64 leaf tensors with ``requires_grad``; ``loss_fn`` re-reads them.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise GradientCheckError("gradient check needs float64 parameters")
        p.grad = None
    loss = loss_fn()
    if loss.numel() != 1:
        raise GradientCheckError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise GradientCheckError(f"non-finite loss {loss.item()} at the check point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            count = min(samples_per_param, flat.numel())
            idx = torch.randperm(flat.numel(), generator=gen)[:count]
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise GradientCheckError(f"non-finite loss while perturbing coordinate {i}")
                numeric = (up - down) / (2 * eps)
                analytic = 0.0 if g is None else g.view(-1)[i].item()
                worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
