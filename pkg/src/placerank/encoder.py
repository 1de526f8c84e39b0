"""Toy-scale ViT backbone: one global descriptor, per-patch local descriptors
and the class-token attention map per image."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .tensor_core import ShapeError, TransformerLayer, init_transformer_weights


PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class EncoderConfig:
    image_h: int = 64
    image_w: int = 64
    patch: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    channels: int = 3
    global_dim: int = 256
    local_dim: int = 128

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ShapeError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}; resize first"
            )
        if self.depth < 2:
            raise ValueError("need at least 2 layers (locals come from the penultimate one)")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class EncodedImage:
    global_desc: np.ndarray  # (global_dim,)
    locals: np.ndarray  # (n, local_dim)
    attn_map: np.ndarray  # (grid_h, grid_w)
    coords: np.ndarray  # (n, 2) integer (col, row)
    cls_self_attn: float = 0.0


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, h, w, c) or (h, w, c) -> (B, n, p*p*c), patches in row-major grid order."""
    if images.dim() == 3:
        images = images[None]
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def interpolate_pos_embed(pe: torch.Tensor, old_grid, new_grid) -> torch.Tensor:
    """Bilinearly resample the patch rows of a (1 + gh*gw, d) table; row 0 is copied."""
    old_grid = tuple(int(v) for v in old_grid)
    new_grid = tuple(int(v) for v in new_grid)
    if min(old_grid + new_grid) < 1:
        raise ShapeError("grid extents must be positive")
    if pe.shape[0] != 1 + old_grid[0] * old_grid[1]:
        raise ShapeError(f"table has {pe.shape[0]} rows, expected 1 + {old_grid[0]}*{old_grid[1]}")
    if old_grid == new_grid:
        return pe.clone()
    cls_row, rows = pe[:1], pe[1:]
    d = pe.shape[1]
    grid = rows.reshape(1, old_grid[0], old_grid[1], d).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=new_grid, mode="bilinear", align_corners=False)
    rows = grid.permute(0, 2, 3, 1).reshape(new_grid[0] * new_grid[1], d)
    return torch.cat([cls_row, rows], dim=0)


def grid_coords(grid_h: int, grid_w: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return np.stack([cols, rows], axis=1)


class ViTEncoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        self.patch_embed = nn.Linear(config.patch * config.patch * config.channels, config.dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.n_tokens + 1, config.dim))
        self.layers = nn.ModuleList(
            TransformerLayer(config.dim, config.heads) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.dim)
        self.global_head = nn.Linear(config.dim, config.global_dim)
        self.local_head = nn.Linear(config.dim, config.local_dim)
        init_transformer_weights(self)
        self.patch_embed.reset_parameters()
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Patch tokens plus class token plus positional embedding, (B, n+1, d)."""
        cfg = self.config
        b, h, w = images.shape[0], images.shape[1], images.shape[2]
        if h % cfg.patch or w % cfg.patch:
            raise ShapeError(f"image {h}x{w} not divisible by patch {cfg.patch}; resize first")
        grid = (h // cfg.patch, w // cfg.patch)
        pe = self.pos_embed[0]
        if grid != cfg.grid:
            pe = interpolate_pos_embed(pe, cfg.grid, grid)
        tokens = self.patch_embed(patchify((images - PIXEL_MEAN) / PIXEL_STD, cfg.patch))
        cls = self.cls_token.expand(b, -1, -1)
        return torch.cat([cls, tokens], dim=1) + pe

    def trunk(self, images: torch.Tensor):
        """Backbone without the local head.

        Returns (global (B, G), penultimate patch tokens (B, n, d),
        class-row attention over patches (B, n), class self-attention (B,)).
        """
        x = self.embed(images)
        penultimate = None
        attn = None
        for i, layer in enumerate(self.layers):
            if i == len(self.layers) - 1:
                penultimate = x
                x, attn = layer(x, return_attn=True)
            else:
                x = layer(x)
        g = F.normalize(self.global_head(self.norm(x[:, 0])), dim=-1)
        cls_row = attn[:, 0]
        return g, penultimate[:, 1:], cls_row[:, 1:], cls_row[:, 0]

    def local_features(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.local_head(patch_tokens), dim=-1)

    def forward(self, images: torch.Tensor):
        """images: (B, h, w, c) floats in [0, 1].

        Returns (global (B, G), locals (B, n, Dl), attn (B, n), cls_self (B,)).
        """
        g, tokens, attn, cls_self = self.trunk(images)
        return g, self.local_features(tokens), attn, cls_self


def images_to_tensor(images) -> torch.Tensor:
    """uint8 (B, h, w, c) array -> float tensor in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


@torch.no_grad()
def encode_batch(model: ViTEncoder, images, batch_size: int = 64) -> list[EncodedImage]:
    was_training = model.training
    model.eval()
    out = []
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    for start in range(0, len(arr), batch_size):
        x = images_to_tensor(arr[start : start + batch_size])
        g, loc, a, cls_self = model(x)
        gh, gw = x.shape[1] // model.config.patch, x.shape[2] // model.config.patch
        coords = grid_coords(gh, gw)
        for i in range(x.shape[0]):
            out.append(
                EncodedImage(
                    global_desc=g[i].numpy().copy(),
                    locals=loc[i].numpy().copy(),
                    attn_map=a[i].numpy().reshape(gh, gw).copy(),
                    coords=coords,
                    cls_self_attn=float(cls_self[i]),
                )
            )
    model.train(was_training)
    return out


def encode(image, model: ViTEncoder) -> EncodedImage:
    return encode_batch(model, np.asarray(image)[None])[0]


# -- checkpoint file -------------------------------------------------------

CKPT_MAGIC = b"R2PK"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Little-endian: magic, u16 version, u32 meta length + JSON, u32 count,
    then per array: u16 name length, name, u8 ndim, u32 dims, f32 data."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated at byte offset {pos} (need {n} more bytes)")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a parameter checkpoint")
    (version,) = struct.unpack("<H", take(2))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - pos} trailing bytes after offset {pos}")
    return arrays, meta


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {
        k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)
    }
    module.load_state_dict(state)


def encoder_meta(config: EncoderConfig) -> dict:
    return {"encoder": asdict(config)}
