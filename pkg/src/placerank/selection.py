"""Attention-ranked top-K local descriptor selection and its byte layout."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .kernels import topk_rows

RECORD_DIMS = 3  # x, y, A ahead of the feature
DTYPES = {"f32": (0, np.dtype("<f4")), "f16": (1, np.dtype("<f2"))}
_CODES = {code: (name, dt) for name, (code, dt) in DTYPES.items()}
HEADER = struct.Struct("<IB")


class DescriptorFormatError(ValueError):
    pass


@dataclass
class LocalDescriptorSet:
    """Rows sorted by descending attention.

    xy holds normalized (x, y) in [0, 1]; attn the raw attention values;
    feats the unit-norm local features.
    """

    xy: np.ndarray
    attn: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float32).reshape(-1, 2)
        self.attn = np.asarray(self.attn, dtype=np.float32).reshape(-1)
        self.feats = np.asarray(self.feats, dtype=np.float32)
        if self.feats.ndim != 2 or not (len(self.xy) == len(self.attn) == len(self.feats)):
            raise ValueError("xy, attn and feats must describe the same number of records")

    def __len__(self):
        return len(self.attn)

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    def equals(self, other: "LocalDescriptorSet") -> bool:
        return (
            np.array_equal(self.xy, other.xy)
            and np.array_equal(self.attn, other.attn)
            and np.array_equal(self.feats, other.feats)
        )


def normalized_coords(coords, grid_h: int, grid_w: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    return np.stack([(coords[:, 0] + 0.5) / grid_w, (coords[:, 1] + 0.5) / grid_h], axis=1)


def select_top_k(encoded, k: int) -> LocalDescriptorSet:
    """Keep the min(k, n) tokens with the largest attention.

    Ties go to the lower row-major token index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    amap = np.asarray(encoded.attn_map, dtype=np.float32)
    gh, gw = amap.shape
    flat = amap.reshape(-1)
    idx = topk_rows(flat[None, :], k)[0]
    xy = normalized_coords(np.asarray(encoded.coords)[idx], gh, gw)
    return LocalDescriptorSet(xy=xy, attn=flat[idx], feats=np.asarray(encoded.locals)[idx])


def payload_bytes(count: int, dim: int = 128, dtype: str = "f32") -> int:
    """Bytes of the record payload, excluding the 5-byte header."""
    return count * (dim + RECORD_DIMS) * DTYPES[dtype][1].itemsize


def quantize(s: LocalDescriptorSet, mode: str = "f32") -> bytes:
    """count u32, dtype u8, then per record x, y, A, f[dim] in ``mode``."""
    if mode not in DTYPES:
        raise ValueError(f"unknown dtype {mode!r}; expected one of {sorted(DTYPES)}")
    code, dt = DTYPES[mode]
    rows = np.concatenate([s.xy, s.attn[:, None], s.feats], axis=1)
    return HEADER.pack(len(s), code) + rows.astype(dt).tobytes()


def dequantize(data: bytes, dim: int = 128) -> LocalDescriptorSet:
    s, end = read_block(data, 0, dim)
    if end != len(data):
        raise DescriptorFormatError(f"{len(data) - end} trailing bytes after offset {end}")
    return s


def read_block(data: bytes, offset: int = 0, dim: int = 128) -> tuple[LocalDescriptorSet, int]:
    """Parse one record block at ``offset``; returns the set and the offset after it."""
    if len(data) - offset < HEADER.size:
        raise DescriptorFormatError(f"truncated descriptor header at byte offset {offset}")
    count, code = HEADER.unpack_from(data, offset)
    if code not in _CODES:
        raise DescriptorFormatError(f"unknown dtype code {code} at byte offset {offset + 4}")
    dt = _CODES[code][1]
    start = offset + HEADER.size
    end = start + count * (dim + RECORD_DIMS) * dt.itemsize
    if end > len(data):
        raise DescriptorFormatError(
            f"descriptor payload truncated at byte offset {len(data)}: need {end - start} bytes from {start}"
        )
    rows = np.frombuffer(data, dtype=dt, count=count * (dim + RECORD_DIMS), offset=start)
    rows = rows.reshape(count, dim + RECORD_DIMS).astype(np.float32)
    return LocalDescriptorSet(xy=rows[:, :2], attn=rows[:, 2], feats=rows[:, 3:]), end
