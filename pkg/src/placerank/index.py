"""Feature store, exhaustive cosine kNN and recall@k."""

from __future__ import annotations

import io
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kernels import topk_rows
from .selection import DescriptorFormatError, LocalDescriptorSet, quantize, read_block

log = logging.getLogger(__name__)

STORE_MAGIC = b"R2FS"
STORE_VERSION = 1
SPLITS = ("query", "reference")
GLOBAL_DIM = 256
DEFAULT_TOPK = 100
CORRECT_RADIUS_M = 25.0


class StoreError(ValueError):
    pass


class StoreFormatError(StoreError):
    pass


@dataclass
class PlaceRecord:
    id: str
    geo: tuple[float, float]  # (east, north) meters
    split: str
    global_desc: np.ndarray
    locals: LocalDescriptorSet | None = None

    def __post_init__(self):
        self.geo = (float(self.geo[0]), float(self.geo[1]))
        self.global_desc = np.asarray(self.global_desc, dtype=np.float32)
        if self.split not in SPLITS:
            raise StoreError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not np.all(np.isfinite(self.geo)):
            raise StoreError(f"record {self.id!r}: non-finite geo {self.geo}")


@dataclass
class Candidate:
    id: str
    score: float
    prob_true: float | None = None


class FeatureStore:
    """In-memory place store with a cached, id-sorted global matrix.

    Ties on cosine score break on lexicographic id because the search matrix
    is kept in id order.
    """

    def __init__(self, local_dtype: str = "f32"):
        self.local_dtype = local_dtype
        self._records: dict[str, PlaceRecord] = {}
        self._lock = threading.RLock()
        self._cache: dict[str, tuple[list[str], np.ndarray]] = {}

    def __len__(self):
        return len(self._records)

    def __contains__(self, rid):
        return rid in self._records

    def __getitem__(self, rid) -> PlaceRecord:
        return self._records[rid]

    def __iter__(self):
        return iter(self._records.values())

    def ids(self, split: str | None = None) -> list[str]:
        return [r.id for r in self._records.values() if split is None or r.split == split]

    def add(self, record: PlaceRecord) -> None:
        norm = float(np.linalg.norm(record.global_desc))
        if record.global_desc.shape != (GLOBAL_DIM,):
            raise StoreError(f"record {record.id!r}: global must be {GLOBAL_DIM}-d")
        if abs(norm - 1.0) > 1e-3:
            raise StoreError(f"record {record.id!r}: global descriptor not unit-norm (|g|={norm:.4f})")
        with self._lock:
            if record.id in self._records:
                raise StoreError(f"duplicate id {record.id!r}")
            self._records[record.id] = record
            self._cache.clear()

    def _matrix(self, split: str | None):
        key = split or "*"
        with self._lock:
            if key not in self._cache:
                ids = sorted(self.ids(split))
                mat = (
                    np.stack([self._records[i].global_desc for i in ids])
                    if ids
                    else np.zeros((0, GLOBAL_DIM), np.float32)
                )
                self._cache[key] = (ids, np.ascontiguousarray(mat, dtype=np.float32))
            return self._cache[key]

    def knn(self, query_global, k: int = DEFAULT_TOPK, split: str | None = "reference") -> list[Candidate]:
        return self.knn_batch(np.asarray(query_global)[None, :], k, split)[0]

    def knn_batch(self, queries, k: int = DEFAULT_TOPK, split: str | None = "reference") -> list[list[Candidate]]:
        """Exhaustive cosine search; candidates by descending score."""
        if k <= 0:
            raise StoreError(f"k must be positive, got {k}")
        ids, mat = self._matrix(split)
        if not ids:
            raise StoreError("empty store")
        q = np.ascontiguousarray(queries, dtype=np.float32)
        scores = q @ mat.T
        top = topk_rows(scores, min(k, len(ids)))
        return [
            [Candidate(ids[j], float(scores[r, j])) for j in row] for r, row in enumerate(top)
        ]

    # -- persistence ---------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(STORE_MAGIC)
        buf.write(struct.pack("<HQ", STORE_VERSION, len(self._records)))
        for rec in self._records.values():
            buf.write(encode_record(rec, self.local_dtype))
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "FeatureStore":
        if len(data) < 14:
            raise StoreFormatError(f"{source}: truncated header at byte offset {len(data)}")
        if data[:4] != STORE_MAGIC:
            raise StoreFormatError(f"{source}: bad magic {data[:4]!r}, not a feature store")
        version, count = struct.unpack_from("<HQ", data, 4)
        if version != STORE_VERSION:
            raise StoreFormatError(f"{source}: unsupported store version {version}")
        store = cls()
        pos = 14
        dtypes = set()
        for i in range(count):
            try:
                rec, pos, dt = decode_record(data, pos)
            except (DescriptorFormatError, struct.error) as exc:
                raise StoreFormatError(f"{source}: record {i}: {exc}") from exc
            dtypes.add(dt)
            store.add(rec)
        if pos != len(data):
            raise StoreFormatError(f"{source}: {len(data) - pos} trailing bytes at offset {pos}")
        if dtypes == {"f16"}:
            store.local_dtype = "f16"
        return store

    @classmethod
    def load(cls, path) -> "FeatureStore":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


_SPLIT_CODE = {"query": 0, "reference": 1}
_EMPTY_LOCALS = LocalDescriptorSet(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 128)))


def encode_record(rec: PlaceRecord, local_dtype: str = "f32") -> bytes:
    """id length u16 + UTF-8 id, geo 2 x f64, split u8, global 256 x f32, local block."""
    raw = rec.id.encode("utf-8")
    out = [
        struct.pack("<H", len(raw)),
        raw,
        struct.pack("<2dB", rec.geo[0], rec.geo[1], _SPLIT_CODE[rec.split]),
        np.asarray(rec.global_desc, dtype="<f4").tobytes(),
        quantize(rec.locals if rec.locals is not None else _EMPTY_LOCALS, local_dtype),
    ]
    return b"".join(out)


def decode_record(data: bytes, pos: int) -> tuple[PlaceRecord, int, str]:
    def need(n):
        if pos + n > len(data):
            raise StoreFormatError(f"truncated record at byte offset {pos} (need {n} bytes, have {len(data) - pos})")

    need(2)
    (nlen,) = struct.unpack_from("<H", data, pos)
    pos += 2
    need(nlen + 17 + 4 * GLOBAL_DIM)
    rid = data[pos : pos + nlen].decode("utf-8")
    pos += nlen
    east, north, code = struct.unpack_from("<2dB", data, pos)
    pos += 17
    if code not in (0, 1):
        raise StoreFormatError(f"bad split code {code} at byte offset {pos - 1}")
    g = np.frombuffer(data, dtype="<f4", count=GLOBAL_DIM, offset=pos).astype(np.float32)
    pos += 4 * GLOBAL_DIM
    dt = "f16" if pos + 4 < len(data) and data[pos + 4] == 1 else "f32"
    locals_, pos = read_block(data, pos)
    rec = PlaceRecord(rid, (east, north), SPLITS[code], g, locals_ if len(locals_) else None)
    return rec, pos, dt


# -- evaluation ------------------------------------------------------------


@dataclass
class RecallReport:
    recalls: dict[int, float]
    n_evaluated: int
    n_excluded: int
    excluded: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            **{f"recall@{k}": v for k, v in self.recalls.items()},
            "n_evaluated": self.n_evaluated,
            "n_excluded": self.n_excluded,
        }


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def recall_at_k(
    results: Mapping[str, Sequence],
    query_geo: Mapping[str, tuple[float, float]],
    reference_geo: Mapping[str, tuple[float, float]],
    ks: Iterable[int] = (1, 5, 10),
    radius: float = CORRECT_RADIUS_M,
) -> RecallReport:
    """Fraction of queries with a reference within ``radius`` among their top-k.

    ``results`` maps query id to an ordered list of candidate ids (or
    Candidate objects). Queries with no reference within ``radius`` anywhere
    are left out of the denominator and counted; a missing or empty result
    list is a miss.
    """
    ks = sorted(set(int(k) for k in ks))
    ref_ids = list(reference_geo)
    ref_xy = np.array([reference_geo[r] for r in ref_ids], dtype=np.float64).reshape(-1, 2)
    hits = {k: 0 for k in ks}
    excluded = []
    evaluated = 0
    for qid, qxy in query_geo.items():
        if not len(ref_xy) or np.min(np.hypot(*(ref_xy - np.asarray(qxy)).T)) > radius:
            excluded.append(qid)
            continue
        evaluated += 1
        cands = [c.id if isinstance(c, Candidate) else c for c in results.get(qid, [])]
        first = None
        for rank, cid in enumerate(cands):
            if _dist(reference_geo[cid], qxy) <= radius:
                first = rank
                break
        for k in ks:
            if first is not None and first < k:
                hits[k] += 1
    if excluded:
        log.warning("%d queries have no reference within %.1f m and are excluded", len(excluded), radius)
    recalls = {k: (hits[k] / evaluated if evaluated else 0.0) for k in ks}
    return RecallReport(recalls, evaluated, len(excluded), excluded)
