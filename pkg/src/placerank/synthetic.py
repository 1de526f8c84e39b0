"""Procedural desk-scale place dataset with planar metric ground truth, plus
ingestion of externally computed features.

Places are grouped into districts that share a palette and background
gradient, so global appearance aliases within a district and only the
layout of shapes tells places apart. A view is a shifted crop of the place
canvas; the crop shift maps linearly onto the geo jitter.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .index import FeatureStore, PlaceRecord, StoreError, decode_record, encode_record

MIN_SPACING_M = 60.0


class IngestError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("feature ingestion failed:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    n_places: int = 200
    views_per_place: int = 4
    refs_per_place: int = 1
    spacing_m: float = 100.0
    extent_m: float | None = None
    image_size: int = 64
    shift_px: int = 12
    geo_jitter_m: float = 5.0
    brightness: float = 0.25
    noise_sigma: float = 6.0
    district_size: int = 8
    shapes_per_place: int = 10

    def __post_init__(self):
        if self.n_places < 1 or self.views_per_place < 2:
            raise ValueError("need at least one place and two views per place")
        if not 1 <= self.refs_per_place < self.views_per_place:
            raise ValueError("each place needs at least one reference and one query view")
        if self.spacing_m - 2 * self.spacing_jitter < MIN_SPACING_M:
            raise ValueError(f"spacing {self.spacing_m} m cannot keep places {MIN_SPACING_M} m apart")
        side = self.grid_side * self.spacing_m
        if self.extent_m is not None and self.extent_m < side:
            raise ValueError(
                f"extent {self.extent_m} m too small for {self.n_places} places at {self.spacing_m} m spacing"
            )

    @property
    def grid_side(self) -> int:
        return math.ceil(math.sqrt(self.n_places))

    @property
    def spacing_jitter(self) -> float:
        return min(10.0, max(0.0, (self.spacing_m - MIN_SPACING_M) / 2))


@dataclass
class View:
    id: str
    place: int
    image: np.ndarray  # (h, w, 3) uint8
    geo: tuple[float, float]
    split: str


def _palette(rng):
    base = rng.uniform(0, 255, size=3)
    cols = [np.clip(base + rng.normal(0, 70, size=3), 0, 255) for _ in range(4)]
    return np.array(cols)


def _draw_shape(canvas, rng, palette, yy, xx):
    size = canvas.shape[0]
    kind = rng.integers(0, 3)
    color = palette[rng.integers(0, len(palette))] + rng.normal(0, 25, size=3)
    cy, cx = rng.uniform(0, size, size=2)
    if kind == 0:
        r = rng.uniform(4, 11)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == 1:
        hh, ww = rng.uniform(4, 14, size=2)
        mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
    else:
        ang = rng.uniform(0, math.pi)
        length, width = rng.uniform(10, 22), rng.uniform(1.5, 3.5)
        dy, dx = yy - cy, xx - cx
        along = dx * math.cos(ang) + dy * math.sin(ang)
        across = -dx * math.sin(ang) + dy * math.cos(ang)
        mask = (np.abs(along) <= length) & (np.abs(across) <= width)
    canvas[mask] = np.clip(color, 0, 255)


def _district_background(rng, size):
    c0, c1 = rng.uniform(0, 255, size=(2, 3))
    ang = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = (np.cos(ang) * xx + np.sin(ang) * yy + 1.5) / 3.0
    return c0[None, None] * (1 - t[..., None]) + c1[None, None] * t[..., None]


def place_centers(spec: WorldSpec, rng) -> np.ndarray:
    side = spec.grid_side
    cells = rng.permutation(side * side)[: spec.n_places]
    rows, cols = np.divmod(cells, side)
    base = np.stack([cols, rows], axis=1).astype(np.float64) * spec.spacing_m
    return base + rng.uniform(-spec.spacing_jitter, spec.spacing_jitter, size=base.shape)


def generate(spec: WorldSpec) -> list[View]:
    """Deterministic under ``spec.seed``. View 0..refs-1 of a place are references."""
    rng = np.random.default_rng(spec.seed)
    centers = place_centers(spec, rng)
    canvas_size = spec.image_size + 2 * spec.shift_px
    yy, xx = np.mgrid[0:canvas_size, 0:canvas_size].astype(np.float64)
    n_districts = math.ceil(spec.n_places / spec.district_size)
    districts = []
    for _ in range(n_districts):
        districts.append((_district_background(rng, canvas_size), _palette(rng)))
    m_per_px = spec.geo_jitter_m / (spec.shift_px * math.sqrt(2)) if spec.shift_px else 0.0
    views = []
    for p in range(spec.n_places):
        bg, pal = districts[p % n_districts]
        canvas = bg.copy()
        for _ in range(spec.shapes_per_place):
            _draw_shape(canvas, rng, pal, yy, xx)
        for v in range(spec.views_per_place):
            dx, dy = rng.integers(-spec.shift_px, spec.shift_px + 1, size=2)
            oy, ox = spec.shift_px + dy, spec.shift_px + dx
            img = canvas[oy : oy + spec.image_size, ox : ox + spec.image_size]
            img = img * rng.uniform(1 - spec.brightness, 1 + spec.brightness)
            img = img + rng.normal(0, spec.noise_sigma, size=img.shape)
            geo = (centers[p, 0] + dx * m_per_px, centers[p, 1] - dy * m_per_px)
            split = "reference" if v < spec.refs_per_place else "query"
            views.append(View(f"p{p:04d}_v{v}", p, np.clip(np.rint(img), 0, 255).astype(np.uint8), geo, split))
    return views


# -- on-disk dataset ------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data, np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()


MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ["id", "east_m", "north_m", "split"]


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for rid, east, north, split in rows:
            w.writerow([rid, repr(float(east)), repr(float(north)), split])


def read_manifest(path) -> list[tuple[str, float, float, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ValueError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        return [(r["id"], float(r["east_m"]), float(r["north_m"]), r["split"]) for r in reader]


def save_dataset(views: list[View], out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for v in views:
        write_ppm(out / "images" / f"{v.id}.ppm", v.image)
    write_manifest(out / MANIFEST, [(v.id, v.geo[0], v.geo[1], v.split) for v in views])


def load_dataset(data_dir) -> list[View]:
    d = Path(data_dir)
    views = []
    for rid, east, north, split in read_manifest(d / MANIFEST):
        place = int(rid.split("_")[0][1:]) if rid.startswith("p") and "_" in rid else -1
        views.append(View(rid, place, read_ppm(d / "images" / f"{rid}.ppm"), (east, north), split))
    return views


# -- external features ----------------------------------------------------

FEATURE_SUFFIX = ".feat"


def export_features(store: FeatureStore, out_dir) -> None:
    """Manifest plus one ``<id>.feat`` per record in the store record layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in store:
        (out / f"{rec.id}{FEATURE_SUFFIX}").write_bytes(encode_record(rec, store.local_dtype))
        rows.append((rec.id, rec.geo[0], rec.geo[1], rec.split))
    write_manifest(out / MANIFEST, rows)


def ingest(features_dir, tol: float = 1e-3) -> FeatureStore:
    """Load externally computed features; every problem is collected and reported together."""
    d = Path(features_dir)
    problems = []
    manifest = read_manifest(d / MANIFEST)
    files = {p.name[: -len(FEATURE_SUFFIX)]: p for p in d.glob(f"*{FEATURE_SUFFIX}")}
    listed = {row[0] for row in manifest}
    for extra in sorted(set(files) - listed):
        problems.append(f"{extra}: feature file has no manifest entry")
    store = FeatureStore()
    dtypes = set()
    for rid, east, north, split in manifest:
        if rid not in files:
            problems.append(f"{rid}: listed in manifest but {rid}{FEATURE_SUFFIX} is missing")
            continue
        data = files[rid].read_bytes()
        try:
            rec, end, dt = decode_record(data, 0)
        except (ValueError, StoreError) as exc:
            problems.append(f"{rid}: unreadable feature file ({exc})")
            continue
        if end != len(data):
            problems.append(f"{rid}: {len(data) - end} trailing bytes")
        if rec.id != rid:
            problems.append(f"{rid}: file holds id {rec.id!r}")
        if (rec.geo, rec.split) != ((east, north), split):
            problems.append(f"{rid}: geo/split disagree with the manifest")
        local_tol = max(tol, 1e-2) if dt == "f16" else tol
        gnorm = float(np.linalg.norm(rec.global_desc))
        if abs(gnorm - 1) > tol:
            problems.append(f"{rid}: global descriptor norm {gnorm:.4f}; L2-normalize before export")
        if rec.locals is not None:
            norms = np.linalg.norm(rec.locals.feats, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1) > local_tol)
            if len(bad):
                problems.append(
                    f"{rid}: {len(bad)} local features not unit-norm (e.g. row {bad[0]} has norm "
                    f"{norms[bad[0]]:.4f}); L2-normalize each 128-d local feature before export"
                )
        dtypes.add(dt)
        if not problems or not problems[-1].startswith(rid):
            try:
                store.add(rec)
            except StoreError as exc:
                problems.append(f"{rid}: {exc}")
    if problems:
        raise IngestError(problems)
    if dtypes == {"f16"}:
        store.local_dtype = "f16"
    return store


def records_from_views(views, encoded, k: int) -> list[PlaceRecord]:
    from .selection import select_top_k

    return [
        PlaceRecord(v.id, v.geo, v.split, e.global_desc, select_top_k(e, k))
        for v, e in zip(views, encoded)
    ]
