"""Command-line entry points.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bench import MIN_REPEATS, bench
from .encoder import CheckpointFormatError, encode
from .index import DEFAULT_TOPK, FeatureStore, PlaceRecord, StoreError
from .rerank import AblationFlags, build_pair_features, rerank, top_attention_pairs
from .selection import select_top_k
from .synthetic import IngestError, WorldSpec, generate, ingest, load_dataset, read_ppm, save_dataset, write_ppm
from .training import Models, TrainConfig, TrainingDiverged, build_store, evaluate_store, train

log = logging.getLogger("placerank")

# short config keys accepted next to the full TrainConfig field names
CONFIG_ALIASES = {"K": "top_k_tokens", "k": "top_k_tokens", "topk": "eval_topk"}


class CommandError(RuntimeError):
    """A runtime failure reported as one line on stderr with exit code 1."""


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


def load_train_config(path, **overrides) -> TrainConfig:
    raw = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    data = {}
    for key, val in raw.items():
        data[CONFIG_ALIASES.get(key, key)] = val
    if "encoder" in data and not isinstance(data["encoder"], dict):
        raise ValueError("[encoder] must be a table")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def _flags(args, models: Models | None = None) -> AblationFlags:
    nn_count = args.nn
    if nn_count is None and models is not None and models.reranker is not None:
        nn_count = models.reranker.nn_count
    return AblationFlags.from_names(args.ablation or [], nn=nn_count or 5)


def _load_store(path) -> FeatureStore:
    store = FeatureStore.load(path)
    if len(store) == 0:
        raise CommandError(f"{path}: empty store")
    return store


def _store_k(store: FeatureStore) -> int:
    return max((len(r.locals) for r in store if r.locals is not None), default=0)


def _resolve_query(spec: str, store: FeatureStore, models: Models | None) -> PlaceRecord:
    """A store id, or a path to a PPM image encoded with the checkpoint's encoder."""
    if spec in store:
        return store[spec]
    path = Path(spec)
    if not path.exists():
        raise CommandError(f"query {spec!r} is neither a store id nor an image file")
    if models is None:
        raise CommandError("querying by image needs --params")
    e = encode(read_ppm(path), models.encoder)
    k = _store_k(store) or 1
    # an external image has no known position; geo is a placeholder and never read
    return PlaceRecord(path.stem, (0.0, 0.0), "query", e.global_desc, select_top_k(e, k))


# -- subcommands -----------------------------------------------------------


def cmd_generate(args) -> dict:
    spec = WorldSpec(seed=args.seed, n_places=args.places, views_per_place=args.views,
                     image_size=args.image_size)
    views = generate(spec)
    save_dataset(views, args.out)
    return {"views": len(views), "places": spec.n_places, "seed": args.seed, "out": str(args.out)}


def cmd_train(args) -> dict:
    cfg = load_train_config(args.config, stage=args.stage, seed=args.seed, epochs=args.epochs)
    views = load_dataset(args.data)
    if not views:
        raise CommandError(f"{args.data}: no views")
    init = Models.load(args.init) if args.init else None
    metrics = args.metrics or str(Path(args.out).with_suffix(".metrics.jsonl"))
    try:
        models, history = train(cfg, views, args.out, init=init, metrics_path=metrics, progress=args.verbose)
    except TrainingDiverged as exc:
        raise CommandError(str(exc)) from exc
    models.save(args.out, stage=cfg.stage, seed=cfg.seed, train_config=cfg.as_dict())
    best = max(history, key=lambda e: (e["recall@5"], e["recall@1"]))
    return {"out": str(args.out), "metrics": metrics, "epochs": len(history), "best": best,
            "seed": cfg.seed, "config_hash": config_hash(cfg.as_dict())}


def cmd_build_index(args) -> dict:
    if args.features:
        store = ingest(args.features)
        if args.half:
            store.local_dtype = "f16"
    else:
        if not args.params:
            raise CommandError("--data needs --params")
        models = Models.load(args.params)
        views = load_dataset(args.data)
        k = args.k or models.meta.get("train_config", {}).get("top_k_tokens", 500)
        store = build_store(models.encoder, views, k, "f16" if args.half else "f32")
    store.save(args.out)
    return {"out": str(args.out), "records": len(store), "local_dtype": store.local_dtype,
            "references": len(store.ids("reference")), "queries": len(store.ids("query"))}


def cmd_query(args) -> dict:
    store = _load_store(args.store)
    models = Models.load(args.params) if args.params else None
    q = _resolve_query(args.query, store, models)
    cands = store.knn(q.global_desc, args.topk)
    return {"query": q.id, "candidates": [{"id": c.id, "score": c.score} for c in cands]}


def cmd_evaluate(args) -> dict:
    store = _load_store(args.store)
    models = Models.load(args.params)
    flags = _flags(args, models)
    res = evaluate_store(store, models.reranker, args.topk, flags)
    cfg = {"topk": args.topk, "flags": flags.__dict__, "checkpoint": models.meta.get("train_config"),
           "store": str(args.store)}
    out = {
        "pre_rerank": res["retrieval"],
        "post_rerank": res.get("rerank"),
        "seed": models.meta.get("seed", args.seed),
        "config_hash": config_hash(cfg),
        "config": cfg,
    }
    if args.results:
        _write_json(args.results, res["results"])
        out["results_file"] = str(args.results)
    return out


def cmd_rerank(args) -> dict:
    store = _load_store(args.store)
    models = Models.load(args.params)
    if models.reranker is None:
        raise CommandError(f"{args.params}: checkpoint has no reranker")
    flags = _flags(args, models)
    q = _resolve_query(args.query, store, models)
    pre = store.knn(q.global_desc, args.topk)
    post = rerank(q, pre, store, models.reranker, flags)
    out = {
        "query": q.id,
        "pre_rerank": [{"id": c.id, "score": c.score} for c in pre],
        "post_rerank": [{"id": c.id, "score": c.score, "prob_true": c.prob_true} for c in post],
    }
    if args.pairs and post and post[0].prob_true is not None:
        best = store[post[0].id]
        t = build_pair_features(q.locals, best.locals, flags.nn)
        out["top_pairs"] = {"reference": best.id, "pairs": [p.__dict__ for p in
                                                             top_attention_pairs(t, models.reranker, args.pairs, flags)]}
    return out


def cmd_bench(args) -> dict:
    store = _load_store(args.store)
    models = Models.load(args.params) if args.params else None
    rep = bench(store, models.encoder if models else None, models.reranker if models else None,
                args.topk, args.repeats, flags=_flags(args, models))
    return rep.as_dict()


def overlay(query_img: np.ndarray, ref_img: np.ndarray, pairs, scale: int = 4) -> np.ndarray:
    """Side-by-side images, upscaled, with a line per attended pair (brightest = strongest)."""
    q = np.repeat(np.repeat(query_img, scale, 0), scale, 1)
    r = np.repeat(np.repeat(ref_img, scale, 0), scale, 1)
    h = max(q.shape[0], r.shape[0])
    canvas = np.zeros((h, q.shape[1] + r.shape[1], 3), np.uint8)
    canvas[: q.shape[0], : q.shape[1]] = q // 2
    canvas[: r.shape[0], q.shape[1]:] = r // 2
    top = max((p.weight for p in pairs), default=1.0) or 1.0
    for p in pairs:
        (qx, qy), (rx, ry) = (p.xy, p.xy_match) if p.query_side else (p.xy_match, p.xy)
        a = np.array([qx * q.shape[1], qy * q.shape[0]])
        b = np.array([q.shape[1] + rx * r.shape[1], ry * r.shape[0]])
        level = int(80 + 175 * p.weight / top)
        steps = int(np.abs(b - a).max()) + 1
        for t in np.linspace(0, 1, steps):
            x, y = np.rint(a + t * (b - a)).astype(int)
            if 0 <= y < h and 0 <= x < canvas.shape[1]:
                canvas[y, x] = (level, level, 0)
    return canvas


def cmd_visualize_attention(args) -> dict:
    store = _load_store(args.store)
    models = Models.load(args.params)
    if models.reranker is None:
        raise CommandError(f"{args.params}: checkpoint has no reranker")
    flags = _flags(args, models)
    q = _resolve_query(args.query, store, models)
    ref_id = args.reference
    if ref_id is None:
        ranked = rerank(q, store.knn(q.global_desc, args.topk), store, models.reranker, flags)
        ref_id = ranked[0].id
    if ref_id not in store:
        raise CommandError(f"reference {ref_id!r} not in store")
    t = build_pair_features(q.locals, store[ref_id].locals, flags.nn)
    pairs = top_attention_pairs(t, models.reranker, args.m, flags)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {"query": q.id, "reference": ref_id, "pairs": [p.__dict__ for p in pairs]}
    if args.data:
        images = {v.id: v.image for v in load_dataset(args.data)}
        q_img = images.get(q.id) if q.id in images else read_ppm(args.query)
        write_ppm(out.with_suffix(".ppm"), overlay(q_img, images[ref_id], pairs))
        report["overlay"] = str(out.with_suffix(".ppm"))
    _write_json(out.with_suffix(".json"), report)
    return {"query": q.id, "reference": ref_id, "pairs": len(pairs), "json": str(out.with_suffix(".json")),
            "overlay": report.get("overlay")}


# -- parser ----------------------------------------------------------------


def _reranker_opts(p):
    p.add_argument("--nn", type=int, default=None, help="neighbours per row (default: from checkpoint)")
    p.add_argument("--ablation", action="append", choices=["no_pe", "no_attention", "no_xy", "no_correlation",
                                                           "no_block1", "no_block2", "top1"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="placerank", description="Place recognition with correlation reranking.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None, help="cap on torch worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset (PPM images + manifest.csv)")
    p.add_argument("--out", required=True)
    p.add_argument("--places", type=int, default=200)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=["retrieval", "rerank", "finetune", "end2end"])
    p.add_argument("--config", default=None, help="TOML file of TrainConfig fields, [encoder] table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="checkpoint from the previous stage")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--metrics", default=None, help="JSONL metrics log (default: next to --out)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("build-index", help="build a feature store")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", help="directory of exported .feat files plus manifest.csv")
    src.add_argument("--data", help="dataset directory, encoded with --params")
    p.add_argument("--params", default=None)
    p.add_argument("--k", type=int, default=None, help="local tokens kept per image")
    p.add_argument("--out", required=True)
    p.add_argument("--half", action="store_true", help="store locals as float16")
    p.set_defaults(fn=cmd_build_index)

    p = sub.add_parser("query", help="global nearest references for one query")
    p.add_argument("--store", required=True)
    p.add_argument("--query", required=True, help="store id or PPM image")
    p.add_argument("--params", default=None)
    p.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("evaluate", help="recall@{1,5,10} before and after reranking")
    p.add_argument("--store", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    p.add_argument("--results", default=None, help="also write per-query orderings here")
    p.add_argument("--out", default=None)
    _reranker_opts(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("rerank", help="retrieve and rerank one query")
    p.add_argument("--store", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--query", required=True, help="store id or PPM image")
    p.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    p.add_argument("--pairs", type=int, default=0, help="dump this many top-attention pairs for the best match")
    p.add_argument("--out", default=None)
    _reranker_opts(p)
    p.set_defaults(fn=cmd_rerank)

    p = sub.add_parser("bench", help="latency, bytes and FLOPs")
    p.add_argument("--store", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    p.add_argument("--repeats", type=int, default=MIN_REPEATS)
    p.add_argument("--out", default=None)
    _reranker_opts(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("visualize-attention", help="PPM overlay and JSON of the most attended pairs")
    p.add_argument("--store", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--reference", default=None, help="default: top reranked candidate")
    p.add_argument("--data", default=None, help="dataset directory holding the images (for the PPM)")
    p.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--out", required=True, help="output prefix; writes .json and .ppm")
    _reranker_opts(p)
    p.set_defaults(fn=cmd_visualize_attention)
    return parser


JSON_OUT_COMMANDS = ("query", "evaluate", "rerank", "bench")
RUNTIME_ERRORS = (CommandError, StoreError, CheckpointFormatError, IngestError, ValueError, KeyError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    try:
        result = args.fn(args)
    except IngestError as exc:
        print("error: feature ingest failed:", file=sys.stderr)
        for line in exc.problems:
            print(f"  - {line}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    # commands whose --out names an artifact report on stdout; the rest write the report to --out
    target = getattr(args, "out", None) if args.command in JSON_OUT_COMMANDS else None
    _write_json(target, result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
