"""Command-line entry point: ``histovl <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (
    SlideManifest, builtin_prompt_set, load_slide, read_jsonl, read_pgm, read_ppm, read_prompt_set,
    read_store, read_tile_sheet, resolve, write_checkpoint, write_jsonl, write_manifest, write_pgm,
    write_ppm, write_prompt_set, write_store, write_tile_sheet,
)
from .exceptions import HistoVLError, InvalidArgumentError
from .numerics.rng import SeededRng

EXIT_CODES = """exit codes:
  0   success
  2   usage error (bad or missing flags, empty input)
  3   I/O error (missing or unreadable file)
  10  other library error
  11  invalid argument
  12  shape mismatch
  13  numerical error
  14  file format error (bad magic, version, dtype or header)
  15  corrupted file (payload disagrees with header)
  16  configuration error (prompt set, checkpoint config)
  17  unknown class or name
  18  slide without tiles
  19  metric undefined on the given data
  20  training diverged
  21  internal consistency check failed"""


class UsageError(Exception):
    pass


# --- shared helpers ---------------------------------------------------------

def run_config(args) -> dict:
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        cfg[k] = str(v) if isinstance(v, Path) else v
    return cfg


def write_rows(path, rows, args, kind):
    """JSON lines led by a ``_meta`` record; the wall-clock time goes to a sidecar."""
    meta = {"_meta": {"command": args.command, "kind": kind, "config": run_config(args), "version": __version__}}
    write_jsonl(path, [meta] + list(rows))
    Path(str(path) + ".time.json").write_text(json.dumps({"created_unix": time.time()}) + "\n")


def read_meta(path) -> dict:
    rows = read_jsonl(path, skip_meta=False)
    for r in rows:
        if "_meta" in r:
            return r["_meta"]
    return {}


def load_prompts(spec: str):
    p = Path(spec)
    return read_prompt_set(p) if p.suffix == ".json" or p.exists() else builtin_prompt_set(spec)


def load_encoder(args):
    if getattr(args, "toy_encoder", False):
        from .wsi_pipeline import RandomProjectionEncoder

        return RandomProjectionEncoder(dim=args.toy_dim, image_size=32, seed=args.seed)
    if not getattr(args, "model", None):
        raise UsageError("--model is required (or --toy-encoder)")
    from .coca import CocaModel

    return CocaModel.load(args.model)


def build_bank(args, encoder, labels=None):
    from .prompting import ClassEmbeddingBank, build_ensemble_bank

    if getattr(args, "bank", None):
        bank = ClassEmbeddingBank.from_dict(json.loads(Path(args.bank).read_text()))
    else:
        if not getattr(args, "prompts", None):
            raise UsageError("--prompts or --bank is required")
        ps = load_prompts(args.prompts)
        bank = build_ensemble_bank(ps, encoder)
    return bank.subset(labels) if labels else bank


def _pool_map(fn, items, workers):
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))  # results come back in submission order


def _ks(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from exc


def _tissue_args(p):
    from .wsi_pipeline import (DEFAULT_CLOSE_KERNEL, DEFAULT_DOWNSAMPLE, DEFAULT_MEDIAN_KERNEL,
                               DEFAULT_MIN_AREA, DEFAULT_SAT_THRESHOLD)

    p.add_argument("--sat-threshold", type=int, default=DEFAULT_SAT_THRESHOLD)
    p.add_argument("--median-kernel", type=int, default=DEFAULT_MEDIAN_KERNEL)
    p.add_argument("--close-kernel", type=int, default=DEFAULT_CLOSE_KERNEL)
    p.add_argument("--min-area", type=int, default=DEFAULT_MIN_AREA, help="pixels at the mask downsample")
    p.add_argument("--downsample", type=int, default=DEFAULT_DOWNSAMPLE)


def _tissue(image, args):
    from .wsi_pipeline import downsample_raster, segment_tissue

    low = downsample_raster(image, args.downsample)
    return segment_tissue(low, args.sat_threshold, args.median_kernel, args.close_kernel, args.min_area,
                          downsample=args.downsample)


def _encoder_args(p):
    p.add_argument("--model", help="captioner checkpoint from train-coca")
    p.add_argument("--toy-encoder", action="store_true", help="seeded random-projection encoder (testing)")
    p.add_argument("--toy-dim", type=int, default=32)


# --- synth ------------------------------------------------------------------

def cmd_synth(args):
    from .synthetic import (IGNORE, classification_slide_specs, generate_synthetic_corpus,
                            segmentation_slide_specs, synthetic_prompt_set)

    out = Path(args.out)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    ps = synthetic_prompt_set(args.n_classes)
    if args.n_classes < 2 and args.seg_slides:
        raise UsageError("segmentation slides need at least 2 classes")
    labels = ps.labels
    seg_pair = ["NORM", "TUM"] if {"NORM", "TUM"} <= set(labels) else labels[:2]
    seg_idx = [labels.index(c) for c in seg_pair] if args.seg_slides else []
    rng = SeededRng(args.seed)
    specs = classification_slide_specs(args.n_classes, args.slides_per_class, rng.child(10), args.slide_size)
    if args.seg_slides:
        specs += segmentation_slide_specs(args.seg_slides, rng.child(11), args.seg_size, *seg_idx)
    corpus = generate_synthetic_corpus(specs, ps, rng, args.pairs_per_class, args.heldout_per_class)
    write_prompt_set(out / "prompts.json", ps)
    if seg_idx:
        write_prompt_set(out / "seg_prompts.json", ps.subset(seg_pair))
    for split, imgs, caps, labs in (("train", corpus.train_images, corpus.train_captions, corpus.train_labels),
                                    ("test", corpus.test_images, corpus.test_captions, corpus.test_labels)):
        if len(imgs):
            write_tile_sheet(imgs, out / f"{split}_tiles.ppm")
        write_rows(out / f"{split}_pairs.jsonl",
                   [{"index": i, "caption": c, "label": int(lb)} for i, (c, lb) in enumerate(zip(caps, labs))],
                   args, "pairs")
    rows = []
    for spec, raster, truth in corpus.slides:
        img_rel = f"slides/{spec.slide_id}.ppm"
        truth_rel = f"slides/{spec.slide_id}.truth.pgm"
        write_ppm(raster, out / img_rel)
        row = {"slide_id": spec.slide_id, "image": img_rel, "truth": truth_rel, "width": spec.width,
               "height": spec.height, "magnification": spec.magnification}
        if spec.label is None:
            t = np.full(truth.shape, IGNORE, dtype=np.uint8)
            for j, c in enumerate(seg_idx):
                t[truth == c] = j
            row.update(kind="segmentation", label=None, positive=1)
        else:
            t = truth
            row.update(kind="classification", label=int(spec.label))
        write_pgm(t, out / truth_rel)
        rows.append(row)
    write_rows(out / "slides.jsonl", rows, args, "slides")
    print(f"wrote {len(corpus.train_captions)} training pairs, {len(corpus.test_captions)} held-out pairs "
          f"and {len(rows)} slides to {out}")


# --- train-coca -------------------------------------------------------------

def cmd_train_coca(args):
    from .coca import CocaModel
    from .synthetic import caption_tokens_vocab

    data = Path(args.data)
    tiles = read_tile_sheet(data / "train_tiles.ppm")
    pairs = read_jsonl(data / "train_pairs.jsonl")
    captions = [r["caption"] for r in pairs]
    vocab_texts = caption_tokens_vocab(read_prompt_set(data / "prompts.json")) if (data / "prompts.json").exists() \
        else []
    model = CocaModel(d_model=args.d_model, n_heads=args.n_heads, epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, weight_decay=args.weight_decay, warmup_steps=args.warmup_steps,
                      caption_weight=args.caption_weight, contrastive_weight=args.contrastive_weight,
                      seed=args.seed, image_size=tiles.shape[1], embed_dim=args.d_model)
    t0 = time.time()
    model.fit(tiles, captions, vocab_texts=vocab_texts)
    model.save(args.out)
    last = model.loss_curve_[-1]
    print(f"trained {len(captions)} pairs for {len(model.loss_curve_)} epochs in {time.time() - t0:.1f}s; "
          f"final loss {last['loss']:.4f} (contrastive {last['contrastive']:.4f}, "
          f"captioning {last['captioning']:.4f}), logit scale {model.logit_scale_:.2f}")
    if args.curve:
        write_rows(args.curve, model.loss_curve_, args, "loss_curve")


# --- tissue / tiling / embedding -------------------------------------------

def cmd_segment_tissue(args):
    img = read_ppm(args.slide)
    mask = _tissue(img, args)
    write_pgm(mask.grid.astype(np.uint8) * 255, args.out)
    print(f"tissue fraction {mask.grid.mean():.4f} on a {mask.grid.shape[1]}x{mask.grid.shape[0]} grid "
          f"(downsample {mask.downsample})")


def cmd_tile(args):
    from .segmentation import overlap_tile_grid
    from .wsi_pipeline import classification_tile_grid

    img = read_ppm(args.slide)
    mask = _tissue(img, args)
    h, w = img.shape[:2]
    if args.mode == "classification":
        coords = classification_tile_grid(mask, w, h, args.tile_side or 256, args.policy)
    else:
        coords = overlap_tile_grid(mask, w, h, args.tile_side or 224, args.overlap)
    write_rows(args.out, [{"x": x, "y": y, "side": s} for x, y, s in coords], args, "tiles")
    print(f"{len(coords)} tiles")


_WORKER_ENCODER = {}


def _embed_job(job):
    from .wsi_pipeline import classification_tile_grid, embed_slide
    from .data_io import write_store

    row, args = job
    key = (getattr(args, "model", None), args.toy_encoder, args.seed)
    if key not in _WORKER_ENCODER:
        _WORKER_ENCODER.clear()
        _WORKER_ENCODER[key] = load_encoder(args)
    enc = _WORKER_ENCODER[key]
    img = read_ppm(resolve(args.slides_base, row["image"]))
    mask = _tissue(img, args)
    coords = classification_tile_grid(mask, img.shape[1], img.shape[0], args.tile_side, args.policy)
    out = Path(args.out)
    store, man = embed_slide(img, coords, enc, row["slide_id"], f"{row['slide_id']}.cemb", row.get("label"),
                             row.get("magnification", 10.0))
    write_store(out / man.store_path, store.vectors, store.ids, store.normalized, dim=store.dim or None)
    write_manifest(out / f"{row['slide_id']}.json", man)
    return {"slide_id": row["slide_id"], "manifest": f"{row['slide_id']}.json", "label": row.get("label"),
            "n_tiles": len(coords)}


def cmd_embed(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.tiles:
        enc = load_encoder(args)
        tiles = read_tile_sheet(args.tiles)
        vecs = enc.encode_image(tiles)
        write_store(out / "tiles.cemb", vecs, [str(i) for i in range(len(vecs))], normalized=True)
        print(f"embedded {len(vecs)} tiles into {out / 'tiles.cemb'}")
        return
    if not args.slides:
        raise UsageError("embed needs --slides or --tiles")
    args.slides_base = str(Path(args.slides).parent)
    rows = [r for r in read_jsonl(args.slides) if r.get("kind", "classification") == args.kind]
    if not rows:
        raise UsageError(f"no {args.kind} slides in {args.slides}")
    results = _pool_map(_embed_job, [(r, args) for r in rows], args.workers)
    write_rows(out / "manifests.jsonl", results, args, "manifests")
    print(f"embedded {sum(r['n_tiles'] for r in results)} tiles from {len(results)} slides")


def _manifest_paths(args):
    paths = list(args.manifest or [])
    if args.manifests:
        base = Path(args.manifests).parent
        paths += [resolve(base, r["manifest"]) for r in read_jsonl(args.manifests)]
    if not paths:
        raise UsageError("give --manifests or --manifest")
    return paths


# --- zero-shot --------------------------------------------------------------

def _write_heatmap(man, store, bank, cls, out_dir):
    from .zeroshot import heatmap, tile_scores

    out_dir.mkdir(parents=True, exist_ok=True)
    s = tile_scores(store.vectors.astype(np.float64), bank)
    write_ppm(heatmap(s, cls, man.width_px, man.height_px, man.tile_coords), out_dir / f"{man.slide_id}.heatmap.ppm")


def cmd_classify_slide(args):
    from .zeroshot import TopKConfig, classify_slide

    enc = load_encoder(args) if not args.bank else None
    bank = build_bank(args, enc)
    cfg = TopKConfig(args.ks)
    rows, skipped = [], []
    for mp in _manifest_paths(args):
        man, store = load_slide(mp)
        if store.count == 0 and not args.strict_empty:
            skipped.append(man.slide_id)
            continue
        pred = classify_slide(man, store, bank, cfg)
        if args.heatmaps:
            _write_heatmap(man, store, bank, int(pred.predictions[0]), Path(args.heatmaps))
        row = pred.to_dict()
        row["label"] = man.label
        rows.append(row)
    if skipped:
        print(f"warning: skipped {len(skipped)} slide(s) without tissue tiles: {', '.join(skipped)}",
              file=sys.stderr)
    write_rows(args.out, rows, args, "slide_predictions")
    same = sum(len(set(r["predictions"].values())) == 1 for r in rows)
    print(f"classified {len(rows)} slides at K={list(cfg.ks)}; {same} with the same prediction for every K")


def _pairs(args):
    tiles = read_tile_sheet(args.tiles)
    rows = read_jsonl(args.index) if args.index else [{"index": i} for i in range(len(tiles))]
    if len(rows) != len(tiles):
        raise InvalidArgumentError(f"{args.index} lists {len(rows)} pairs for {len(tiles)} tiles")
    if args.limit:
        tiles, rows = tiles[:args.limit], rows[:args.limit]
    return tiles, rows


def cmd_classify_roi(args):
    from .prompting import build_single_prompt_bank, sample_prompt_sets
    from .zeroshot import tile_scores

    enc = load_encoder(args)
    tiles, rows = _pairs(args)
    u = enc.encode_image(tiles)
    out = []
    if args.prompt_mode == "ensemble":
        bank = build_bank(args, enc)
        s = tile_scores(u, bank)
        for r, sc in zip(rows, s):
            out.append({"index": r["index"], "label": r.get("label"), "prediction": int(np.argmax(sc)),
                        "scores": sc.tolist(), "prompt_set": "ensemble"})
    else:
        ps = load_prompts(args.prompts)
        for j, prompts in enumerate(sample_prompt_sets(ps, args.n_sets, SeededRng(args.seed).child(3))):
            s = tile_scores(u, build_single_prompt_bank(ps, prompts, enc))
            for r, sc in zip(rows, s):
                out.append({"index": r["index"], "label": r.get("label"), "prediction": int(np.argmax(sc)),
                            "scores": sc.tolist(), "prompt_set": j})
    write_rows(args.out, out, args, "roi_predictions")
    print(f"scored {len(rows)} tiles ({args.prompt_mode} prompts)")


def cmd_retrieve(args):
    from .zeroshot import retrieve

    enc = load_encoder(args)
    tiles, rows = _pairs(args)
    img = enc.encode_image(tiles)
    txt = enc.encode_text([r["caption"] for r in rows])
    ids = [str(r["index"]) for r in rows]
    queries, db = (txt, img) if args.direction == "text-to-image" else (img, txt)
    out = []
    for i, q in enumerate(queries):
        res = retrieve(q, db, args.top_k, query_id=ids[i], ids=ids, truth=i)
        out.append({"query": res.query_id, "truth_rank": res.truth_rank,
                    "top": [[k, round(v, 10)] for k, v in res.ranked]})
    write_rows(args.out, out, args, "retrieval")
    from .eval_stats import mean_recall, recall_at_k

    ranks = [r["truth_rank"] for r in out]
    print(f"{args.direction}: R@1 {recall_at_k(ranks, 1):.3f}  R@5 {recall_at_k(ranks, 5):.3f}  "
          f"R@10 {recall_at_k(ranks, 10):.3f}  mean {mean_recall(ranks):.3f}")


def cmd_segment(args):
    from .segmentation import dice_precision_recall, export_mask, segment_slide

    enc = load_encoder(args)
    bank = build_bank(args, enc)
    base = Path(args.slides).parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in read_jsonl(args.slides):
        if r.get("kind") != "segmentation":
            continue
        img = read_ppm(resolve(base, r["image"]))
        mask, _, coords = segment_slide(img, _tissue(img, args), enc, bank, args.tile_side, args.overlap,
                                        args.acc_downsample)
        export_mask(mask, out / f"{r['slide_id']}.mask.ppm", out / f"{r['slide_id']}.mask.pgm")
        row = {"slide_id": r["slide_id"], "n_tiles": len(coords)}
        if r.get("truth"):
            truth = read_pgm(resolve(base, r["truth"]))
            if args.acc_downsample > 1:
                truth = truth[::args.acc_downsample, ::args.acc_downsample]
            d, p, rc = dice_precision_recall(mask, truth, r.get("positive", 1))
            row.update(dice=d, precision=p, recall=rc)
        rows.append(row)
    if not rows:
        raise UsageError(f"no segmentation slides in {args.slides}")
    write_rows(out / "segmentation.jsonl", rows, args, "segmentation")
    if "dice" in rows[0]:
        print(f"{len(rows)} slides: mean dice {np.mean([r['dice'] for r in rows]):.4f}")


def cmd_caption(args):
    from .eval_stats import rouge1

    model = load_encoder(args)
    if not hasattr(model, "generate"):
        raise UsageError("captioning needs a trained --model")
    tiles, rows = _pairs(args)
    k = min(args.top_k, model.config_.vocab_size)
    if k < args.top_k:
        print(f"caption: top-k {args.top_k} exceeds the vocabulary; using {k}", file=sys.stderr)
    out = []
    for r, hyp in zip(rows, model.generate(tiles, k, args.max_len, args.seed)):
        row = {"index": r["index"], "caption": hyp}
        if "caption" in r:
            row.update(reference=r["caption"], rouge1=rouge1(hyp, r["caption"]))
        out.append(row)
    write_rows(args.out, out, args, "captions")
    if out and "rouge1" in out[0]:
        print(f"mean ROUGE-1 {np.mean([r['rouge1'] for r in out]):.4f} over {len(out)} tiles")


# --- supervised -------------------------------------------------------------

def _bags(args):
    bags, labels = [], []
    for mp in _manifest_paths(args):
        man, store = load_slide(mp)
        if man.label is None:
            raise InvalidArgumentError(f"{mp} has no label")
        if store.count == 0:
            continue
        bags.append(store.vectors.astype(np.float64))
        labels.append(man.label)
    return bags, np.array(labels)


def cmd_train_mil(args):
    from .supervised import TrainingSchedule, train_abmil

    bags, labels = _bags(args)
    sched = TrainingSchedule(args.epochs, args.lr, args.weight_decay)
    params, report = train_abmil(bags, labels, sched, SeededRng(args.seed))
    write_checkpoint(args.out, params, {"kind": "abmil", "report": report, "config": run_config(args)})
    flag = " (single class: degenerate classifier)" if report["degenerate"] else ""
    print(f"trained on {len(bags)} slides; final epoch loss {report['loss_curve'][-1]:.4f}{flag}")


def _store_and_labels(store_path, labels_path):
    store = read_store(store_path)
    labels = [r["label"] for r in read_jsonl(labels_path)]
    if len(labels) != store.count:
        raise InvalidArgumentError(f"{labels_path} has {len(labels)} labels for {store.count} vectors")
    return store.vectors.astype(np.float64), np.array(labels)


def cmd_probe(args):
    from .supervised import LinearProbe

    X, y = _store_and_labels(args.train_store, args.train_labels)
    probe = LinearProbe(max_iter=args.max_iter, tol=args.tol).fit(X, y)
    Xt, yt = _store_and_labels(args.test_store, args.test_labels) if args.test_store else (X, y)
    scores = probe.predict_proba(Xt)
    rows = [{"index": i, "label": int(lb), "prediction": int(np.argmax(s)), "scores": s.tolist()}
            for i, (lb, s) in enumerate(zip(yt, scores))]
    write_rows(args.out, rows, args, "roi_predictions")
    print(f"probe: lambda {probe.info_['lambda']:.6g}, {probe.info_['iterations']} iterations "
          f"({probe.info_['status']}), objective {probe.info_['objective']:.6f}")


def cmd_fewshot(args):
    from .supervised import FewShotPlan, TrainingSchedule, run_fewshot

    rng = SeededRng(args.seed)
    if args.synthetic:
        from .synthetic import bag_prototypes, gaussian_bags

        protos = bag_prototypes(args.n_classes, rng.child(0), args.dim, args.signal)
        tr_b, tr_y = gaussian_bags(args.pool_per_class, protos, rng.child(1))
        te_b, te_y = gaussian_bags(args.test_per_class, protos, rng.child(2))
    else:
        tr_b, tr_y = _bags(args)
        saved = args.manifests, args.manifest
        args.manifests, args.manifest = args.test_manifests, None
        te_b, te_y = _bags(args)
        args.manifests, args.manifest = saved
    plan = FewShotPlan(args.shots, args.replicates)
    rows = run_fewshot(tr_b, tr_y, te_b, te_y, plan, rng.child(5),
                       TrainingSchedule(args.epochs, args.lr, args.weight_decay), args.n_classes if args.synthetic else None)
    write_rows(args.out, rows, args, "fewshot")
    for s in plan.shots:
        v = [r["balanced_accuracy"] for r in rows if r["shots"] == s]
        print(f"n_c={s:>3}  median balanced accuracy {np.median(v):.4f}  (min {min(v):.4f}, max {max(v):.4f})")


# --- evaluation -------------------------------------------------------------

def _fmt_table(table: dict) -> str:
    width = max(len(k) for k in table)
    lines = []
    for k, v in table.items():
        val = f"{v:.6f}" if isinstance(v, float) else str(v)
        lines.append(f"{k:<{width}}  {val}")
    return "\n".join(lines)


def _slide_labeled(rows, k):
    from .eval_stats import LabeledPredictions

    return LabeledPredictions([r["label"] for r in rows], [r["predictions"][str(k)] for r in rows],
                              np.array([r["scores"][str(k)] for r in rows]))


def _classification_table(lp, n_classes=None):
    from .eval_stats import (UndefinedMetricError, auc_roc, balanced_accuracy, cohens_kappa, quadratic_kappa,
                             weighted_f1)

    table = {"n": len(lp), "balanced_accuracy": balanced_accuracy(lp), "weighted_f1": weighted_f1(lp)}
    for name, fn in (("auc_roc", lambda: auc_roc(lp)), ("kappa", lambda: cohens_kappa(lp, n_classes=n_classes)),
                     ("quadratic_kappa", lambda: quadratic_kappa(lp, n_classes=n_classes))):
        try:
            table[name] = fn()
        except UndefinedMetricError:
            table[name] = None
    return table


def evaluate_rows(rows, kind) -> dict:
    from .eval_stats import LabeledPredictions, balanced_accuracy, mean_recall, recall_at_k

    if kind == "slide_predictions":
        ks = sorted(int(k) for k in rows[0]["predictions"])
        lp = {k: _slide_labeled(rows, k) for k in ks}
        per_k = {k: balanced_accuracy(lp[k]) for k in ks}
        best = max(ks, key=lambda k: (per_k[k], -k))
        table = {"best_k": best}
        table.update({f"balanced_accuracy@K={k}": v for k, v in per_k.items()})
        n_classes = len(rows[0]["scores"][str(best)])
        table.update(_classification_table(lp[best], n_classes))
        table["accuracy"] = float(np.mean(lp[best].y_true == lp[best].y_pred))
        return table
    if kind == "roi_predictions":
        groups = {}
        for r in rows:
            groups.setdefault(r.get("prompt_set", "ensemble"), []).append(r)
        tables = {}
        for g, rs in groups.items():
            lp = LabeledPredictions([r["label"] for r in rs], [r["prediction"] for r in rs],
                                    np.array([r["scores"] for r in rs]))
            tables[g] = _classification_table(lp, lp.scores.shape[1])
        if len(tables) == 1:
            return next(iter(tables.values()))
        baccs = [t["balanced_accuracy"] for t in tables.values()]
        return {"n_prompt_sets": len(tables), "median_balanced_accuracy": float(np.median(baccs)),
                "min_balanced_accuracy": float(min(baccs)), "max_balanced_accuracy": float(max(baccs))}
    if kind == "retrieval":
        ranks = [r["truth_rank"] for r in rows]
        return {"n": len(ranks), "recall@1": recall_at_k(ranks, 1), "recall@5": recall_at_k(ranks, 5),
                "recall@10": recall_at_k(ranks, 10), "mean_recall": mean_recall(ranks)}
    if kind == "segmentation":
        return {"n": len(rows), **{m: float(np.mean([r[m] for r in rows])) for m in ("dice", "precision", "recall")}}
    if kind == "fewshot":
        out = {}
        for s in sorted({r["shots"] for r in rows}):
            out[f"median_balanced_accuracy@{s}"] = float(np.median(
                [r["balanced_accuracy"] for r in rows if r["shots"] == s]))
        return out
    if kind == "captions":
        return {"n": len(rows), "rouge1": float(np.mean([r["rouge1"] for r in rows]))}
    raise UsageError(f"cannot evaluate rows of kind {kind!r}")


def cmd_eval(args):
    rows = read_jsonl(args.predictions)
    if not rows:
        raise UsageError(f"{args.predictions} holds no predictions")
    kind = read_meta(args.predictions).get("kind") or _guess_kind(rows[0])
    table = evaluate_rows(rows, kind)
    if args.out:
        Path(args.out).write_text(json.dumps({"kind": kind, "metrics": table, "config": run_config(args)},
                                             sort_keys=True, indent=1) + "\n")
    print(_fmt_table(table))


def _guess_kind(row):
    for key, kind in (("predictions", "slide_predictions"), ("prediction", "roi_predictions"),
                      ("truth_rank", "retrieval"), ("dice", "segmentation"), ("shots", "fewshot"),
                      ("rouge1", "captions")):
        if key in row:
            return kind
    raise UsageError("unrecognised prediction rows")


def _labeled(path, k=None):
    from .eval_stats import LabeledPredictions, balanced_accuracy

    rows = read_jsonl(path)
    if not rows:
        raise UsageError(f"{path} holds no predictions")
    if "predictions" in rows[0]:
        ks = sorted(int(x) for x in rows[0]["predictions"])
        if k is None:
            k = max(ks, key=lambda kk: (balanced_accuracy(_slide_labeled(rows, kk)), -kk))
        return _slide_labeled(rows, k), k
    rows = [r for r in rows if r.get("prompt_set", "ensemble") == "ensemble"]
    return LabeledPredictions([r["label"] for r in rows], [r["prediction"] for r in rows],
                              np.array([r["scores"] for r in rows]) if "scores" in rows[0] else None), None


def cmd_stats(args):
    from .eval_stats import METRICS, bootstrap_ci, paired_permutation_test

    if args.metric not in METRICS:
        raise UsageError(f"unknown metric {args.metric!r}; choose from {sorted(METRICS)}")
    fn = METRICS[args.metric]
    a, k = _labeled(args.predictions, args.k)
    rng = SeededRng(args.seed)
    ci = bootstrap_ci(fn, a, args.n_resamples, args.level, rng.child(1))
    result = {"metric": args.metric, "k": k, "a": ci.to_dict()}
    if args.compare:
        b, _ = _labeled(args.compare, k)
        result["b"] = bootstrap_ci(fn, b, args.n_resamples, args.level, rng.child(2)).to_dict()
        result["p_value"] = paired_permutation_test(a, b, fn, args.n_permutations, rng.child(3), args.strict)
    if args.out:
        Path(args.out).write_text(json.dumps({"stats": result, "config": run_config(args)}, sort_keys=True,
                                             indent=1) + "\n")
    print(f"{args.metric}: {ci.point:.4f} [{ci.lower:.4f}, {ci.upper:.4f}] ({int(ci.level * 100)}% CI, "
          f"{ci.n_resamples} resamples)")
    if "p_value" in result:
        print(f"vs {args.compare}: {result['b']['point']:.4f}; paired permutation p = {result['p_value']:.4f}")


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histovl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=EXIT_CODES)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--workers", type=int, default=1, help="per-slide worker processes (default 1)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=EXIT_CODES,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate the synthetic corpus (pairs, slides, masks)")
    p.add_argument("--out", required=True)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--pairs-per-class", type=int, default=250)
    p.add_argument("--heldout-per-class", type=int, default=50)
    p.add_argument("--slides-per-class", type=int, default=5)
    p.add_argument("--slide-size", type=int, default=1024)
    p.add_argument("--seg-slides", type=int, default=4)
    p.add_argument("--seg-size", type=int, default=1024)

    p = add("train-coca", cmd_train_coca, "train the toy contrastive captioner")
    p.add_argument("--data", required=True, help="directory written by synth")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", help="write the per-epoch loss curve here (JSON lines)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--warmup-steps", type=int, default=50)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--caption-weight", type=float, default=1.0)
    p.add_argument("--contrastive-weight", type=float, default=1.0)

    p = add("segment-tissue", cmd_segment_tissue, "tissue mask of a slide raster (PGM, 255 = tissue)")
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True)
    _tissue_args(p)

    p = add("tile", cmd_tile, "tile coordinates for a slide")
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("classification", "overlap"), default="classification")
    p.add_argument("--tile-side", type=int, default=None, help="default 256 (classification) / 224 (overlap)")
    p.add_argument("--policy", choices=("center", "area"), default="center")
    p.add_argument("--overlap", type=float, default=0.75)
    _tissue_args(p)

    p = add("embed", cmd_embed, "embed slide tiles (or a tile sheet) into stores with manifests")
    p.add_argument("--slides", help="slides.jsonl from synth")
    p.add_argument("--tiles", help="tile sheet PPM; writes one store instead of per-slide stores")
    p.add_argument("--kind", default="classification")
    p.add_argument("--out", required=True)
    p.add_argument("--tile-side", type=int, default=256)
    p.add_argument("--policy", choices=("center", "area"), default="center")
    _encoder_args(p)
    _tissue_args(p)

    def bank_args(p):
        p.add_argument("--prompts", help="prompt-set JSON or bundled name (e.g. crc100k)")
        p.add_argument("--bank", help="class-embedding bank JSON (overrides --prompts)")

    p = add("classify-slide", cmd_classify_slide, "zero-shot slide classification by top-K pooling")
    p.add_argument("--manifests", help="manifests.jsonl from embed")
    p.add_argument("--manifest", action="append", help="single manifest (repeatable)")
    p.add_argument("--ks", type=_ks, default=(1, 5, 10, 50, 100))
    p.add_argument("--strict-empty", action="store_true", help="fail on slides without tiles (default: skip)")
    p.add_argument("--heatmaps", help="directory for per-slide PPM heatmaps of the class predicted at the first K")
    p.add_argument("--out", required=True)
    _encoder_args(p)
    bank_args(p)

    def pair_args(p):
        p.add_argument("--tiles", required=True, help="tile sheet PPM")
        p.add_argument("--index", help="pairs JSON lines aligned with the sheet")
        p.add_argument("--limit", type=int, default=0, help="use only the first N tiles")
        p.add_argument("--out", required=True)

    p = add("classify-roi", cmd_classify_roi, "zero-shot tile classification")
    pair_args(p)
    p.add_argument("--prompt-mode", choices=("ensemble", "sampled"), default="ensemble")
    p.add_argument("--n-sets", type=int, default=50, help="sampled prompt sets (sampled mode)")
    _encoder_args(p)
    bank_args(p)

    p = add("retrieve", cmd_retrieve, "cross-modal retrieval over held-out pairs")
    pair_args(p)
    p.add_argument("--direction", choices=("text-to-image", "image-to-text"), default="text-to-image")
    p.add_argument("--top-k", type=int, default=10)
    _encoder_args(p)

    p = add("segment", cmd_segment, "zero-shot segmentation of segmentation slides")
    p.add_argument("--slides", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile-side", type=int, default=224)
    p.add_argument("--overlap", type=float, default=0.75)
    p.add_argument("--acc-downsample", type=int, default=1)
    _encoder_args(p)
    bank_args(p)
    _tissue_args(p)

    p = add("caption", cmd_caption, "generate captions with top-k sampling")
    pair_args(p)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--max-len", type=int, default=32)
    _encoder_args(p)

    def mil_args(p):
        p.add_argument("--manifests", help="manifests.jsonl (labelled slides)")
        p.add_argument("--manifest", action="append")
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--weight-decay", type=float, default=1e-5)

    p = add("train-mil", cmd_train_mil, "train a gated-attention MIL classifier")
    mil_args(p)
    p.add_argument("--out", required=True)

    p = add("probe", cmd_probe, "L-BFGS logistic-regression probe on a store")
    p.add_argument("--train-store", required=True)
    p.add_argument("--train-labels", required=True, help="JSON lines with a label field, store order")
    p.add_argument("--test-store")
    p.add_argument("--test-labels")
    p.add_argument("--max-iter", type=int, default=800)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True)

    p = add("fewshot", cmd_fewshot, "few-shot ABMIL curve over n_c shots per class")
    mil_args(p)
    p.add_argument("--test-manifests")
    p.add_argument("--synthetic", action="store_true", help="use Gaussian bags instead of manifests")
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--signal", type=float, default=1.5)
    p.add_argument("--pool-per-class", type=int, default=20)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--shots", type=_ks, default=(1, 2, 4, 8, 16))
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "metrics for a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out")

    p = add("stats", cmd_stats, "bootstrap CI and paired permutation test")
    p.add_argument("--predictions", required=True)
    p.add_argument("--compare")
    p.add_argument("--metric", default="balanced_accuracy")
    p.add_argument("--k", type=int, help="K for slide predictions (default: best by balanced accuracy)")
    p.add_argument("--n-resamples", type=int, default=1000)
    p.add_argument("--n-permutations", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--strict", action="store_true", help="count only strictly larger permuted differences")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"histovl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except HistoVLError as exc:
        print(f"histovl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"histovl {args.command}: I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
