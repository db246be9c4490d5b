"""Command-line entry point.

One subcommand per pipeline stage; every run writes its resolved
configuration, a report, and a manifest of produced files under ``--out``.
Wall-clock timings live in a separate ``timing.json`` so reports are
byte-identical across same-seed reruns.

Exit codes: 0 success, 1 validation error (bad config/arguments/inputs),
2 runtime error.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from segxplain import dataio
from segxplain.augment import PairedSample
from segxplain.classification import evaluate, report_text, roc_auc, \
    wilcoxon_signed_rank
from segxplain.nn import ConfigurationError, load_model, save_model
from segxplain.pipeline import (
    Corpus,
    ExperimentConfig,
    evaluate_variant,
    load_corpus,
    prepare_variant_inputs,
    run_pipeline_comparison,
    split_records,
    train_variant,
)
from segxplain.segmentation import (
    SegTrainConfig,
    UNetConfig,
    mask_metrics,
    postprocess_mask,
    predict_mask,
    scaled_radius,
    train_segmenter,
)


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Artifact helpers


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def finalize_run(out_dir, started, resolved_config):
    """config.json + files.manifest + timing.json for a finished command."""
    write_json(os.path.join(out_dir, "config.json"), resolved_config)
    produced = []
    for root, _dirs, files in os.walk(out_dir):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), out_dir)
            if rel not in ("files.manifest", "timing.json"):
                produced.append(rel)
    with open(os.path.join(out_dir, "files.manifest"), "w") as fh:
        for rel in sorted(produced):
            fh.write(rel + "\n")
    write_json(os.path.join(out_dir, "timing.json"),
               {"elapsed_seconds": time.time() - started})


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})")
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: {exc}")


def _corpus_samples(corpus: Corpus, records):
    samples = []
    for r in records:
        mask = corpus.masks.get(r.id)
        if mask is None:
            raise ValidationError(f"record {r.id} has no mask")
        samples.append(PairedSample(corpus.images[r.id], mask))
    return samples


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args):
    started = time.time()
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    corpus = dataio.generate_synthetic_corpus(
        args.n, args.size, args.bias, args.seed,
        class_source_correlation=args.correlation)
    for record, image, mask in zip(corpus.manifest, corpus.images,
                                   corpus.masks):
        dataio.save_pgm(os.path.join(args.out, record.image_path), image)
        dataio.save_mask(os.path.join(args.out, "masks", f"{record.id}.pgm"),
                         mask)
    manifest = corpus.manifest
    if args.split:
        assignment = dataio.constrained_split(
            manifest, dataio.SplitSpec(seed=args.seed))
        manifest = dataio.apply_split(manifest, assignment)
    dataio.save_manifest(os.path.join(args.out, "manifest.csv"), manifest)
    finalize_run(args.out, started, {
        "command": "synth", "n": args.n, "size": args.size,
        "annotation_bias": args.bias, "seed": args.seed,
        "correlation": args.correlation, "split": args.split,
    })
    return 0


def cmd_split(args):
    started = time.time()
    manifest = dataio.load_manifest(args.manifest, check_files=False)
    spec = dataio.SplitSpec(test_fraction=args.test_fraction,
                            val_fraction=args.val_fraction, seed=args.seed)
    assignment = dataio.constrained_split(manifest, spec)
    manifest = dataio.apply_split(manifest, assignment)
    os.makedirs(args.out, exist_ok=True)
    dataio.save_manifest(os.path.join(args.out, "manifest.csv"), manifest)
    counts = {}
    for r in manifest:
        counts.setdefault(r.split, {}).setdefault(r.class_label, 0)
        counts[r.split][r.class_label] += 1
    write_json(os.path.join(args.out, "report.json"), {"split_counts": counts})
    finalize_run(args.out, started, {
        "command": "split", "manifest": args.manifest,
        "test_fraction": args.test_fraction,
        "val_fraction": args.val_fraction, "seed": args.seed,
    })
    return 0


def cmd_seg_train(args):
    started = time.time()
    config = load_experiment_config(args.config)
    corpus = load_corpus(args.data)
    manifest, groups = split_records(corpus.manifest)
    train_samples = _corpus_samples(corpus, groups["train"])
    val_samples = _corpus_samples(corpus, groups["val"] or groups["train"])
    model_conf = dict(config.model)
    unet = UNetConfig(seed=config.seed, **model_conf)
    sched_conf = dict(config.schedule)
    seg_config = SegTrainConfig(seed=config.seed, unet=unet, **sched_conf)
    aug = config.augmentation_config()
    model, history = train_segmenter(train_samples, val_samples, seg_config,
                                     aug)

    os.makedirs(os.path.join(args.out, "checkpoints"), exist_ok=True)
    save_model(os.path.join(args.out, "checkpoints", "best.ckpt"), model)
    test_records = groups["test"]
    metrics = {}
    if test_records:
        dices, jds = [], []
        for r in test_records:
            pred = predict_mask(model, corpus.images[r.id])
            truth = corpus.masks.get(r.id)
            if truth is None:
                continue
            from segxplain.imageops import resize_nearest
            if truth.shape != pred.shape:
                truth = resize_nearest(truth, *pred.shape)
            m = mask_metrics(pred, truth)
            dices.append(m.dice)
            jds.append(m.jaccard_distance)
        if dices:
            metrics = {
                "test_dice_mean": float(np.mean(dices)),
                "test_dice_min": float(np.min(dices)),
                "test_jaccard_distance_mean": float(np.mean(jds)),
                "test_jaccard_distance_max": float(np.max(jds)),
                "n_test": len(dices),
            }
    write_json(os.path.join(args.out, "report.json"),
               {"history": history, "test_metrics": metrics})
    finalize_run(args.out, started,
                 {"command": "seg-train", "config": config.to_dict(),
                  "data": args.data})
    return 0


def cmd_seg_predict(args):
    started = time.time()
    model = load_model(args.model)
    corpus = load_corpus(args.data)
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    open_r = args.open_radius if args.open_radius is not None \
        else scaled_radius(model.input_shape[1])
    dilate_r = args.dilate_radius if args.dilate_radius is not None \
        else scaled_radius(model.input_shape[1])
    index = {"items": {}}
    per_image = {}
    for r in corpus.manifest:
        mask = predict_mask(model, corpus.images[r.id], args.threshold)
        mask = postprocess_mask(mask, open_r, dilate_r)
        dataio.save_mask(os.path.join(args.out, "masks", f"{r.id}.r0.pgm"),
                         mask)
        dataio.save_pgm(os.path.join(args.out, "images", f"{r.id}.pgm"),
                        corpus.images[r.id])
        index["items"][r.id] = {"status": "pending", "revision": 0,
                                "mask": f"masks/{r.id}.r0.pgm",
                                "image": f"images/{r.id}.pgm"}
        truth = corpus.masks.get(r.id)
        if truth is not None:
            from segxplain.imageops import resize_nearest
            if truth.shape != mask.shape:
                truth = resize_nearest(truth, *mask.shape)
            m = mask_metrics(mask, truth)
            per_image[r.id] = {"dice": m.dice,
                               "jaccard_distance": m.jaccard_distance}
    write_json(os.path.join(args.out, "index.json"), index)
    report = {"n_predicted": len(index["items"]), "per_image": per_image}
    if per_image:
        dices = [v["dice"] for v in per_image.values()]
        report["dice_mean"] = float(np.mean(dices))
        report["dice_min"] = float(np.min(dices))
    write_json(os.path.join(args.out, "report.json"), report)
    finalize_run(args.out, started, {
        "command": "seg-predict", "model": args.model, "data": args.data,
        "threshold": args.threshold, "open_radius": open_r,
        "dilate_radius": dilate_r,
    })
    return 0


def _prepared_dataset(config, corpus, groups, which):
    records = groups[which]
    if not records:
        raise ValidationError(f"empty {which} split")
    images, bboxes = prepare_variant_inputs(records, corpus, config,
                                            config.segmented)
    return records, images, bboxes


def cmd_clf_train(args):
    started = time.time()
    config = load_experiment_config(args.config)
    corpus = load_corpus(args.data)
    manifest = corpus.manifest
    if config.mode == "source_bias":
        manifest = dataio.relabel_by_source(manifest)
    manifest, groups = split_records(manifest)
    classes = sorted({r.class_label for r in manifest})
    if len(classes) < 2:
        raise ValidationError(f"need at least 2 classes, found {classes}")
    if not groups["train"]:
        raise ValidationError("empty train split")
    corpus = Corpus(manifest, corpus.images, corpus.masks)
    model, history = train_variant(config, classes, groups["train"],
                                   groups["val"] or groups["train"], corpus,
                                   config.segmented)
    os.makedirs(os.path.join(args.out, "checkpoints"), exist_ok=True)
    save_model(os.path.join(args.out, "checkpoints", "best.ckpt"), model)
    write_json(os.path.join(args.out, "report.json"),
               {"history": history, "classes": classes})
    finalize_run(args.out, started,
                 {"command": "clf-train", "config": config.to_dict(),
                  "data": args.data})
    return 0


def cmd_clf_eval(args):
    started = time.time()
    config = load_experiment_config(args.config)
    model = load_model(args.model)
    corpus = load_corpus(args.data)
    manifest = corpus.manifest
    if config.mode == "source_bias":
        manifest = dataio.relabel_by_source(manifest)
    manifest, groups = split_records(manifest)
    classes = sorted({r.class_label for r in manifest})
    corpus = Corpus(manifest, corpus.images, corpus.masks)
    records, images, _ = _prepared_dataset(config, corpus, groups, args.split)
    macro_exclude = tuple(args.exclude or ())
    report, probs = evaluate_variant(model, classes, records, images,
                                     macro_exclude)
    payload = report.to_json_dict()
    rocs = {}
    truths = [r.class_label for r in records]
    for i, c in enumerate(classes):
        labels = np.array([1 if t == c else 0 for t in truths])
        if 0 < labels.sum() < len(labels):
            curve = roc_auc(probs[:, i], labels)
            rocs[c] = {"auc": curve.auc, "points": curve.points}
    payload["roc"] = rocs
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "report.json"), payload)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(report_text(report) + "\n")
    finalize_run(args.out, started,
                 {"command": "clf-eval", "config": config.to_dict(),
                  "model": args.model, "data": args.data,
                  "split": args.split, "exclude": list(macro_exclude)})
    return 0


def cmd_explain(args):
    started = time.time()
    from segxplain.pipeline import explain_variant

    config = load_experiment_config(args.config)
    model = load_model(args.model)
    corpus = load_corpus(args.data)
    manifest, groups = split_records(corpus.manifest)
    classes = sorted({r.class_label for r in manifest})
    corpus = Corpus(manifest, corpus.images, corpus.masks)
    records, images, bboxes = _prepared_dataset(config, corpus, groups,
                                                args.split)
    frame_shape = next(iter(corpus.images.values())).shape
    maps, payloads = explain_variant(config, model, classes, records, images,
                                     bboxes, frame_shape, "explain")
    os.makedirs(os.path.join(args.out, "explanations"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "maps"), exist_ok=True)
    for payload in payloads:
        write_json(os.path.join(args.out, "explanations",
                                f"{payload['image_id']}.json"), payload)
    for (label, method), per_image in sorted(maps.items()):
        for i, m in enumerate(per_image):
            dataio.save_heatmap(
                os.path.join(args.out, "maps",
                             f"{label}.{method}.{i:04d}.pfm"), m)
    write_json(os.path.join(args.out, "report.json"), {
        "n_images": len(records),
        "groups": {f"{label}.{method}": len(per_image)
                   for (label, method), per_image in sorted(maps.items())},
    })
    finalize_run(args.out, started,
                 {"command": "explain", "config": config.to_dict(),
                  "model": args.model, "data": args.data,
                  "split": args.split})
    return 0


def cmd_heatmap(args):
    started = time.time()
    maps_dir = os.path.join(args.explanations, "maps")
    if not os.path.isdir(maps_dir):
        raise ValidationError(f"no maps directory under {args.explanations}")
    groups = {}
    for name in sorted(os.listdir(maps_dir)):
        if not name.endswith(".pfm"):
            continue
        label, method, _idx = name.rsplit(".", 3)[:3]
        groups.setdefault((label, method), []).append(
            dataio.load_heatmap(os.path.join(maps_dir, name)))
    if not groups:
        raise ValidationError(f"no per-image maps found in {maps_dir}")
    os.makedirs(os.path.join(args.out, "heatmaps"), exist_ok=True)
    from segxplain.xai import aggregate

    summary = {}
    for (label, method), per_image in sorted(groups.items()):
        hm = aggregate(per_image, model_id=args.model_id, class_label=label,
                       method=method)
        out_name = f"{args.model_id or 'model'}.{label}.{method}.pfm"
        dataio.save_heatmap(os.path.join(args.out, "heatmaps", out_name),
                            hm.values)
        summary[f"{label}.{method}"] = {
            "n_images": hm.n_images,
            "mean_mass": float(hm.values.mean()),
            "file": f"heatmaps/{out_name}",
        }
    write_json(os.path.join(args.out, "report.json"), {"heatmaps": summary})
    finalize_run(args.out, started,
                 {"command": "heatmap", "explanations": args.explanations,
                  "model_id": args.model_id})
    return 0


def cmd_stats(args):
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    payload = {}
    resolved = {"command": "stats"}
    if args.compare_pipelines:
        config = load_experiment_config(args.compare_pipelines)
        report, heatmaps = run_pipeline_comparison(config, args.data)
        os.makedirs(os.path.join(args.out, "heatmaps"), exist_ok=True)
        for (variant, label, method), hm in sorted(heatmaps.items()):
            dataio.save_heatmap(
                os.path.join(args.out, "heatmaps",
                             f"{variant}.{label}.{method}.pfm"), hm.values)
        payload["pipeline_comparison"] = report
        resolved["compare_pipelines"] = config.to_dict()
        resolved["data"] = args.data
    if args.generalization:
        from segxplain.pipeline import run_generalization_experiment

        config = load_experiment_config(args.generalization)
        payload["generalization"] = run_generalization_experiment(config,
                                                                  args.data)
        resolved["generalization"] = config.to_dict()
        resolved["data"] = args.data
    if args.a and args.b:
        with open(args.a) as fh:
            ra = json.load(fh)
        with open(args.b) as fh:
            rb = json.load(fh)
        fa = [ra["per_class"][c]["f1"] for c in sorted(ra["per_class"])]
        fb = [rb["per_class"][c]["f1"] for c in sorted(rb["per_class"])]
        if sorted(ra["per_class"]) != sorted(rb["per_class"]):
            raise ValidationError("reports have mismatched class sets")
        w = wilcoxon_signed_rank(fa, fb)
        payload["wilcoxon"] = {"statistic": w.statistic, "p_value": w.p_value,
                               "n_effective": w.n_effective,
                               "degenerate": w.degenerate}
        resolved.update({"a": args.a, "b": args.b})
    if args.export_corrections:
        from segxplain.review import ReviewStore

        store = ReviewStore(args.export_corrections)
        exported = store.export_corrections(os.path.join(args.out,
                                                         "corrections"))
        payload["exported_corrections"] = sorted(exported)
        resolved["export_corrections"] = args.export_corrections
    if not payload:
        raise ValidationError("stats: nothing to do (pass --a/--b, "
                              "--compare-pipelines, --generalization or "
                              "--export-corrections)")
    write_json(os.path.join(args.out, "report.json"), payload)
    finalize_run(args.out, started, resolved)
    return 0


def cmd_serve(args):
    from segxplain.review import serve

    serve(args.store, args.port, static_dir=args.ui)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="segxplain",
        description="Lung segmentation / classification / explanation "
                    "pipeline at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--bias", action="store_true",
                   help="stamp class-correlated corner glyphs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--correlation", type=float, default=0.5,
                   help="class/source correlation")
    p.add_argument("--split", action="store_true",
                   help="write a train/val/test split column")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="constrained train/val/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("seg-train", help="train the lung segmenter")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_seg_train)

    p = sub.add_parser("seg-predict",
                       help="predict masks; output doubles as a review store")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--open-radius", type=int, default=None)
    p.add_argument("--dilate-radius", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_seg_predict)

    p = sub.add_parser("clf-train", help="train a classifier variant")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_clf_train)

    p = sub.add_parser("clf-eval", help="evaluate a trained classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--exclude", nargs="*", default=None,
                   help="classes excluded from the macro average")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_clf_eval)

    p = sub.add_parser("explain", help="LIME + Grad-CAM per-image maps")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("heatmap", help="aggregate per-image maps")
    p.add_argument("--explanations", required=True,
                   help="an `explain` output directory")
    p.add_argument("--model-id", default="model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("stats", help="paired statistics / pipeline comparison")
    p.add_argument("--a", help="first evaluation report.json")
    p.add_argument("--b", help="second evaluation report.json")
    p.add_argument("--compare-pipelines", metavar="CONFIG",
                   help="run the segmented vs non-segmented comparison")
    p.add_argument("--generalization", metavar="CONFIG",
                   help="run the two-fold covid generalization experiment")
    p.add_argument("--data",
                   help="corpus directory for --compare-pipelines / "
                        "--generalization")
    p.add_argument("--export-corrections", metavar="STORE",
                   help="review store to export edited masks from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("serve", help="mask review HTTP service")
    p.add_argument("--store", required=True)
    p.add_argument("--port", type=int, default=8731)
    p.add_argument("--ui", default=None,
                   help="directory of built review-UI assets to serve at /")
    p.set_defaults(func=cmd_serve)
    return parser


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
    try:
        return args.func(args)
    except (ValidationError, dataio.ManifestError, dataio.FormatError,
            ConfigurationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
