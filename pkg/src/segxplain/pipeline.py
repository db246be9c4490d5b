"""End-to-end experiment orchestration shared by the CLI.

A "variant" is one classification pipeline: either full-frame images or
ROI crops (mask times image, cropped to the lung bounding box). The paired
comparison trains both variants with equal seeds, evaluates them on the same
test split, explains every test image with LIME and Grad-CAM, and aggregates
per-class heatmaps in full-frame coordinates so the variants are directly
comparable.
"""

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from segxplain import dataio
from segxplain.augment import AugmentationConfig
from segxplain.classification import (
    ClassifierConfig,
    TrainSchedule,
    build_classifier,
    evaluate,
    predict_proba_batch,
    train_two_phase,
    wilcoxon_signed_rank,
)
from segxplain.nn import load_model
from segxplain.rng import derive_rng, derive_seed
from segxplain.segmentation import (
    crop_to_roi,
    predict_mask,
    project_to_frame,
)
from segxplain.xai import (
    aggregate,
    cam_to_mask,
    explanation_to_mask,
    gradcam,
    lime_explain,
)
from segxplain.xai.lime import LimeConfig


@dataclass
class ExperimentConfig:
    mode: str = "multiclass"  # multiclass | covid_generalization_2fold | source_bias
    segmented: bool = False
    seed: int = 0
    model: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    augmentation: Optional[dict] = None
    lime: dict = field(default_factory=dict)
    crop_size: int = 48
    mask_source: str = "ground_truth"  # or a checkpoint path
    cam_mask_threshold: float = 0.5

    MODES = ("multiclass", "covid_generalization_2fold", "source_bias")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of "
                             f"{self.MODES}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "segmented": self.segmented,
            "seed": self.seed,
            "model": dict(self.model),
            "schedule": dict(self.schedule),
            "augmentation": self.augmentation,
            "lime": dict(self.lime),
            "crop_size": self.crop_size,
            "mask_source": self.mask_source,
            "cam_mask_threshold": self.cam_mask_threshold,
        }

    def classifier_config(self) -> ClassifierConfig:
        raw = dict(self.model)
        if "head_sizes" in raw:
            raw["head_sizes"] = tuple(raw["head_sizes"])
        raw.setdefault("seed", self.seed)
        return ClassifierConfig(**raw)

    def train_schedule(self) -> TrainSchedule:
        raw = dict(self.schedule)
        raw.setdefault("seed", self.seed)
        return TrainSchedule(**raw)

    def augmentation_config(self) -> Optional[AugmentationConfig]:
        if self.augmentation is None:
            return None
        raw = dict(self.augmentation)
        preset = raw.pop("preset", None)
        if "gamma_range" in raw:
            raw["gamma_range"] = tuple(raw["gamma_range"])
        if preset == "classification":
            return AugmentationConfig.classification(**raw)
        if preset == "segmentation":
            return AugmentationConfig.segmentation(**raw)
        return AugmentationConfig(**raw)

    def lime_config(self) -> LimeConfig:
        return LimeConfig(**self.lime)


@dataclass
class Corpus:
    manifest: dataio.Manifest
    images: dict  # id -> float image
    masks: dict   # id -> binary mask (may be empty)


def load_corpus(data_dir) -> Corpus:
    manifest_path = os.path.join(data_dir, "manifest.csv")
    manifest = dataio.load_manifest(manifest_path)
    images, masks = {}, {}
    for r in manifest:
        images[r.id] = dataio.load_image(os.path.join(data_dir, r.image_path))
        mask_path = os.path.join(data_dir, "masks", f"{r.id}.pgm")
        if os.path.exists(mask_path):
            masks[r.id] = dataio.load_mask(mask_path)
    return Corpus(manifest, images, masks)


def split_records(manifest):
    """Records grouped by their split column (assigning one if absent)."""
    if not any(r.split for r in manifest):
        assignment = dataio.constrained_split(manifest, dataio.SplitSpec())
        manifest = dataio.apply_split(manifest, assignment)
    groups = {"train": [], "val": [], "test": []}
    for r in manifest:
        groups[r.split or "train"].append(r)
    return manifest, groups


def _mask_for(record, corpus, config, seg_model):
    if seg_model is not None:
        return predict_mask(seg_model, corpus.images[record.id])
    mask = corpus.masks.get(record.id)
    if mask is None:
        raise ValueError(f"no ground-truth mask for {record.id} and no "
                         f"segmentation checkpoint configured")
    return mask


def prepare_variant_inputs(records, corpus, config, segmented, seg_model=None):
    """Images (and crop bboxes for the segmented variant) for a record list."""
    size = config.classifier_config().input_size
    images, bboxes = [], []
    from segxplain.imageops import resize_bilinear

    for r in records:
        img = corpus.images[r.id]
        if segmented:
            mask = _mask_for(r, corpus, config, seg_model)
            crop, bbox = crop_to_roi(img, mask, config.crop_size)
            img = crop
            bboxes.append(bbox)
        else:
            bboxes.append(None)
        if img.shape != (size, size):
            img = np.clip(resize_bilinear(img, size, size), 0.0, 1.0)
        images.append(img)
    return images, bboxes


def train_variant(config: ExperimentConfig, classes, train_records,
                  val_records, corpus, segmented, seg_model=None):
    train_x, _ = prepare_variant_inputs(train_records, corpus, config,
                                        segmented, seg_model)
    val_x, _ = prepare_variant_inputs(val_records, corpus, config, segmented,
                                      seg_model)
    train_y = [r.class_label for r in train_records]
    val_y = [r.class_label for r in val_records]
    model = build_classifier(config.classifier_config(), len(classes))
    model, history = train_two_phase(
        model, classes, (np.array(train_x), train_y),
        (np.array(val_x), val_y), config.train_schedule(),
        config.augmentation_config())
    return model, history


def evaluate_variant(model, classes, records, images, macro_exclude=()):
    probs = predict_proba_batch(model, images)
    predictions = [classes[i] for i in probs.argmax(axis=1)]
    truths = [r.class_label for r in records]
    report = evaluate(predictions, truths, classes, macro_exclude)
    return report, probs


def explain_variant(config: ExperimentConfig, model, classes, records,
                    images, bboxes, frame_shape, seed_tag):
    """Per-image LIME and Grad-CAM importance masks in full-frame coordinates.

    Returns {(class_label, method): [mask, ...]} plus the per-image records
    (explanation JSON payloads).
    """
    lime_config = config.lime_config()
    maps = {}
    payloads = []
    for r, img, bbox in zip(records, images, bboxes):
        probs = predict_proba_batch(model, [img])[0]
        predicted = int(probs.argmax())
        label = classes[predicted]

        def blackbox(perturbed):
            return predict_proba_batch(model, [perturbed])[0]

        expl = lime_explain(img, blackbox, predicted, lime_config,
                            derive_rng(config.seed, seed_tag, "lime", r.id))
        lime_mask = explanation_to_mask(expl.features, expl.segments)
        cam = gradcam(model, img, predicted)
        cam_mask = cam_to_mask(cam, config.cam_mask_threshold)
        for method, mask in (("lime", lime_mask), ("gradcam", cam_mask)):
            frame_mask = mask.astype(np.float64)
            if bbox is not None:
                frame_mask = project_to_frame(frame_mask, bbox, frame_shape)
            elif frame_mask.shape != frame_shape:
                from segxplain.imageops import resize_bilinear
                frame_mask = resize_bilinear(frame_mask, *frame_shape)
            maps.setdefault((label, method), []).append(
                np.clip(frame_mask, 0.0, 1.0))
        payloads.append({
            "image_id": r.id,
            "class": label,
            "method": "lime",
            "superpixels": [{"id": sp, "weight": w} for sp, w in expl],
        })
    return maps, payloads


def aggregate_maps(maps, model_id):
    heatmaps = {}
    for (label, method), per_image in sorted(maps.items()):
        heatmaps[(label, method)] = aggregate(per_image, model_id=model_id,
                                              class_label=label, method=method)
    return heatmaps


def strip_mass_fraction(heatmaps, size) -> float:
    """Share of total heatmap mass inside the corner glyph strips, summed
    over all classes and methods of one variant."""
    strips = dataio.glyph_strips(size).astype(bool)
    total = 0.0
    in_strip = 0.0
    for hm in heatmaps.values():
        total += float(hm.values.sum())
        in_strip += float(hm.values[strips].sum())
    return in_strip / total if total > 0 else 0.0


def run_pipeline_comparison(config: ExperimentConfig, data_dir):
    """Train/evaluate/explain both pipeline variants on one corpus.

    Returns a report dict plus the two variants' aggregate heatmaps keyed by
    (variant, class, method).
    """
    corpus = load_corpus(data_dir)
    manifest = corpus.manifest
    if config.mode == "source_bias":
        manifest = dataio.relabel_by_source(manifest)
    manifest, groups = split_records(manifest)
    if not groups["test"]:
        raise ValueError("empty test split")
    classes = sorted({r.class_label for r in manifest})
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes, found {classes}")

    seg_model = None
    if config.mask_source != "ground_truth":
        seg_model = load_model(config.mask_source)

    frame_shape = next(iter(corpus.images.values())).shape
    report = {"classes": classes, "variants": {}}
    all_heatmaps = {}
    f1_by_variant = {}
    for segmented in (False, True):
        name = "segmented" if segmented else "nonsegmented"
        model, history = train_variant(config, classes, groups["train"],
                                       groups["val"] or groups["train"],
                                       corpus, segmented, seg_model)
        test_x, test_bboxes = prepare_variant_inputs(
            groups["test"], corpus, config, segmented, seg_model)
        eval_report, _ = evaluate_variant(model, classes, groups["test"],
                                          test_x)
        maps, payloads = explain_variant(config, model, classes,
                                         groups["test"], test_x, test_bboxes,
                                         frame_shape, name)
        heatmaps = aggregate_maps(maps, model_id=name)
        for key, hm in heatmaps.items():
            all_heatmaps[(name,) + key] = hm
        f1_by_variant[name] = [eval_report.per_class[c]["f1"] for c in classes]
        report["variants"][name] = {
            "f1": {c: eval_report.per_class[c]["f1"] for c in classes},
            "macro_f1": eval_report.macro_f1,
            "evaluation": eval_report.to_json_dict(),
            "final_val_accuracy": history[-1]["val_accuracy"] if history else None,
            "strip_mass_fraction": strip_mass_fraction(heatmaps,
                                                       frame_shape[0]),
            "explanations": payloads,
        }

    wilcoxon = wilcoxon_signed_rank(f1_by_variant["segmented"],
                                    f1_by_variant["nonsegmented"])
    report["wilcoxon"] = {
        "statistic": wilcoxon.statistic,
        "p_value": wilcoxon.p_value,
        "n_effective": wilcoxon.n_effective,
        "degenerate": wilcoxon.degenerate,
    }
    return report, all_heatmaps


def run_generalization_experiment(config: ExperimentConfig, data_dir):
    """Two-fold covid generalization: train on one fold's sources, test on
    the other's, both directions, as a binary covid-vs-negative problem.

    The fold construction keeps every covid source on exactly one side; the
    report carries per-fold covid F1 and ROC AUC plus their means.
    """
    from dataclasses import replace

    from segxplain.classification import roc_auc

    corpus = load_corpus(data_dir)
    folds = dataio.make_generalization_folds(corpus.manifest,
                                             seed=config.seed)
    classes = ["covid19", "negative"]

    def binary(records):
        return [replace(r, split="",
                        class_label="covid19" if r.class_label == "covid19"
                        else "negative")
                for r in records]

    fold_records = [binary(folds.fold1_negatives + folds.fold1_covid),
                    binary(folds.fold2_negatives + folds.fold2_covid)]
    report = {"classes": classes, "folds": []}
    for test_idx in (0, 1):
        train_pool = fold_records[1 - test_idx]
        test_records = fold_records[test_idx]
        order = sorted(range(len(train_pool)),
                       key=lambda i: derive_seed(config.seed, "genval",
                                                 train_pool[i].id))
        n_val = max(1, len(train_pool) // 5)
        val_records = [train_pool[i] for i in order[:n_val]]
        train_records = [train_pool[i] for i in order[n_val:]]
        fold_corpus = Corpus(corpus.manifest, corpus.images, corpus.masks)
        model, history = train_variant(config, classes, train_records,
                                       val_records, fold_corpus,
                                       config.segmented)
        test_x, _ = prepare_variant_inputs(test_records, fold_corpus, config,
                                           config.segmented)
        eval_report, probs = evaluate_variant(model, classes, test_records,
                                              test_x)
        labels = np.array([1 if r.class_label == "covid19" else 0
                           for r in test_records])
        auc = None
        if 0 < labels.sum() < len(labels):
            auc = roc_auc(probs[:, classes.index("covid19")], labels).auc
        report["folds"].append({
            "test_fold": test_idx + 1,
            "n_train": len(train_records),
            "n_test": len(test_records),
            "covid_f1": eval_report.per_class["covid19"]["f1"],
            "auc": auc,
            "evaluation": eval_report.to_json_dict(),
        })
    f1s = [f["covid_f1"] for f in report["folds"]]
    report["mean_covid_f1"] = float(np.mean(f1s))
    aucs = [f["auc"] for f in report["folds"] if f["auc"] is not None]
    report["mean_auc"] = float(np.mean(aucs)) if aucs else None
    return report
