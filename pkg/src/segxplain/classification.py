"""Image classification: backbone+head models, two-phase training,
evaluation metrics, ROC/AUC and the paired Wilcoxon signed-rank test."""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from segxplain.augment import AugmentationConfig, PairedSample, augment
from segxplain.imageops import resize_bilinear
from segxplain.nn import (
    Activation,
    BatchNorm,
    ConfigurationError,
    Conv2D,
    Dense,
    Dropout,
    MaxPool2D,
    Network,
    OptimizerState,
    PlateauSchedule,
    backward,
    forward,
    optimizer_step,
    plateau_update,
)
from segxplain.nn.losses import cross_entropy_grad, cross_entropy_loss
from segxplain.rng import derive_rng


@dataclass
class ClassifierConfig:
    input_size: int = 64
    backbone_blocks: int = 3
    base_channels: int = 8
    head_sizes: tuple = (1024, 1024, 512)
    dropout_rate: float = 0.3
    seed: int = 0
    precision: type = np.float32


@dataclass
class TrainSchedule:
    warmup_epochs: int = 50
    finetune_epochs: int = 100
    batch_size: int = 40
    warmup_lr: float = 0.001
    finetune_lr: float = 0.0001
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    min_lr: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.warmup_lr <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


def build_classifier(config: ClassifierConfig, n_classes: int) -> Network:
    """Conv backbone (freezable) plus the fixed-width dense head ending in a
    softmax over ``n_classes``."""
    if n_classes < 2:
        raise ConfigurationError(f"n_classes must be >= 2, got {n_classes}")
    size = config.input_size
    if size % (2 ** config.backbone_blocks):
        raise ConfigurationError(
            f"input_size {size} not divisible by 2^{config.backbone_blocks}")
    specs = []
    groups = {}
    ch = 1
    spatial = size
    for b in range(config.backbone_blocks):
        out_ch = config.base_channels * (2 ** b)
        for spec in (Conv2D(ch, out_ch, 3, padding=1), BatchNorm(out_ch),
                     Activation("relu"), MaxPool2D(2)):
            groups[len(specs)] = "backbone"
            specs.append(spec)
        ch = out_ch
        spatial //= 2
    features = ch * spatial * spatial
    for width in config.head_sizes:
        specs.append(Dense(features, width))
        specs.append(Dropout(config.dropout_rate))
        specs.append(BatchNorm(width))
        specs.append(Activation("relu"))
        features = width
    specs.append(Dense(features, n_classes))
    specs.append(Activation("softmax"))
    return Network(specs, input_shape=(1, size, size),
                   precision=config.precision, seed=config.seed, groups=groups)


def backbone_parameter_names(model: Network):
    return [p.name for p in model.parameters()
            if p.group == "backbone" and not p.is_buffer]


def predict_proba(model: Network, image: np.ndarray) -> np.ndarray:
    """Class probability vector for one image (resized if needed)."""
    size = model.input_shape[1]
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {img.shape}")
    if img.shape != (size, size):
        img = np.clip(resize_bilinear(img, size, size), 0.0, 1.0)
    out, _ = forward(model, img.astype(model.dtype), mode="eval")
    return out.array[0]


def predict_proba_batch(model: Network, images) -> np.ndarray:
    x = np.stack([np.asarray(i) for i in images])[:, None]
    out, _ = forward(model, x.astype(model.dtype), mode="eval")
    return out.array


# ---------------------------------------------------------------------------
# Two-phase training


def _one_hot(labels, classes):
    index = {c: i for i, c in enumerate(classes)}
    out = np.zeros((len(labels), len(classes)))
    for i, lab in enumerate(labels):
        if lab not in index:
            raise ValueError(f"label {lab!r} outside class set {classes}")
        out[i, index[lab]] = 1.0
    return out


def _run_phase(model, phase, epochs, lr, schedule, classes, train_data,
               val_data, aug_config, history):
    if epochs == 0:
        return
    images, labels = train_data
    targets = _one_hot(labels, classes)
    state = OptimizerState(model.parameters(), lr)
    sched = PlateauSchedule(lr, patience=schedule.plateau_patience,
                            factor=schedule.plateau_factor,
                            min_lr=schedule.min_lr)
    n = len(images)
    for epoch in range(epochs):
        lr_epoch = state.learning_rate
        order = derive_rng(schedule.seed, phase, "order", epoch).permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, schedule.batch_size)):
            idxs = order[start:start + schedule.batch_size]
            xs = []
            for i in idxs:
                img = images[i]
                if aug_config is not None:
                    img = augment(PairedSample(np.asarray(img, dtype=np.float64)),
                                  aug_config,
                                  derive_rng(schedule.seed, phase, "aug",
                                             epoch, int(i))).image
                xs.append(img)
            x = np.stack(xs)[:, None]
            t = targets[idxs]
            out, tape = forward(model, x.astype(model.dtype), mode="train",
                                rng=derive_rng(schedule.seed, phase, "dropout",
                                               epoch, step))
            losses.append(cross_entropy_loss(out.array, t))
            grads = backward(tape, cross_entropy_grad(out.array, t))
            optimizer_step(model.parameters(), grads, state)
        val_loss, val_acc = _validate(model, classes, val_data,
                                      schedule.batch_size)
        state.learning_rate = plateau_update(sched, val_loss)
        history.append({
            "phase": phase,
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "learning_rate": lr_epoch,
        })


def _validate(model, classes, val_data, batch_size):
    images, labels = val_data
    targets = _one_hot(labels, classes)
    losses = []
    correct = 0
    for start in range(0, len(images), batch_size):
        x = np.stack(list(images[start:start + batch_size]))[:, None]
        t = targets[start:start + batch_size]
        out, _ = forward(model, x.astype(model.dtype), mode="eval")
        losses.append(cross_entropy_loss(out.array, t) * len(t))
        correct += int((out.array.argmax(axis=1) == t.argmax(axis=1)).sum())
    return sum(losses) / len(images), correct / len(images)


def train_two_phase(model: Network, classes, train_data, val_data,
                    schedule: TrainSchedule,
                    aug_config: Optional[AugmentationConfig] = None):
    """Warm-up (backbone frozen) then fine-tune (everything trainable, lower
    lr). History records are tagged by phase. Returns (model, history)."""
    images, labels = train_data
    if len(images) == 0:
        raise ValueError("empty training dataset")
    present = set(labels)
    missing = [c for c in classes if c not in present]
    if missing:
        raise ValueError(f"empty class(es) in training data: {missing}")

    history = []
    model.freeze("backbone")
    try:
        _run_phase(model, "warmup", schedule.warmup_epochs, schedule.warmup_lr,
                   schedule, classes, train_data, val_data, aug_config,
                   history)
    finally:
        model.unfreeze_all()
    _run_phase(model, "finetune", schedule.finetune_epochs,
               schedule.finetune_lr, schedule, classes, train_data, val_data,
               aug_config, history)
    return model, history


# ---------------------------------------------------------------------------
# Evaluation metrics


@dataclass
class EvaluationReport:
    classes: list
    confusion: list          # rows = truth, cols = predicted
    per_class: dict          # label -> {tp, fp, fn, precision, recall, f1}
    macro_f1: float
    macro_excluded: list = field(default_factory=list)

    def to_json_dict(self):
        return {"confusion": self.confusion, "per_class": self.per_class,
                "macro_f1": self.macro_f1, "classes": list(self.classes),
                "macro_excluded": list(self.macro_excluded)}


def evaluate(predictions, truths, classes, macro_exclude=()) -> EvaluationReport:
    """Confusion matrix and one-vs-rest precision/recall/F1 per class.

    ``macro_exclude`` drops classes from the macro average (the bias probe
    reports macro over Cohen and RSNA only); 0/0 ratios are defined as 0.
    """
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths must have equal length")
    index = {c: i for i, c in enumerate(classes)}
    for seq_name, seq in (("prediction", predictions), ("truth", truths)):
        for lab in seq:
            if lab not in index:
                raise ValueError(f"{seq_name} label {lab!r} outside class set")
    k = len(classes)
    confusion = [[0] * k for _ in range(k)]
    for p, t in zip(predictions, truths):
        confusion[index[t]][index[p]] += 1
    per_class = {}
    f1_for_macro = []
    for c in classes:
        i = index[c]
        tp = confusion[i][i]
        fp = sum(confusion[r][i] for r in range(k)) - tp
        fn = sum(confusion[i]) - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        per_class[c] = {"tp": tp, "fp": fp, "fn": fn, "precision": precision,
                        "recall": recall, "f1": f1}
        if c not in macro_exclude:
            f1_for_macro.append(f1)
    macro = float(np.mean(f1_for_macro)) if f1_for_macro else 0.0
    return EvaluationReport(list(classes), confusion, per_class, macro,
                            list(macro_exclude))


def report_text(report: EvaluationReport) -> str:
    """Aligned plain-text rendering of an evaluation report."""
    width = max(len(c) for c in report.classes) + 2
    lines = ["confusion (rows=truth, cols=predicted):"]
    header = " " * width + "".join(f"{c:>{width}}" for c in report.classes)
    lines.append(header)
    for c, row in zip(report.classes, report.confusion):
        lines.append(f"{c:>{width}}" + "".join(f"{v:>{width}}" for v in row))
    lines.append("")
    lines.append(f"{'class':>{width}}{'precision':>12}{'recall':>12}{'f1':>12}")
    for c in report.classes:
        m = report.per_class[c]
        lines.append(f"{c:>{width}}{m['precision']:>12.4f}"
                     f"{m['recall']:>12.4f}{m['f1']:>12.4f}")
    suffix = (f" (excluding {', '.join(report.macro_excluded)})"
              if report.macro_excluded else "")
    lines.append(f"macro-F1{suffix}: {report.macro_f1:.4f}")
    return "\n".join(lines)


@dataclass
class RocCurve:
    points: list  # (fpr, tpr), threshold sweep from +inf down
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """ROC from a threshold sweep; AUC equals the probability that a random
    positive outscores a random negative with ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    npos = int((y == 1).sum())
    nneg = int((y == 0).sum())
    if npos == 0 or nneg == 0:
        raise ValueError("roc_auc needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    auc = 0.0
    prev_fpr, prev_tpr = 0.0, 0.0
    i = 0
    n = len(s_sorted)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:  # tie group
            j += 1
        tp += int((y_sorted[i:j] == 1).sum())
        fp += int((y_sorted[i:j] == 0).sum())
        fpr = fp / nneg
        tpr = tp / npos
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0
        points.append((fpr, tpr))
        prev_fpr, prev_tpr = fpr, tpr
        i = j
    return RocCurve(points, float(auc))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test


@dataclass
class WilcoxonResult:
    statistic: float   # smaller of the signed-rank sums
    p_value: float
    n_effective: int
    degenerate: bool = False


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j < len(values) and values[order[j]] == values[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    return ranks


def _exact_wplus_distribution(doubled_ranks):
    """Counts of each achievable doubled W+ over all 2^n sign assignments."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(paired_a, paired_b) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped. The null distribution is exact (computed by
    convolution over rank sums) for n_effective <= 25 and a tie-corrected
    normal approximation above. All differences zero gives the degenerate
    result p=1.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length vectors")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, degenerate=True)
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if n <= 25:
        doubled = np.rint(ranks * 2).astype(int)
        counts = _exact_wplus_distribution(doubled)
        total = counts.sum()
        k = int(round(w_plus * 2))
        p_le = counts[:k + 1].sum() / total
        p_ge = counts[k:].sum() / total
        p = min(1.0, 2.0 * min(p_le, p_ge))
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var -= (tie_counts ** 3 - tie_counts).sum() / 48.0
        z = (w_plus - mean) / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(w, float(p), n)
