"""Lung-field segmentation: U-Net construction and training, mask prediction,
morphological cleanup, ROI cropping, and overlap metrics."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from segxplain.augment import AugmentationConfig, augment
from segxplain.imageops import resize_bilinear
from segxplain.nn import (
    Activation,
    BatchNorm,
    Concat,
    ConfigurationError,
    Conv2D,
    Dropout,
    MaxPool2D,
    Network,
    OptimizerState,
    PlateauSchedule,
    TransposedConv2D,
    backward,
    forward,
    optimizer_step,
    plateau_update,
)
from segxplain.nn.losses import batch_soft_jaccard
from segxplain.rng import derive_rng


class EmptyRoiError(ValueError):
    """Predicted mask has no foreground; the sample needs human review."""


@dataclass
class UNetConfig:
    input_size: int = 64
    depth: int = 3
    base_channels: int = 8
    dropout_rate: float = 0.1
    batchnorm: bool = True
    seed: int = 0
    precision: type = np.float32


@dataclass
class SegTrainConfig:
    epochs: int = 100
    batch_size: int = 16
    initial_lr: float = 0.001
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    seed: int = 0
    optimizer: str = "adam"
    unet: UNetConfig = field(default_factory=UNetConfig)
    target_val_dice: Optional[float] = None  # early stop once reached

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.initial_lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, lr > 0")


@dataclass
class MaskMetrics:
    jaccard_index: float
    jaccard_distance: float
    dice: float


def build_unet(config: UNetConfig) -> Network:
    """Encoder of ``depth`` conv blocks with pooling, a bottleneck, and a
    symmetric transposed-conv decoder with skip concatenations; final 1x1
    conv + sigmoid at input resolution."""
    if config.depth < 1:
        raise ConfigurationError(f"depth must be >= 1, got {config.depth}")
    if config.input_size % (2 ** config.depth):
        raise ConfigurationError(
            f"input_size {config.input_size} not divisible by "
            f"2^depth = {2 ** config.depth}")

    specs = []

    def conv_block(in_ch, out_ch):
        specs.append(Conv2D(in_ch, out_ch, 3, padding=1))
        if config.batchnorm:
            specs.append(BatchNorm(out_ch))
        specs.append(Activation("relu"))
        specs.append(Dropout(config.dropout_rate))
        specs.append(Conv2D(out_ch, out_ch, 3, padding=1))
        if config.batchnorm:
            specs.append(BatchNorm(out_ch))
        specs.append(Activation("relu"))

    skips = []
    ch = 1
    for d in range(config.depth):
        out_ch = config.base_channels * (2 ** d)
        conv_block(ch, out_ch)
        skips.append(len(specs) - 1)
        specs.append(MaxPool2D(2))
        ch = out_ch
    conv_block(ch, ch * 2)
    ch *= 2
    for d in reversed(range(config.depth)):
        out_ch = config.base_channels * (2 ** d)
        specs.append(TransposedConv2D(ch, out_ch, 2, stride=2))
        specs.append(Concat(skips[d]))
        conv_block(2 * out_ch, out_ch)
        ch = out_ch
    specs.append(Conv2D(ch, 1, 1))
    specs.append(Activation("sigmoid"))
    return Network(specs, input_shape=(1, config.input_size, config.input_size),
                   precision=config.precision, seed=config.seed)


# ---------------------------------------------------------------------------
# Prediction and post-processing


def predict_mask(model: Network, image: np.ndarray,
                 threshold: float = 0.5) -> np.ndarray:
    """Binary mask at the model's input resolution; pixels are foreground
    where the sigmoid output is >= threshold."""
    size = model.input_shape[1]
    if image.shape != (size, size):
        image = np.clip(resize_bilinear(image, size, size), 0.0, 1.0)
    out, _ = forward(model, image.astype(model.dtype), mode="eval")
    return (out.array[0, 0] >= threshold).astype(np.uint8)


def disk_element(radius: int) -> np.ndarray:
    """Disk-shaped structuring element: offsets with dy^2+dx^2 <= r^2."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return (dy * dy + dx * dx) <= radius * radius


def scaled_radius(input_size: int, reference_pixels: int = 5,
                  reference_size: int = 400) -> int:
    """The 5-pixel element at the 400px reference resolution, scaled to the
    working size."""
    return max(1, round(reference_pixels * input_size / reference_size))


def _element_offsets(element):
    r = element.shape[0] // 2
    return [(int(dy) - r, int(dx) - r) for dy, dx in np.argwhere(element)]


def binary_erode(mask: np.ndarray, element: np.ndarray) -> np.ndarray:
    """Pixels whose whole (shifted) element fits inside the foreground;
    out-of-frame counts as background."""
    h, w = mask.shape
    out = np.ones((h, w), dtype=bool)
    m = mask.astype(bool)
    for dy, dx in _element_offsets(element):
        shifted = np.zeros((h, w), dtype=bool)
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        src_ys = slice(max(0, dy), min(h, h + dy))
        src_xs = slice(max(0, dx), min(w, w + dx))
        shifted[ys, xs] = m[src_ys, src_xs]
        out &= shifted
    return out.astype(np.uint8)


def binary_dilate(mask: np.ndarray, element: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    m = mask.astype(bool)
    for dy, dx in _element_offsets(element):
        ys = slice(max(0, dy), min(h, h + dy))
        xs = slice(max(0, dx), min(w, w + dx))
        src_ys = slice(max(0, -dy), min(h, h - dy))
        src_xs = slice(max(0, -dx), min(w, w - dx))
        out[ys, xs] |= m[src_ys, src_xs]
    return out.astype(np.uint8)


def postprocess_mask(mask: np.ndarray, open_radius: int,
                     dilate_radius: int) -> np.ndarray:
    """Morphological opening (erosion then dilation) to drop small bright
    spots, then a dilation to grow and smooth the boundary."""
    out = np.asarray(mask, dtype=np.uint8)
    if open_radius > 0:
        element = disk_element(open_radius)
        out = binary_dilate(binary_erode(out, element), element)
    if dilate_radius > 0:
        out = binary_dilate(out, disk_element(dilate_radius))
    return out


def roi_bbox(mask: np.ndarray):
    """Inclusive-exclusive bounding box (y0, y1, x0, x1) of the foreground."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise EmptyRoiError("mask has no foreground pixels")
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def crop_to_roi(image: np.ndarray, mask: np.ndarray, out_size: int):
    """Mask the image, crop to the foreground bounding box, resize square.

    Returns (crop, bbox); the bbox lets downstream consumers project results
    back into the full frame.
    """
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} vs mask {mask.shape}")
    y0, y1, x0, x1 = roi_bbox(mask)
    masked = image * mask
    crop = masked[y0:y1, x0:x1]
    resized = np.clip(resize_bilinear(crop, out_size, out_size), 0.0, 1.0)
    return resized, (y0, y1, x0, x1)


def project_to_frame(patch: np.ndarray, bbox, frame_shape) -> np.ndarray:
    """Inverse of crop_to_roi's geometry for heat/importance maps."""
    y0, y1, x0, x1 = bbox
    out = np.zeros(frame_shape, dtype=np.float64)
    out[y0:y1, x0:x1] = resize_bilinear(patch, y1 - y0, x1 - x0)
    return out


def mask_metrics(predicted: np.ndarray, truth: np.ndarray) -> MaskMetrics:
    """Jaccard index/distance and Dice coefficient; two empty masks score 1
    by convention."""
    p = np.asarray(predicted)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {t.shape}")
    pb = p.astype(bool)
    tb = t.astype(bool)
    inter = int((pb & tb).sum())
    union = int((pb | tb).sum())
    total = int(pb.sum()) + int(tb.sum())
    if union == 0:
        return MaskMetrics(1.0, 0.0, 1.0)
    j = inter / union
    dice = 2.0 * inter / total
    return MaskMetrics(j, 1.0 - j, dice)


# ---------------------------------------------------------------------------
# Training


def _stack_batch(samples, indices, aug_config, seed, epoch):
    xs, ts = [], []
    for idx in indices:
        s = samples[idx]
        if aug_config is not None:
            s = augment(s, aug_config, derive_rng(seed, "aug", epoch, idx))
        xs.append(s.image)
        ts.append(s.mask)
    x = np.stack(xs)[:, None, :, :]
    t = np.stack(ts)[:, None, :, :].astype(np.float64)
    return x, t


def _validate(model, samples, batch_size):
    losses = []
    dices = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = np.stack([s.image for s in chunk])[:, None]
        t = np.stack([s.mask for s in chunk])[:, None].astype(np.float64)
        out, _ = forward(model, x.astype(model.dtype), mode="eval")
        loss, _ = batch_soft_jaccard(out.array, t)
        losses.append(loss * len(chunk))
        pred = (out.array >= 0.5).astype(np.uint8)
        for i in range(len(chunk)):
            dices.append(mask_metrics(pred[i, 0], chunk[i].mask).dice)
    return sum(losses) / len(samples), float(np.mean(dices))


def train_segmenter(train_samples, val_samples, config: SegTrainConfig,
                    aug_config: Optional[AugmentationConfig] = None):
    """Train a U-Net with the soft Jaccard objective.

    Keeps the parameters of the best validation epoch; the learning rate
    follows the plateau schedule on validation loss. Returns (model, history)
    where history holds one record per epoch.
    """
    if not train_samples:
        raise ValueError("empty training dataset")
    for s in train_samples:
        if s.mask is None:
            raise ValueError("all training samples must carry masks")
    if not val_samples:
        val_samples = train_samples

    model = build_unet(config.unet)
    state = OptimizerState(model.parameters(), config.initial_lr,
                           mode=config.optimizer)
    sched = PlateauSchedule(config.initial_lr, patience=config.plateau_patience,
                            factor=config.plateau_factor, min_lr=config.min_lr)
    history = []
    best = (float("inf"), None)
    n = len(train_samples)
    for epoch in range(config.epochs):
        lr_epoch = state.learning_rate
        order = derive_rng(config.seed, "order", epoch).permutation(n)
        batch_losses = []
        for step, start in enumerate(range(0, n, config.batch_size)):
            idxs = order[start:start + config.batch_size]
            x, t = _stack_batch(train_samples, idxs, aug_config,
                                config.seed, epoch)
            out, tape = forward(model, x.astype(model.dtype), mode="train",
                                rng=derive_rng(config.seed, "dropout",
                                               epoch, step))
            loss, grad = batch_soft_jaccard(out.array, t)
            grads = backward(tape, grad)
            optimizer_step(model.parameters(), grads, state)
            batch_losses.append(loss)
        val_loss, val_dice = _validate(model, val_samples, config.batch_size)
        state.learning_rate = plateau_update(sched, val_loss)
        if val_loss < best[0]:
            best = (val_loss, model.copy_state())
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)),
            "val_loss": val_loss,
            "val_dice": val_dice,
            "learning_rate": lr_epoch,
        })
        if config.target_val_dice is not None \
                and val_dice >= config.target_val_dice:
            break
    if best[1] is not None:
        model.load_state(best[1])
    return model, history
