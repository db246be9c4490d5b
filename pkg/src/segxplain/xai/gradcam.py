"""Gradient-weighted class activation maps.

The class score's gradient at the last convolutional layer's activations is
spatially averaged into per-channel weights; the ReLU of the weighted
activation sum, max-normalized and bilinearly upsampled, is the map.
"""

import numpy as np

from segxplain.imageops import resize_bilinear
from segxplain.nn.layers import Activation, backward, forward


class IntegrationError(RuntimeError):
    pass


def cam_source_step(model) -> int:
    """Step whose output is the final conv layer's activation map.

    The raw conv output is the right tap: any downstream relu masks the
    gradient of off units, so spatially averaged weights reflect only
    positions carrying live evidence, and off-unit (negative) activations
    are clipped by the final ReLU of the map itself.
    """
    conv_idx = model.last_conv_index()
    if conv_idx is None:
        raise IntegrationError("model has no convolutional layers")
    return conv_idx


def gradcam(model, image: np.ndarray, target_class: int,
            source_step=None) -> np.ndarray:
    """H x W non-negative map in [0,1] (zero map when nothing supports the
    class), upsampled to the model's input size.

    The class score is the pre-softmax output coordinate (differentiating
    the softmax probability instead vanishes on confident predictions).
    ``source_step`` overrides the activation layer when the default (last
    conv-block output) is not the intended map.
    """
    conv_idx = cam_source_step(model) if source_step is None else source_step
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        x = img[None, None]
    elif img.ndim == 3:
        x = img[None]
    else:
        raise ValueError(f"expected a single image, got shape {img.shape}")
    out, tape = forward(model, x.astype(model.dtype), mode="eval")
    n_classes = out.array.shape[1]
    if not 0 <= target_class < n_classes:
        raise ValueError(f"target class {target_class} outside {n_classes} "
                         f"model outputs")
    score_step = len(model.specs) - 1
    if isinstance(model.specs[score_step], Activation) \
            and model.specs[score_step].kind == "softmax":
        score_step -= 1
    seed = np.zeros((1,) + tuple(model.layer_shapes[score_step]),
                    dtype=model.dtype)
    seed[:, target_class] = 1.0
    backward(tape, seed, start_step=score_step)
    activations = tape.step_outputs[conv_idx][0]          # (C, h, w)
    grads = tape.step_output_grads[conv_idx]
    if grads is None:
        raise IntegrationError("no gradient reached the last conv layer")
    grads = grads[0]
    alpha = grads.mean(axis=(1, 2))                       # (C,)
    cam = np.maximum((alpha[:, None, None] * activations).sum(axis=0), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    size = model.input_shape[1]
    if cam.shape != (size, size):
        cam = np.clip(resize_bilinear(cam, size, size), 0.0, None)
        peak = cam.max()
        if peak > 0:
            cam = cam / peak
    return cam
