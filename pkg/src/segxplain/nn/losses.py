"""Training objectives: cross-entropy for classification, soft Jaccard for
segmentation. Each loss comes with its analytic gradient so the trainer can
seed the reverse pass."""

import numpy as np

from segxplain.nn.tensor import as_array

PROB_EPS = 1e-7


def _check_one_hot(target):
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("target is not one-hot: entries outside {0,1}")
    if not np.all(target.sum(axis=-1) == 1):
        raise ValueError("target is not one-hot: rows must sum to 1")


def cross_entropy_loss(probabilities, one_hot_target) -> float:
    """Mean negative log-likelihood; probabilities are clamped at 1e-7."""
    p = as_array(probabilities, dtype=np.float64)
    t = as_array(one_hot_target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.ndim == 1:
        p, t = p[None], t[None]
    _check_one_hot(t)
    clamped = np.clip(p, PROB_EPS, 1.0)
    return float(-(t * np.log(clamped)).sum() / p.shape[0])


def cross_entropy_grad(probabilities, one_hot_target) -> np.ndarray:
    """d(loss)/d(probabilities); zero where the clamp is active."""
    p = as_array(probabilities)
    t = as_array(one_hot_target, dtype=p.dtype)
    squeeze = p.ndim == 1
    if squeeze:
        p, t = p[None], t[None]
    _check_one_hot(t)
    clamped = np.clip(p, PROB_EPS, 1.0)
    g = np.where(p > PROB_EPS, -t / clamped, 0.0) / p.shape[0]
    g = g.astype(p.dtype)
    return g[0] if squeeze else g


def _jaccard_terms(predicted, target, smooth):
    inter = float((predicted * target).sum())
    union = float(predicted.sum() + target.sum() - inter)
    return inter + smooth, union + smooth


def soft_jaccard_loss(predicted, target, smooth: float = 1.0) -> float:
    """1 - (|A.B| + s) / (|A|+|B|-|A.B| + s) over the whole tensor."""
    p = as_array(predicted, dtype=np.float64)
    t = as_array(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    num, den = _jaccard_terms(p, t, smooth)
    return float(1.0 - num / den)


def soft_jaccard_grad(predicted, target, smooth: float = 1.0) -> np.ndarray:
    p = as_array(predicted)
    t = as_array(target, dtype=p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    num, den = _jaccard_terms(p.astype(np.float64), t.astype(np.float64), smooth)
    # d(1 - num/den)/dp_i with d(num) = t_i, d(den) = 1 - t_i
    g = -(t * den - num * (1.0 - t)) / (den * den)
    return g.astype(p.dtype)


def batch_soft_jaccard(predicted, target, smooth: float = 1.0):
    """Per-sample soft Jaccard averaged over the leading batch axis.

    Returns (loss, gradient) in one pass; used by the segmentation trainer.
    """
    p = as_array(predicted)
    t = as_array(target, dtype=p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    n = p.shape[0]
    flat_p = p.reshape(n, -1).astype(np.float64)
    flat_t = t.reshape(n, -1).astype(np.float64)
    inter = (flat_p * flat_t).sum(axis=1) + smooth
    union = flat_p.sum(axis=1) + flat_t.sum(axis=1) - (inter - smooth) + smooth
    loss = float((1.0 - inter / union).mean())
    g = -(flat_t * union[:, None] - inter[:, None] * (1.0 - flat_t))
    g /= (union * union)[:, None] * n
    return loss, g.reshape(p.shape).astype(p.dtype)
