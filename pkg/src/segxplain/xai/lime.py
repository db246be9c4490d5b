"""Model-agnostic local surrogate explanations.

The image is partitioned into superpixels; binary on/off perturbations of the
superpixels are rendered (off regions read the image mean), scored by the
black box, kernel-weighted by cosine distance from the unperturbed vector,
and a weighted ridge regression over the on/off indicators yields per-
superpixel importance. The explanation is the top positive-weight
superpixels.
"""

from dataclasses import dataclass, field

import numpy as np

from segxplain.xai.superpixels import quickshift


class BlackboxError(RuntimeError):
    """The black box returned something other than a probability vector."""


# coefficients below this are regression noise, not support for the class
POSITIVE_WEIGHT_FLOOR = 1e-8


@dataclass
class LimeConfig:
    kernel_size: float = 4.0
    max_dist: float = 8.0   # 2 * kernel_size
    ratio: float = 1.0
    distance_metric: str = "cosine"
    n_samples: int = 1000
    n_features: int = 5
    positive_only: bool = True
    kernel_width: float = 0.25
    ridge_lambda: float = 1.0

    def __post_init__(self):
        if self.distance_metric != "cosine":
            raise ValueError(f"only the cosine distance is implemented, got "
                             f"{self.distance_metric!r}")
        if self.n_samples < 10:
            raise ValueError(f"n_samples must be >= 10, got {self.n_samples}")
        if self.n_features < 1:
            raise ValueError(f"n_features must be >= 1, got {self.n_features}")


@dataclass
class Explanation:
    features: list            # (superpixel id, weight), descending weight
    segments: np.ndarray      # the superpixel map the ids refer to
    target_class: int
    all_weights: np.ndarray = field(repr=False, default=None)

    def __iter__(self):
        return iter(self.features)

    def __len__(self):
        return len(self.features)


def cosine_distance_from_ones(z: np.ndarray) -> float:
    """1 - cos(z, all-ones) for a binary vector; the zero vector is at
    distance 1 by convention."""
    on = z.sum()
    if on == 0:
        return 1.0
    return 1.0 - np.sqrt(on / z.size)


def weighted_ridge(X, y, sample_weights, lam):
    """Ridge fit with unpenalized intercept; returns coefficient vector."""
    Xa = np.column_stack([X, np.ones(len(X))])
    W = sample_weights[:, None]
    gram = Xa.T @ (W * Xa)
    reg = lam * np.eye(Xa.shape[1])
    reg[-1, -1] = 0.0  # intercept not shrunk
    beta = np.linalg.solve(gram + reg, Xa.T @ (sample_weights * y))
    return beta[:-1]


def lime_explain(image: np.ndarray, blackbox, target_class: int,
                 config: LimeConfig, rng) -> Explanation:
    """Explain ``blackbox``'s target-class probability on ``image``.

    The black box is called exactly once per perturbed sample (the all-ones
    vector plus ``n_samples`` iid binary draws).
    """
    segments = quickshift(image, config.kernel_size, config.max_dist,
                          config.ratio)
    k = int(segments.max()) + 1
    rows = np.vstack([np.ones((1, k), dtype=np.int64),
                      rng.integers(0, 2, size=(config.n_samples, k))])
    fill = float(image.mean())
    seg_flat = segments.reshape(-1)

    responses = np.empty(len(rows))
    for i, z in enumerate(rows):
        off = ~z.astype(bool)[seg_flat].reshape(image.shape)
        perturbed = np.where(off, fill, image)
        out = np.asarray(blackbox(perturbed), dtype=np.float64)
        if out.ndim != 1 or np.any(out < -1e-9) \
                or abs(out.sum() - 1.0) > 1e-6:
            raise BlackboxError("blackbox must return a probability vector "
                                f"(got shape {out.shape})")
        if not 0 <= target_class < out.size:
            raise BlackboxError(f"target class {target_class} outside the "
                                f"blackbox's {out.size} outputs")
        responses[i] = out[target_class]

    distances = np.array([cosine_distance_from_ones(z) for z in rows])
    weights = np.exp(-(distances ** 2) / (config.kernel_width ** 2))
    coef = weighted_ridge(rows.astype(np.float64), responses, weights,
                          config.ridge_lambda)

    order = np.argsort(-coef, kind="stable")
    chosen = []
    for idx in order:
        if len(chosen) == config.n_features:
            break
        if config.positive_only and coef[idx] <= POSITIVE_WEIGHT_FLOOR:
            break
        chosen.append((int(idx), float(coef[idx])))
    return Explanation(chosen, segments, target_class, all_weights=coef)
