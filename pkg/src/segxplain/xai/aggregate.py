"""Reduction of per-image explanations into corpus-level heatmaps."""

from dataclasses import dataclass

import numpy as np


@dataclass
class AggregateHeatmap:
    values: np.ndarray  # H x W in [0,1]
    model_id: str
    class_label: str
    method: str
    n_images: int


def explanation_to_mask(explanation, superpixel_map: np.ndarray) -> np.ndarray:
    """Union of the explanation's superpixels as a binary mask."""
    k = int(superpixel_map.max()) + 1
    mask = np.zeros(superpixel_map.shape, dtype=np.uint8)
    for sp_id, _weight in explanation:
        if not 0 <= sp_id < k:
            raise ValueError(f"unknown superpixel id {sp_id} "
                             f"(map has {k} segments)")
        mask[superpixel_map == sp_id] = 1
    return mask


def cam_to_mask(cam: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where the normalized map reaches ``threshold`` of its max."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {threshold}")
    return (np.asarray(cam) >= threshold).astype(np.uint8)


def aggregate(per_image_maps, model_id="", class_label="", method="",
              ) -> AggregateHeatmap:
    """Pixel-wise mean of binary masks or normalized maps."""
    maps = [np.asarray(m, dtype=np.float64) for m in per_image_maps]
    if not maps:
        raise ValueError("aggregate needs at least one map")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ValueError(f"map shape {m.shape} != {shape}")
    values = np.mean(np.stack(maps), axis=0)
    return AggregateHeatmap(values, model_id, class_label, method, len(maps))
