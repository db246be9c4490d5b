"""Shared raster helpers: bilinear/nearest resampling and coordinate maps."""

import numpy as np


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-d array with bilinear interpolation (half-pixel centers)."""
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.astype(np.float64, copy=True)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    return sample_bilinear(image, *np.meshgrid(ys, xs, indexing="ij"))


def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape
    ys = np.clip(((np.arange(out_h) + 0.5) * (h / out_h) - 0.5).round(), 0, h - 1)
    xs = np.clip(((np.arange(out_w) + 0.5) * (w / out_w) - 0.5).round(), 0, w - 1)
    return image[ys.astype(int)][:, xs.astype(int)].copy()


def sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                    fill: float = 0.0) -> np.ndarray:
    """Sample ``image`` at float coordinates; outside pixels read ``fill``."""
    h, w = image.shape
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros(ys.shape, dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.where(inside, image[np.clip(yy, 0, h - 1),
                                          np.clip(xx, 0, w - 1)], fill)
            out += wy * wx * vals
    return out


def sample_nearest(image: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                   fill: float = 0.0) -> np.ndarray:
    h, w = image.shape
    yy = np.round(ys).astype(int)
    xx = np.round(xs).astype(int)
    inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
    return np.where(inside, vals, fill).astype(image.dtype)
