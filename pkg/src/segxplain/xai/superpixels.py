"""Quickshift superpixel segmentation.

Mode seeking over joint (intensity, position) features: every pixel gets a
kernel density estimate, then links to its nearest strictly-higher-density
neighbor within ``max_dist`` (feature distance). The resulting forest's roots
define segments. Ties in density are broken by scan order so the forest is
well-defined on flat regions (a constant image collapses to one segment).

Post-processing guarantees the advertised invariants: every label's pixel set
is 4-connected, segments smaller than 4 pixels merge into their most similar
neighbor, and labels are renumbered 0..K-1 by first row-major occurrence.
"""

import math

import numpy as np
from scipy import ndimage

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
MIN_SEGMENT_PIXELS = 4


def _density(image, kernel_size, ratio):
    h, w = image.shape
    radius = int(math.ceil(3.0 * kernel_size))
    density = np.zeros((h, w))
    inv = 1.0 / (2.0 * kernel_size * kernel_size)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            spatial = dy * dy + dx * dx
            if spatial > radius * radius:
                continue
            ys = slice(max(0, dy), min(h, h + dy))
            xs = slice(max(0, dx), min(w, w + dx))
            src_ys = slice(max(0, -dy), min(h, h - dy))
            src_xs = slice(max(0, -dx), min(w, w - dx))
            diff = image[ys, xs] - image[src_ys, src_xs]
            d2 = (ratio * ratio) * diff * diff + spatial
            density[ys, xs] += np.exp(-d2 * inv)
    return density


def _link_parents(image, density, max_dist, ratio):
    """Index of each pixel's parent (itself for roots).

    "Higher" uses the total order (density, then earlier scan position), so
    flat plateaus chain deterministically instead of fragmenting.
    """
    h, w = image.shape
    n = h * w
    scan = np.arange(n).reshape(h, w)
    best_dist = np.full((h, w), np.inf)
    parent = scan.copy()
    radius = int(math.floor(max_dist))
    offsets = [(dy, dx) for dy in range(-radius, radius + 1)
               for dx in range(-radius, radius + 1)
               if (dy, dx) != (0, 0) and dy * dy + dx * dx <= max_dist ** 2]
    for dy, dx in offsets:
        ys = slice(max(0, dy), min(h, h + dy))
        xs = slice(max(0, dx), min(w, w + dx))
        src_ys = slice(max(0, -dy), min(h, h - dy))
        src_xs = slice(max(0, -dx), min(w, w - dx))
        diff = image[ys, xs] - image[src_ys, src_xs]
        d2 = (ratio * ratio) * diff * diff + (dy * dy + dx * dx)
        higher = density[src_ys, src_xs] > density[ys, xs]
        tie = (density[src_ys, src_xs] == density[ys, xs]) \
            & (scan[src_ys, src_xs] < scan[ys, xs])
        eligible = (higher | tie) & (d2 <= max_dist ** 2) \
            & (d2 < best_dist[ys, xs])
        dist_block = best_dist[ys, xs]
        dist_block[eligible] = d2[eligible]
        best_dist[ys, xs] = dist_block
        parent_block = parent[ys, xs]
        parent_block[eligible] = scan[src_ys, src_xs][eligible]
        parent[ys, xs] = parent_block
    return parent.reshape(-1)


def _resolve_roots(parent):
    roots = parent.copy()
    while True:
        nxt = roots[roots]
        if np.array_equal(nxt, roots):
            return roots
        roots = nxt


def _mean_intensity(image, labels):
    flat = labels.reshape(-1)
    sums = np.bincount(flat, weights=image.reshape(-1))
    counts = np.bincount(flat)
    means = np.zeros_like(sums)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz]
    return means, counts


def _adjacent_pairs(labels):
    """Set of 4-adjacent (label_a, label_b) pairs, both orientations."""
    pairs = set()
    a, b = labels[:, :-1], labels[:, 1:]
    for la, lb in zip(a[a != b], b[a != b]):
        pairs.add((int(la), int(lb)))
        pairs.add((int(lb), int(la)))
    a, b = labels[:-1, :], labels[1:, :]
    for la, lb in zip(a[a != b], b[a != b]):
        pairs.add((int(la), int(lb)))
        pairs.add((int(lb), int(la)))
    return pairs


def _merge_into_neighbors(image, labels, victims):
    """Merge every label in ``victims`` into its most intensity-similar
    4-adjacent neighbor (deterministic tie-break on label id)."""
    means, _ = _mean_intensity(image, labels)
    adjacency = {}
    for a, b in _adjacent_pairs(labels):
        adjacency.setdefault(a, set()).add(b)
    relabel = np.arange(means.size)
    for victim in sorted(victims):
        neighbors = sorted(adjacency.get(victim, ()))
        candidates = [v for v in neighbors if v not in victims]
        if not candidates:
            candidates = [v for v in neighbors if v != victim]
        if not candidates:
            continue
        best = min(candidates,
                   key=lambda v: (abs(means[v] - means[victim]), v))
        relabel[victim] = best
    # collapse chains (victim merged into victim)
    for _ in range(len(victims)):
        nxt = relabel[relabel]
        if np.array_equal(nxt, relabel):
            break
        relabel = nxt
    return relabel[labels]


def _split_disconnected(labels):
    """Give each 4-connected component its own label."""
    out = np.full(labels.shape, -1, dtype=np.int64)
    next_label = 0
    for lab in np.unique(labels):
        comp, ncomp = ndimage.label(labels == lab, structure=FOUR_CONNECTED)
        for c in range(1, ncomp + 1):
            out[comp == c] = next_label
            next_label += 1
    return out


def _relabel_by_first_occurrence(labels):
    flat = labels.reshape(-1)
    mapping = {}
    out = np.empty_like(flat)
    for i, lab in enumerate(flat):
        key = int(lab)
        if key not in mapping:
            mapping[key] = len(mapping)
        out[i] = mapping[key]
    return out.reshape(labels.shape)


def quickshift(image: np.ndarray, kernel_size: float = 4.0,
               max_dist: float = 8.0, ratio: float = 1.0) -> np.ndarray:
    """Segment a grayscale image into superpixels; returns an int label map
    with contiguous labels ordered by first row-major occurrence."""
    if kernel_size <= 0:
        raise ValueError(f"kernel_size must be positive, got {kernel_size}")
    if max_dist <= 0:
        raise ValueError(f"max_dist must be positive, got {max_dist}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {img.shape}")
    density = _density(img, kernel_size, ratio)
    parent = _link_parents(img, density, max_dist, ratio)
    labels = _resolve_roots(parent).reshape(img.shape)
    labels = _split_disconnected(labels)
    for _ in range(16):  # merge+split to a fixed point
        _, counts = _mean_intensity(img, labels)
        small = {int(lab) for lab in np.nonzero(
            (counts > 0) & (counts < MIN_SEGMENT_PIXELS))[0]}
        if not small or len(small) >= int((counts > 0).sum()):
            break
        labels = _merge_into_neighbors(img, labels, small)
        labels = _split_disconnected(labels)  # merges can bridge regions
    return _relabel_by_first_occurrence(labels)


def segment_count(labels: np.ndarray) -> int:
    return int(labels.max()) + 1
