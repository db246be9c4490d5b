"""Dataset catalogs, constrained splitting, image persistence and the
synthetic corpus generator.

Images and masks are stored as 8-bit binary PGM (P5); heatmaps as
little-endian PFM. The synthetic corpus paints two bright "lung" ellipses on
a textured background, optional in-lung opacity blobs, and (when biased)
class-correlated annotation glyphs in the top corners -- the desk-scale stand
in for burned-in radiograph annotations.
"""

import csv
import io
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from segxplain.rng import derive_rng, derive_seed

SOURCES = ("cohen", "rsna", "actualmed", "figure1", "radiopedia", "euroad",
           "hamimi", "bontrager", "other")
CLASS_LABELS = ("lung_opacity", "covid19", "normal",
                # labels produced by relabel_by_source for the bias probe
                "cohen", "rsna", "other")
PROJECTIONS = ("PA", "AP", "AP_portable")
SPLITS = ("train", "val", "test")

MANIFEST_HEADER = ["id", "image_path", "patient_id", "source", "class_label",
                   "projection"]


class ManifestError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class SampleRecord:
    id: str
    image_path: str
    patient_id: str
    source: str
    class_label: str
    projection: str
    split: str = ""
    original_label: str = ""  # kept in memory by relabel_by_source


@dataclass
class Manifest:
    records: list

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate id {r.id!r}")
            seen.add(r.id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, rid):
        for r in self.records:
            if r.id == rid:
                return r
        raise KeyError(rid)


@dataclass
class SplitSpec:
    test_fraction: float = 0.20
    val_fraction: float = 0.20  # of the training portion
    seed: int = 0
    group_patients: bool = True

    def __post_init__(self):
        for f in (self.test_fraction, self.val_fraction):
            if not 0.0 < f < 1.0:
                raise ValueError(f"fractions must be in (0,1), got {f}")


# ---------------------------------------------------------------------------
# Manifest CSV


def load_manifest(path, check_files=True) -> Manifest:
    records = []
    seen = set()
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected header")
        has_split = header == MANIFEST_HEADER + ["split"]
        if not has_split and header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} "
                                    f"fields, got {len(row)}")
            rid, image_path, patient, source, label, projection = row[:6]
            split = row[6] if has_split else ""
            if rid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            if source not in SOURCES:
                raise ManifestError(f"{path}:{lineno}: unknown source {source!r}")
            if label not in CLASS_LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown class_label {label!r}")
            if projection not in PROJECTIONS:
                raise ManifestError(f"{path}:{lineno}: unknown projection "
                                    f"{projection!r}")
            if split and split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            if check_files:
                full = os.path.join(base, image_path)
                if not os.path.exists(full):
                    raise ManifestError(f"{path}:{lineno}: missing image file "
                                        f"{image_path}")
            records.append(SampleRecord(rid, image_path, patient, source,
                                        label, projection, split))
    return Manifest(records)


def save_manifest(path, manifest: Manifest) -> None:
    has_split = any(r.split for r in manifest)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = MANIFEST_HEADER + (["split"] if has_split else [])
        writer.writerow(header)
        for r in manifest:
            row = [r.id, r.image_path, r.patient_id, r.source, r.class_label,
                   r.projection]
            if has_split:
                row.append(r.split)
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Constrained splitting


def constrained_split(manifest: Manifest, spec: SplitSpec) -> dict:
    """Assign each record id to train/val/test.

    Greedy deficit rule: patient groups (largest first, ties broken by a
    seeded hash of the patient id) go to the split whose (class, source)
    cells are furthest below their target share. Patients never straddle
    splits; a patient group larger than the whole test target is forced into
    train with a warning.
    """
    records = list(manifest)
    n = len(records)
    fractions = {
        "train": (1 - spec.test_fraction) * (1 - spec.val_fraction),
        "val": (1 - spec.test_fraction) * spec.val_fraction,
        "test": spec.test_fraction,
    }
    totals = {}
    for r in records:
        cell = (r.class_label, r.source)
        totals[cell] = totals.get(cell, 0) + 1
    target = {s: {cell: fractions[s] * c for cell, c in totals.items()}
              for s in SPLITS}
    current = {s: {cell: 0.0 for cell in totals} for s in SPLITS}

    groups = {}
    for r in records:
        key = r.patient_id if spec.group_patients else r.id
        groups.setdefault(key, []).append(r)
    ordered = sorted(groups.items(),
                     key=lambda kv: (-len(kv[1]),
                                     derive_seed(spec.seed, "split", kv[0])))

    test_capacity = spec.test_fraction * n
    assignment = {}
    for patient, group in ordered:
        if len(group) > test_capacity:
            warnings.warn(f"patient {patient!r} has {len(group)} records, "
                          f"larger than the test target; forcing into train")
            chosen = "train"
        else:
            deficits = {}
            for s in SPLITS:
                deficits[s] = sum(target[s][(r.class_label, r.source)]
                                  - current[s][(r.class_label, r.source)]
                                  for r in group)
            chosen = max(SPLITS, key=lambda s: (deficits[s], s))
        for r in group:
            assignment[r.id] = chosen
            current[chosen][(r.class_label, r.source)] += 1
    return assignment


def apply_split(manifest: Manifest, assignment: dict) -> Manifest:
    return Manifest([replace(r, split=assignment[r.id]) for r in manifest])


# ---------------------------------------------------------------------------
# Generalization folds and the source-bias relabeling


@dataclass
class GeneralizationFolds:
    fold1_negatives: list
    fold1_covid: list
    fold2_negatives: list
    fold2_covid: list


def make_generalization_folds(manifest: Manifest, seed=0) -> GeneralizationFolds:
    """Two covid-generalization folds.

    Fold 1 holds every covid record of the largest covid source plus that
    source's negatives and half of the shared negative pool (the largest
    source without covid records, split by seeded patient halves); fold 2
    holds the remaining covid sources, their negatives, the other sources'
    negatives and the other half of the pool.
    """
    covid_by_source = {}
    for r in manifest:
        if r.class_label == "covid19":
            covid_by_source.setdefault(r.source, []).append(r)
    if len(covid_by_source) < 2:
        raise ManifestError("covid19 records present in fewer than 2 sources; "
                            "cannot build generalization folds")
    main = max(sorted(covid_by_source), key=lambda s: len(covid_by_source[s]))

    negatives = [r for r in manifest if r.class_label != "covid19"]
    neg_only_counts = {}
    for r in negatives:
        if r.source not in covid_by_source:
            neg_only_counts[r.source] = neg_only_counts.get(r.source, 0) + 1
    pool_source = None
    if neg_only_counts:
        pool_source = max(sorted(neg_only_counts), key=lambda s: neg_only_counts[s])

    fold1_neg, fold2_neg = [], []
    pool = []
    for r in negatives:
        if r.source == main:
            fold1_neg.append(r)
        elif r.source == pool_source:
            pool.append(r)
        else:
            fold2_neg.append(r)

    # split the shared pool by patient halves
    patients = sorted({r.patient_id for r in pool})
    order = sorted(patients, key=lambda p: derive_seed(seed, "genfold", p))
    by_patient = {}
    for r in pool:
        by_patient.setdefault(r.patient_id, []).append(r)
    half = len(pool) // 2
    taken = 0
    first_half = set()
    for p in order:
        if taken >= half:
            break
        first_half.add(p)
        taken += len(by_patient[p])
    for r in pool:
        (fold1_neg if r.patient_id in first_half else fold2_neg).append(r)

    fold1_cov = list(covid_by_source[main])
    fold2_cov = [r for s, rs in sorted(covid_by_source.items())
                 if s != main for r in rs]
    return GeneralizationFolds(fold1_neg, fold1_cov, fold2_neg, fold2_cov)


def relabel_by_source(manifest: Manifest) -> Manifest:
    """Replace class labels with source labels (cohen/rsna/other)."""
    out = []
    for r in manifest:
        new_label = r.source if r.source in ("cohen", "rsna") else "other"
        original = r.original_label or r.class_label
        out.append(replace(r, class_label=new_label, original_label=original))
    return Manifest(out)


# ---------------------------------------------------------------------------
# PGM / PFM persistence


def _read_pgm_header(buf, path):
    pos = 0

    def token():
        nonlocal pos
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":  # comment line
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            return token()
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {start}")
        return buf[start:pos], start

    magic, off = token()
    if magic != b"P5":
        raise FormatError(f"{path}: bad magic {magic!r} at byte {off}")
    fields = []
    for what in ("width", "height", "maxval"):
        tok, off = token()
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"{path}: bad {what} {tok!r} at byte {off}")
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    return w, h, pos


def save_pgm(path, values: np.ndarray) -> None:
    """Write a 2-d array as 8-bit P5. Floats in [0,1] are scaled to 0..255;
    integer arrays are written as-is."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    else:
        data = arr.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def decode_pgm(buf: bytes, origin: str = "<bytes>") -> np.ndarray:
    w, h, offset = _read_pgm_header(buf, origin)
    expected = w * h
    raw = buf[offset:offset + expected]
    if len(raw) != expected:
        raise FormatError(f"{origin}: expected {expected} pixel bytes at byte "
                          f"{offset}, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


def load_pgm_bytes(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_pgm(buf, str(path))


def load_image(path, size=None) -> np.ndarray:
    """8-bit PGM -> float image in [0,1], optionally resized to size x size."""
    from segxplain.imageops import resize_bilinear

    img = load_pgm_bytes(path).astype(np.float64) / 255.0
    if size is not None and img.shape != (size, size):
        img = np.clip(resize_bilinear(img, size, size), 0.0, 1.0)
    return img


def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask is not binary")
    save_pgm(path, (m * 255).astype(np.uint8))


def load_mask(path) -> np.ndarray:
    return (load_pgm_bytes(path) >= 128).astype(np.uint8)


def save_heatmap(path, values: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0), rows bottom to top."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"PFM needs a 2-d array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(arr[::-1].tobytes())


def load_heatmap(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    lines = buf.split(b"\n", 3)
    if len(lines) < 4:
        raise FormatError(f"{path}: truncated PFM header")
    magic, dims, scale_s, rest = lines
    if magic != b"Pf":
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    try:
        w, h = (int(t) for t in dims.split())
        scale = float(scale_s)
    except ValueError:
        raise FormatError(f"{path}: bad PFM header at byte {len(magic) + 1}")
    if scale >= 0:
        raise FormatError(f"{path}: big-endian PFM (scale {scale}) not "
                          f"supported; scale must be negative")
    expected = w * h * 4
    if len(rest) != expected:
        offset = len(buf) - len(rest)
        raise FormatError(f"{path}: expected {expected} data bytes at byte "
                          f"{offset}, found {len(rest)}")
    arr = np.frombuffer(rest, dtype="<f4").reshape(h, w)
    return arr[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass
class SyntheticCorpus:
    images: np.ndarray  # (n, size, size) float in [0,1], 8-bit quantized
    masks: np.ndarray   # (n, size, size) uint8 lung masks
    labels: list
    manifest: Manifest

    def samples(self):
        return list(zip(self.images, self.masks, self.labels))


def glyph_strips(size: int) -> np.ndarray:
    """Binary map of the two top-corner strips where glyphs may be stamped."""
    strip = np.zeros((size, size), dtype=np.uint8)
    height = size // 8 + 2
    width = size // 3
    strip[:height, :width] = 1
    strip[:height, size - width:] = 1
    return strip


def _ellipse_mask(size, cx, cy, ax, ay, theta):
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs - cx
    dy = ys - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    return (u * u + v * v) <= 1.0


def _paint_glyph(image, size, label, source, rng):
    """Text-like bright bars in the class's corner; bar thickness tags the
    source. Geometry jitters by a pixel or two per image."""
    height = size // 8
    bar_len = size // 5
    thickness = 1 if source == "cohen" else 2
    if label == "lung_opacity":
        col0 = 2 + int(rng.integers(0, 3))
    else:
        col0 = size - 2 - bar_len - int(rng.integers(0, 3))
    row = 2
    step = max(2, height // 3)
    for _ in range(3):
        length = bar_len - int(rng.integers(0, 3))
        image[row:row + thickness, col0:col0 + length] = 0.95
        row += step


def generate_synthetic_corpus(n, size, annotation_bias, seed,
                              class_source_correlation=0.5) -> SyntheticCorpus:
    """Two-ellipse lung phantoms with exact masks and a synthetic manifest.

    Classes alternate lung_opacity/normal; opacity adds 1-3 blurred bright
    blobs strictly inside the lungs. Sources (cohen/rsna) differ in
    background texture and, when glyphs are on, in glyph bar thickness.
    Every random stream is derived independently from (seed, purpose, index),
    so toggling ``annotation_bias`` changes glyph pixels and nothing else.
    """
    if n < 10:
        raise ValueError(f"n must be >= 10, got {n}")
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    images = np.zeros((n, size, size))
    masks = np.zeros((n, size, size), dtype=np.uint8)
    labels = []
    records = []
    for i in range(n):
        label = "lung_opacity" if i % 2 == 0 else "normal"
        u = derive_rng(seed, "source", i).random()
        preferred = "cohen" if label == "lung_opacity" else "rsna"
        other = "rsna" if preferred == "cohen" else "cohen"
        source = preferred if u < class_source_correlation else other

        bg_rng = derive_rng(seed, "bg", i)
        if source == "cohen":
            img = 0.10 + bg_rng.normal(0, 0.04, (size, size))
        else:
            xs = np.arange(size)
            ripple = 0.04 * np.sin(2 * np.pi * xs / 8.0)
            img = 0.14 + ripple[None, :] + bg_rng.normal(0, 0.06, (size, size))

        pose = derive_rng(seed, "pose", i)
        mask = np.zeros((size, size), dtype=bool)
        for side, xc in ((0, 0.30), (1, 0.70)):
            cx = (xc + pose.uniform(-0.02, 0.02)) * size
            cy = (0.60 + pose.uniform(-0.03, 0.03)) * size
            ax = (0.14 + pose.uniform(-0.015, 0.015)) * size
            ay = (0.24 + pose.uniform(-0.02, 0.02)) * size
            theta = pose.uniform(-0.12, 0.12) * (1 if side else -1)
            mask |= _ellipse_mask(size, cx, cy, ax, ay, theta)

        lung_rng = derive_rng(seed, "lung", i)
        lung_values = 0.55 + lung_rng.normal(0, 0.03, (size, size))
        img = np.where(mask, lung_values, img)

        if label == "lung_opacity":
            blob_rng = derive_rng(seed, "blob", i)
            ys, xs_grid = np.mgrid[0:size, 0:size]
            inner = np.argwhere(mask)
            for _ in range(int(blob_rng.integers(1, 4))):
                cy, cx = inner[int(blob_rng.integers(0, len(inner)))]
                sigma = size / 16.0 * blob_rng.uniform(0.8, 1.2)
                amp = blob_rng.uniform(0.18, 0.26)
                bump = amp * np.exp(-((ys - cy) ** 2 + (xs_grid - cx) ** 2)
                                    / (2 * sigma * sigma))
                img += bump * mask

        if annotation_bias:
            _paint_glyph(img, size, label, source,
                         derive_rng(seed, "glyph", i))

        img = np.clip(img, 0.0, 1.0)
        img = np.rint(img * 255.0) / 255.0  # 8-bit levels: PGM round trip exact
        images[i] = img
        masks[i] = mask.astype(np.uint8)
        labels.append(label)
        rid = f"s{i:04d}"
        projection = "PA" if derive_rng(seed, "proj", i).random() < 0.7 else "AP"
        records.append(SampleRecord(rid, f"images/{rid}.pgm", f"p{i:04d}",
                                    source, label, projection))
    return SyntheticCorpus(images, masks, labels, Manifest(records))
