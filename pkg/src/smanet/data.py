"""Synthetic dataset generation, augmentation, selective oversampling,
subject-disjoint folds, and the on-disk manifest format.

Each label owns a fixed image zone and a fixed color; a positive label
renders a Gaussian blob of that color at its zone.  Multi-label draws
include coupled pairs (conditional co-occurrence with the marginal rates
preserved) and rare labels, so the imbalance machinery has something to
chew on at desk scale.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .ppm import decode_image, encode_color

DEFAULT_LABEL_RATES = (0.30, 0.30, 0.25, 0.20, 0.20, 0.20, 0.15, 0.15, 0.10, 0.10, 0.05, 0.05)
# (first label, second label, P(second | first)); marginals stay as configured.
DEFAULT_LABEL_PAIRS = ((0, 1, 0.8), (4, 5, 0.8))


@dataclass
class Sample:
    image: np.ndarray          # [H,W,3] floats in [0,1]
    labels: np.ndarray | int   # binary vector (multi_label) or class id
    subject_id: int


@dataclass(frozen=True)
class ResampleConfig:
    threshold: float = 0.2
    max_duplication: int = 20

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"resample threshold must be in [0,1], got {self.threshold}")
        if self.max_duplication < 1:
            raise ConfigError("max_duplication must be >= 1")


@dataclass(frozen=True)
class SyntheticSpec:
    mode: str = "multi_label"            # or multi_class
    num_labels: int = 12
    num_classes: int = 6
    image_size: int = 64
    n_subjects: int = 30
    subject_pool: tuple = ()             # empty -> range(n_subjects)
    rates: tuple = DEFAULT_LABEL_RATES
    pairs: tuple = DEFAULT_LABEL_PAIRS
    noise: float = 0.04
    blob_sigma: float = 4.0
    blob_amplitude: float = 0.75
    distractors: int = 2

    def __post_init__(self):
        if self.mode not in ("multi_label", "multi_class"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "multi_label" and len(self.rates) != self.num_labels:
            raise ConfigError("rates length must equal num_labels")
        seen = set()
        for a, b, q in self.pairs:
            if a in seen or b in seen or a == b:
                raise ConfigError("coupled label pairs must be disjoint")
            seen.update((a, b))
            cond = (self.rates[b] - q * self.rates[a]) / (1.0 - self.rates[a])
            if not 0.0 <= cond <= 1.0:
                raise ConfigError(
                    f"pair ({a},{b}) with co-occurrence {q} is infeasible for the marginals"
                )

    def pool(self) -> tuple:
        return self.subject_pool if self.subject_pool else tuple(range(self.n_subjects))


def label_colors(count: int) -> np.ndarray:
    """Evenly spaced saturated hues, one distinct color per label."""
    return np.array(
        [colorsys.hsv_to_rgb(i / count, 0.9, 1.0) for i in range(count)]
    )


def label_centers(count: int, size: int) -> np.ndarray:
    """Zone centers on a ring well inside the frame so +-45 degree
    rotations keep every blob visible."""
    c = (size - 1) / 2.0
    radius = size * 0.3125
    angles = 2.0 * np.pi * np.arange(count) / count
    return np.stack([c + radius * np.sin(angles), c + radius * np.cos(angles)], axis=1)


def sample_labels(rng: np.random.Generator, n: int, spec: SyntheticSpec) -> np.ndarray:
    """Draw [n, L] binary labels honoring marginal rates and coupled pairs."""
    rates = np.asarray(spec.rates)
    u = rng.random((n, spec.num_labels))
    labels = (u < rates[None, :]).astype(np.int8)
    for a, b, q in spec.pairs:
        cond_given_absent = (rates[b] - q * rates[a]) / (1.0 - rates[a])
        thresh = np.where(labels[:, a] == 1, q, cond_given_absent)
        labels[:, b] = (u[:, b] < thresh).astype(np.int8)
    return labels


def _subject_tint(subject_id: int) -> np.ndarray:
    return np.random.default_rng((9001, subject_id)).uniform(-0.05, 0.05, 3)


def _render(rng: np.random.Generator, active: list[int], subject_id: int,
            spec: SyntheticSpec, colors: np.ndarray, centers: np.ndarray) -> np.ndarray:
    size = spec.image_size
    img = np.full((size, size, 3), 0.18) + _subject_tint(subject_id)[None, None, :]
    img += rng.normal(0.0, spec.noise, size=(size, size, 3))
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for _ in range(spec.distractors):
        dy, dx = rng.uniform(8, size - 8, 2)
        dsig = rng.uniform(2.0, 5.0)
        bump = 0.25 * np.exp(-((yy - dy) ** 2 + (xx - dx) ** 2) / (2 * dsig**2))
        img += bump[:, :, None]
    for lab in active:
        cy, cx = centers[lab]
        bump = spec.blob_amplitude * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spec.blob_sigma**2)
        )
        img += bump[:, :, None] * colors[lab][None, None, :]
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(seed: int, n: int, spec: SyntheticSpec | None = None) -> list[Sample]:
    """Deterministic synthetic dataset: same seed, same bytes."""
    if n <= 0:
        raise ConfigError(f"sample count must be positive, got {n}")
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng((seed, 101))
    pool = np.asarray(spec.pool())
    subjects = pool[rng.integers(0, len(pool), size=n)]
    if spec.mode == "multi_label":
        labels = sample_labels(rng, n, spec)
        colors = label_colors(spec.num_labels)
        centers = label_centers(spec.num_labels, spec.image_size)
        samples = []
        for i in range(n):
            active = np.flatnonzero(labels[i]).tolist()
            img = _render(rng, active, int(subjects[i]), spec, colors, centers)
            samples.append(Sample(image=img, labels=labels[i].copy(), subject_id=int(subjects[i])))
        return samples
    classes = rng.integers(0, spec.num_classes, size=n)
    colors = label_colors(spec.num_classes)
    centers = label_centers(spec.num_classes, spec.image_size)
    return [
        Sample(
            image=_render(rng, [int(classes[i])], int(subjects[i]), spec, colors, centers),
            labels=int(classes[i]),
            subject_id=int(subjects[i]),
        )
        for i in range(n)
    ]


# -- augmentation --------------------------------------------------------


def rotate_bilinear(img: np.ndarray, theta_deg: float) -> np.ndarray:
    """Rotate about the image center; bilinear sampling, replicated border."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(theta_deg)
    cos_t, sin_t = math.cos(t), math.sin(t)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sy = cy + (yy - cy) * cos_t - (xx - cx) * sin_t
    sx = cx + (yy - cy) * sin_t + (xx - cx) * cos_t
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[..., None]
    wx = (sx - x0)[..., None]
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def apply_augment(img: np.ndarray, theta_deg: float, flip: bool,
                  brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Deterministic augmentation core; the identity draw is exact."""
    out = img
    if theta_deg != 0.0:
        out = rotate_bilinear(out, theta_deg)
    if flip:
        out = out[:, ::-1, :]
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        mean = out.mean()
        out = mean + (out - mean) * contrast
    if saturation != 1.0:
        gray = out.mean(axis=2, keepdims=True)
        out = gray + (out - gray) * saturation
    if out is img:
        return img.copy()
    return np.clip(out, 0.0, 1.0)


def augment(sample: Sample, seed, mode: str) -> Sample:
    """Seeded random rotation, horizontal flip, and +-20% color jitter.

    AU runs rotate within +-45 degrees, expression runs within +-15.
    """
    if mode not in ("au", "fer"):
        raise ConfigError(f"unknown augmentation mode {mode!r}")
    rng = np.random.default_rng(seed)
    limit = 45.0 if mode == "au" else 15.0
    theta = rng.uniform(-limit, limit)
    flip = rng.random() < 0.5
    brightness, contrast, saturation = rng.uniform(0.8, 1.2, 3)
    img = apply_augment(sample.image, theta, flip, brightness, contrast, saturation)
    return Sample(image=img, labels=sample.labels, subject_id=sample.subject_id)


# -- selective oversampling ------------------------------------------------


def selective_oversample(samples: list[Sample], cfg: ResampleConfig) -> list[Sample]:
    """Duplicate minority-positive samples until each label's positive
    frequency reaches the threshold (or the per-sample duplication cap).

    Labels are processed in ascending original-frequency order; appended
    duplicates count toward every label they carry.  The input is never
    shrunk: the result is a multiset superset of the input.
    """
    if not samples:
        raise DataError("selective_oversample: empty dataset")
    labels = np.stack([np.asarray(s.labels) for s in samples])
    if labels.ndim != 2:
        raise DataError("selective_oversample requires multi-label data")
    p = cfg.threshold
    out = list(samples)
    counts = labels.sum(axis=0).astype(np.int64)
    total = len(samples)
    dup_used = np.zeros(len(samples), dtype=np.int64)
    order = np.argsort(counts, kind="stable")
    positives = {int(l): np.flatnonzero(labels[:, l]) for l in order}
    cursor = {int(l): 0 for l in order}

    for _ in range(cfg.max_duplication):
        progressed = False
        for l in order:
            l = int(l)
            pos = positives[l]
            if len(pos) == 0:
                continue
            while counts[l] < p * total - 1e-12:
                need = math.ceil((p * total - counts[l]) / (1.0 - p)) if p < 1.0 else 0
                if need <= 0:
                    break
                appended = 0
                scanned = 0
                while appended < need and scanned < len(pos) * cfg.max_duplication:
                    idx = int(pos[cursor[l] % len(pos)])
                    cursor[l] += 1
                    scanned += 1
                    if dup_used[idx] >= cfg.max_duplication:
                        continue
                    dup_used[idx] += 1
                    out.append(samples[idx])
                    counts += labels[idx]
                    total += 1
                    appended += 1
                    progressed = True
                if appended < need:
                    break  # every positive is at the duplication cap
        below = [int(l) for l in order if len(positives[int(l)]) and counts[int(l)] < p * total - 1e-12]
        if not below or not progressed:
            break
    return out


# -- folds ------------------------------------------------------------------


def make_folds(samples: list[Sample], k: int, by_subject: bool = True, seed: int = 0) -> list[list[int]]:
    """Deterministic k-way partition of sample indices; with by_subject no
    subject appears in two folds."""
    if k < 2:
        raise ConfigError(f"need k >= 2 folds, got {k}")
    rng = np.random.default_rng((seed, 707))
    if by_subject:
        subjects = sorted({s.subject_id for s in samples})
        if len(subjects) < k:
            raise ConfigError(f"{len(subjects)} subjects cannot fill {k} folds")
        perm = rng.permutation(subjects)
        fold_of = {int(subj): i % k for i, subj in enumerate(perm)}
        folds = [[] for _ in range(k)]
        for idx, s in enumerate(samples):
            folds[fold_of[s.subject_id]].append(idx)
        return folds
    perm = rng.permutation(len(samples))
    folds = [[] for _ in range(k)]
    for i, idx in enumerate(perm):
        folds[i % k].append(int(idx))
    return folds


# -- manifest ----------------------------------------------------------------


def write_dataset(out_dir, samples: list[Sample], mode: str, digest: str = "") -> Path:
    """Write images as P6 files plus a tab-separated manifest.

    Manifest fields, in order: image path, labels, subject id.  Labels are
    comma-joined 0/1 for multi-label data, a single class id otherwise.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    if digest:
        lines.append(f"# config_digest={digest}")
    for i, s in enumerate(samples):
        rel = f"images/sample_{i:05d}.ppm"
        (out_dir / rel).write_bytes(encode_color(s.image))
        if mode == "multi_label":
            lab = ",".join(str(int(v)) for v in s.labels)
        else:
            lab = str(int(s.labels))
        lines.append(f"{rel}\t{lab}\t{s.subject_id}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(dataset_dir) -> tuple[list[Sample], str]:
    """Read a manifest directory back; returns (samples, mode)."""
    dataset_dir = Path(dataset_dir)
    manifest = dataset_dir / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest.tsv under {dataset_dir}")
    samples = []
    mode = None
    for line in manifest.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"malformed manifest record: {line!r}")
        rel, lab, subj = parts
        img = decode_image((dataset_dir / rel).read_bytes())
        if "," in lab:
            labels = np.array([int(v) for v in lab.split(",")], dtype=np.int8)
            mode = mode or "multi_label"
        else:
            labels = int(lab)
            mode = mode or "multi_class"
        samples.append(Sample(image=img, labels=labels, subject_id=int(subj)))
    if not samples:
        raise DataError(f"empty manifest {manifest}")
    return samples, mode
