"""Synthetic images with a planted group/class shortcut, splits and on-disk format.

Each image is a class template drawn in the centre, a group-specific corner
ramp (the "watermark") in the top-left corner, and Gaussian pixel noise.  In
training and validation patients the class distribution is skewed towards
classes favoured by the patient's group; test patients are always drawn
unbiased so that reliance on the watermark shows up as a TPR disparity.
"""

from __future__ import annotations

import csv
import io
import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SPLITS = ("train", "validation", "test")
DATASET_VERSION = 1
MAX_CLASSES = 6


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 500
    images_per_patient: int = 4
    height: int = 28
    width: int = 28
    n_classes: int = 4
    n_groups: int = 2
    bias: float = 0.9
    amplitude: float = 0.4
    noise: float = 0.05
    seed: int = 1
    # per-image template contrast is drawn uniformly from this range
    contrast_min: float = 0.01
    contrast_max: float = 0.2
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if min(self.n_patients, self.images_per_patient, self.height, self.width) < 1:
            raise ValueError("patient, image and pixel counts must be positive")
        if self.height < 12 or self.width < 12:
            raise ValueError("images must be at least 12x12 to separate watermark and template")
        if not 2 <= self.n_classes <= MAX_CLASSES:
            raise ValueError(f"n_classes must lie in [2, {MAX_CLASSES}]")
        if self.n_groups < 2:
            raise ValueError("n_groups must be at least 2")
        for name in ("bias", "amplitude"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0.0 <= self.contrast_min <= self.contrast_max <= 1.0:
            raise ValueError("need 0 <= contrast_min <= contrast_max <= 1")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    y: np.ndarray  # (N,) int
    z: np.ndarray  # (N,) int
    patient_id: np.ndarray  # (N,) int
    split: np.ndarray  # (N,) str, one of SPLITS
    n_classes: int
    n_groups: int
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def n_patients(self) -> int:
        return int(np.unique(self.patient_id).size)

    def subset(self, split: str) -> "Dataset":
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        keep = self.split == split
        return self.take(np.flatnonzero(keep))

    def take(self, index) -> "Dataset":
        return Dataset(
            self.images[index],
            self.y[index],
            self.z[index],
            self.patient_id[index],
            self.split[index],
            self.n_classes,
            self.n_groups,
            self.config,
        )


def favored_classes(n_classes: int, n_groups: int) -> list[np.ndarray]:
    """Contiguous class blocks per group; groups beyond n_classes favour all classes."""
    blocks = np.array_split(np.arange(n_classes), n_groups)
    return [b if b.size else np.arange(n_classes) for b in blocks]


def _template_box(h: int, w: int) -> tuple[int, int, int, int]:
    r0, c0 = h // 4, w // 4
    return r0, h - h // 4, c0, w - w // 4


def class_templates(n_classes: int, h: int, w: int) -> np.ndarray:
    """Binary patterns in the central box: bars, disk, diagonal cross, ring, checker."""
    r0, r1, c0, c1 = _template_box(h, w)
    bh, bw = r1 - r0, c1 - c0
    ii, jj = np.mgrid[0:bh, 0:bw]
    ci, cj = (bh - 1) / 2, (bw - 1) / 2
    radius = np.hypot(ii - ci, jj - cj)
    half = min(bh, bw) / 2
    patterns = [
        (ii // 2) % 2 == 0,  # horizontal bars
        (jj // 2) % 2 == 0,  # vertical bars
        radius <= half * 0.6,  # centred disk
        (np.abs(ii - jj * bh / bw) <= 1) | (np.abs(ii + jj * bh / bw - (bh - 1)) <= 1),  # diagonal cross
        (radius >= half * 0.55) & (radius <= half * 0.85),  # ring
        ((ii // 3) + (jj // 3)) % 2 == 0,  # checker
    ]
    out = np.zeros((n_classes, h, w))
    for c in range(n_classes):
        out[c, r0:r1, c0:c1] = patterns[c]
    return out


def group_signatures(n_groups: int, h: int, w: int, amplitude: float) -> np.ndarray:
    """Top-left corner ramps; group g's ramp points at angle g * pi / (2 * (n_groups - 1))."""
    s = max(3, min(h, w) // 5)
    ii, jj = np.mgrid[0:s, 0:s]
    out = np.zeros((n_groups, h, w))
    for g in range(n_groups):
        theta = g * (np.pi / 2) / (n_groups - 1)
        ramp = np.cos(theta) * (jj + 1) / s + np.sin(theta) * (ii + 1) / s
        out[g, :s, :s] = amplitude * ramp / ramp.max()
    return out


def _split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    # largest remainder first, earlier split wins ties
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def patientwise_split(patient_ids, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> dict[int, str]:
    """Shuffle patients with ``seed`` and cut them train/validation/test by largest remainder."""
    if isinstance(patient_ids, Dataset):
        patient_ids = patient_ids.patient_id
    patients = np.unique(np.asarray(patient_ids))
    if patients.size < 5:
        raise ValueError(f"patientwise_split needs at least 5 patients, got {patients.size}")
    order = np.random.default_rng(seed).permutation(patients)
    counts = _split_counts(patients.size, ratios)
    out: dict[int, str] = {}
    start = 0
    for name, count in zip(SPLITS, counts):
        for pid in order[start : start + count]:
            out[int(pid)] = name
        start += count
    return out


def generate_dataset(config: GeneratorConfig) -> Dataset:
    h, w = config.height, config.width
    templates = class_templates(config.n_classes, h, w)
    signatures = group_signatures(config.n_groups, h, w, config.amplitude)
    favored = favored_classes(config.n_classes, config.n_groups)
    assignment = patientwise_split(np.arange(config.n_patients), config.split_ratios, config.seed)

    k = config.images_per_patient
    n = config.n_patients * k
    images = np.empty((n, 1, h, w), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    z = np.empty(n, dtype=np.int64)
    pid = np.repeat(np.arange(config.n_patients, dtype=np.int64), k)
    split = np.empty(n, dtype=object)
    for p in range(config.n_patients):
        rng = np.random.default_rng([config.seed, p])
        group = int(rng.integers(config.n_groups))
        tag = assignment[p]
        skewed = rng.random() < config.bias and tag != "test"
        pool = favored[group] if skewed else np.arange(config.n_classes)
        classes = rng.choice(pool, size=k)
        contrast = rng.uniform(config.contrast_min, config.contrast_max, size=k)
        noise = rng.normal(0.0, config.noise, size=(k, h, w)) if config.noise > 0 else np.zeros((k, h, w))
        img = contrast[:, None, None] * templates[classes] + signatures[group] + noise
        sl = slice(p * k, (p + 1) * k)
        images[sl, 0] = np.clip(img, 0.0, 1.0)
        y[sl] = classes
        z[sl] = group
        split[sl] = tag
    return Dataset(images, y, z, pid, split.astype(str), config.n_classes, config.n_groups, _config_echo(config))


def _config_echo(config: GeneratorConfig) -> dict:
    d = asdict(config)
    d["split_ratios"] = list(config.split_ratios)
    return d


# ---------------------------------------------------------------------------
# bias audit
# ---------------------------------------------------------------------------


@dataclass
class BiasAudit:
    table: np.ndarray  # (n_classes, n_groups) counts
    chi2: float
    cramers_v: float


def bias_audit(dataset: Dataset) -> BiasAudit:
    """Class x group contingency counts, Pearson chi-square and Cramer's V."""
    if len(dataset) == 0:
        raise ValueError("bias_audit: empty dataset")
    table = np.zeros((dataset.n_classes, dataset.n_groups), dtype=np.int64)
    np.add.at(table, (dataset.y, dataset.z), 1)
    n = table.sum()
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    expected = np.outer(rows, cols) / n
    live = expected > 0
    chi2 = float((((table - expected) ** 2)[live] / expected[live]).sum())
    r = int((rows > 0).sum())
    c = int((cols > 0).sum())
    denom = n * (min(r, c) - 1)
    v = float(np.sqrt(chi2 / denom)) if denom > 0 else 0.0
    return BiasAudit(table, chi2, min(v, 1.0))


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def write_dataset(dataset: Dataset, path) -> None:
    """Write manifest.json, images.f32 and labels.csv; the directory appears atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    n, _, h, w = dataset.images.shape
    manifest = {
        "version": DATASET_VERSION,
        "height": h,
        "width": w,
        "n_classes": dataset.n_classes,
        "n_groups": dataset.n_groups,
        "image_count": n,
        "patient_count": dataset.n_patients,
        "generator_config": dataset.config,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (tmp / "images.f32").write_bytes(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "patient_id", "y", "z", "split"])
    for i in range(n):
        writer.writerow([i, int(dataset.patient_id[i]), int(dataset.y[i]), int(dataset.z[i]), dataset.split[i]])
    (tmp / "labels.csv").write_text(buf.getvalue())
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: missing manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}/manifest.json: invalid JSON at byte {exc.pos}") from None
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {manifest.get('version')!r}")
    n, h, w = manifest["image_count"], manifest["height"], manifest["width"]
    raw = (path / "images.f32").read_bytes()
    expected = n * h * w * 4
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{path}/images.f32: expected {expected} bytes for {n} images of {h}x{w}, found {len(raw)}"
            + (f" (truncated at byte {len(raw)})" if len(raw) < expected else "")
        )
    images = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, 1, h, w)
    with open(path / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n:
        raise DatasetFormatError(f"{path}/labels.csv: {len(rows)} label rows but manifest declares {n} images")
    for i, row in enumerate(rows):
        if int(row["index"]) != i:
            raise DatasetFormatError(f"{path}/labels.csv: row {i} has index {row['index']}")
    y = np.array([int(r["y"]) for r in rows], dtype=np.int64)
    z = np.array([int(r["z"]) for r in rows], dtype=np.int64)
    pid = np.array([int(r["patient_id"]) for r in rows], dtype=np.int64)
    split = np.array([r["split"] for r in rows], dtype=str)
    n_classes, n_groups = manifest["n_classes"], manifest["n_groups"]
    if n and (y.min() < 0 or y.max() >= n_classes or z.min() < 0 or z.max() >= n_groups):
        raise DatasetFormatError(f"{path}/labels.csv: labels outside the declared vocabularies")
    if not set(split) <= set(SPLITS):
        raise DatasetFormatError(f"{path}/labels.csv: unknown split tags {sorted(set(split) - set(SPLITS))}")
    if int(np.unique(pid).size) != manifest["patient_count"]:
        raise DatasetFormatError(f"{path}: patient count does not match manifest")
    return Dataset(images, y, z, pid, split, n_classes, n_groups, manifest.get("generator_config", {}))
