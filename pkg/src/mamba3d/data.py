"""Synthetic shape datasets on disk: one XYZ file per cloud plus a ``manifest.csv`` (path,label,split)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import SHAPE_CLASSES, PointCloud, atomic_write_text, load_points, save_points, synth_shapes

MANIFEST = "manifest.csv"
TRAIN_FRACTION = 0.8


@dataclass
class Sample:
    path: str  # relative to the manifest directory
    label: int
    split: str
    cloud: PointCloud | None = None


def _cloud_seed(seed: int, label: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, label, index]).generate_state(1)[0])


def synth_dataset(classes: int = 3, per_class: int = 100, points: int = 256, noise: float = 0.01,
                  seed: int = 0) -> list[Sample]:
    """Clouds and a deterministic, per-class 80/20 train/test split."""
    if not 1 <= classes <= len(SHAPE_CLASSES):
        raise ValueError(f"classes must be in [1, {len(SHAPE_CLASSES)}], got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    out = []
    split_rng = np.random.default_rng(seed)
    n_train = int(np.floor(TRAIN_FRACTION * per_class + 0.5))
    for label in range(classes):
        is_train = np.zeros(per_class, dtype=bool)
        is_train[split_rng.permutation(per_class)[:n_train]] = True
        kind = SHAPE_CLASSES[label]
        for i in range(per_class):
            cloud = synth_shapes(kind, points, seed=_cloud_seed(seed, label, i), noise_sigma=noise)
            out.append(Sample(f"{kind}_{i:04d}.xyz", label, "train" if is_train[i] else "test", cloud))
    return out


def manifest_text(samples: list[Sample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "label", "split"])
    for s in samples:
        w.writerow([s.path, s.label, s.split])
    return buf.getvalue()


def write_dataset(out_dir, samples: list[Sample]) -> Path:
    out_dir = Path(out_dir)
    for s in samples:
        save_points(out_dir / s.path, s.cloud)
    path = out_dir / MANIFEST
    atomic_write_text(path, manifest_text(samples))
    return path


def read_manifest(path) -> list[Sample]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label", "split"]:
            raise ValueError(f"{path}: manifest header must be path,label,split, got {reader.fieldnames}")
        rows = []
        for lineno, r in enumerate(reader, 2):
            if r["split"] not in ("train", "test"):
                raise ValueError(f"{path}:{lineno}: split must be train or test, got {r['split']!r}")
            try:
                label = int(r["label"])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label must be an integer, got {r['label']!r}") from None
            rows.append(Sample(r["path"], label, r["split"]))
    return rows


def load_dataset(path) -> tuple[list[PointCloud], list[PointCloud]]:
    """(train, test) labelled clouds listed by a manifest file or a directory holding one."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    train, test = [], []
    for s in read_manifest(path):
        cloud = load_points(root / s.path, label=s.label)
        (train if s.split == "train" else test).append(cloud)
    return train, test
