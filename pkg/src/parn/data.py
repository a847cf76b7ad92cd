"""Dataset ingestion and episode sampling.

Omniglot-style corpora live on disk as root/<alphabet>/<character>/<png>;
classes load eagerly as float32 [0, 1] arrays resized to the target size.
Mini-Imagenet keeps per-image paths and decodes lazily (root/<split>/<class>/
images, with optional root/<split>.csv naming class membership).

Rotation augmentation multiplies the class list by four: each quarter-turn
of a character is its own class, realized losslessly through np.rot90 at
access time.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OMNIGLOT_TRAIN_CLASSES = 1200
OMNIGLOT_TEST_CLASSES = 423
OMNIGLOT_SPLIT_SEED = 0
MINI_SPLIT_CLASSES = {"train": 64, "val": 16, "test": 20}

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetIntegrityError(ValueError):
    """Class inventory does not match the published dataset layout."""


class SamplingError(ValueError):
    """An episode cannot be drawn from the dataset as requested."""


@dataclass
class ClassRecord:
    name: str
    images: list  # ndarray (H, W[, 3]) or Path, decoded on access
    rot: int = 0  # quarter turns applied at access time


@dataclass
class Dataset:
    classes: list[ClassRecord]
    split: str
    image_size: int
    channels: int

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_size(self, ci: int) -> int:
        return len(self.classes[ci].images)

    def get_image(self, ci: int, ii: int) -> np.ndarray:
        """Image as (channels, S, S) float32 in [0, 1], rotation applied."""
        rec = self.classes[ci]
        img = rec.images[ii]
        if isinstance(img, (str, Path)):
            img = decode_image(img, self.image_size, self.channels)
        if rec.rot:
            img = np.rot90(img, k=rec.rot, axes=(0, 1))
        if img.ndim == 2:
            return np.ascontiguousarray(img[None])
        return np.ascontiguousarray(img.transpose(2, 0, 1))


@dataclass
class Episode:
    """One C-way K-shot task. Queries are grouped class-major, so
    query_labels == [0]*Q + [1]*Q + ... before any shuffling."""

    way: int
    shot: int
    queries_per_class: int
    sample_images: np.ndarray  # (way*shot, ch, S, S), class-major
    query_images: np.ndarray   # (way*Q, ch, S, S)
    query_labels: np.ndarray   # (way*Q,) int64 in [0, way)
    class_indices: np.ndarray  # (way,) indices into the source dataset
    class_names: list[str] = field(default_factory=list)


def decode_image(path, size: int, channels: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr


def load_character_tree(root, image_size: int = 28) -> list[ClassRecord]:
    """Read root/<alphabet>/<character>/<images> into eager class records,
    sorted for determinism."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    records = []
    for alphabet in sorted(p for p in root.iterdir() if p.is_dir()):
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            files = sorted(p for p in character.iterdir()
                           if p.suffix.lower() in IMAGE_EXTENSIONS)
            if not files:
                continue
            images = [decode_image(f, image_size, 1) for f in files]
            records.append(ClassRecord(f"{alphabet.name}/{character.name}", images))
    return records


def load_omniglot(root, image_size: int = 28) -> tuple[Dataset, Dataset]:
    """Full Omniglot: 1623 classes checked, then a deterministic 1200/423
    class split (fixed-seed shuffle of the sorted class list)."""
    records = load_character_tree(root, image_size)
    expected = OMNIGLOT_TRAIN_CLASSES + OMNIGLOT_TEST_CLASSES
    if len(records) != expected:
        raise DatasetIntegrityError(
            f"omniglot root {root} holds {len(records)} classes, "
            f"expected {expected} ({OMNIGLOT_TRAIN_CLASSES} train + "
            f"{OMNIGLOT_TEST_CLASSES} test)")
    order = np.random.default_rng(OMNIGLOT_SPLIT_SEED).permutation(expected)
    train = [records[i] for i in order[:OMNIGLOT_TRAIN_CLASSES]]
    test = [records[i] for i in order[OMNIGLOT_TRAIN_CLASSES:]]
    return (Dataset(train, "train", image_size, 1),
            Dataset(test, "test", image_size, 1))


def load_miniimagenet(root, image_size: int = 84) -> dict[str, Dataset]:
    """Mini-Imagenet layout support (loader only; training it at full scale
    is out of scope). Images decode lazily."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    out: dict[str, Dataset] = {}
    for split, expected in MINI_SPLIT_CLASSES.items():
        split_dir = root / split
        csv_path = root / f"{split}.csv"
        members: dict[str, list[Path]] = {}
        if csv_path.is_file():
            with open(csv_path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                for row in reader:
                    if len(row) < 2:
                        continue
                    fname, label = row[0].strip(), row[1].strip()
                    members.setdefault(label, []).append(split_dir / label / fname)
        elif split_dir.is_dir():
            for cdir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                members[cdir.name] = sorted(
                    p for p in cdir.iterdir()
                    if p.suffix.lower() in IMAGE_EXTENSIONS)
        else:
            raise FileNotFoundError(
                f"mini-imagenet split {split}: neither {csv_path} nor {split_dir}")
        if len(members) != expected:
            raise DatasetIntegrityError(
                f"mini-imagenet split {split} has {len(members)} classes, "
                f"expected {expected}")
        records = [ClassRecord(name, sorted(paths))
                   for name, paths in sorted(members.items())]
        out[split] = Dataset(records, split, image_size, 3)
    return out


def augment_rotations(d: Dataset) -> Dataset:
    """Quadruple the class list: each rotation by a multiple of 90 degrees
    becomes a new class (lossless array rotation, no resampling)."""
    classes = []
    for rec in d.classes:
        for k in range(4):
            classes.append(ClassRecord(f"{rec.name}/rot{90 * k:03d}",
                                       rec.images, (rec.rot + k) % 4))
    return Dataset(classes, d.split, d.image_size, d.channels)


def subset_dataset(d: Dataset, class_indices) -> Dataset:
    return Dataset([d.classes[i] for i in class_indices], d.split,
                   d.image_size, d.channels)


def sample_episode(d: Dataset, way: int, shot: int, queries: int,
                   rng: np.random.Generator) -> Episode:
    """Uniformly draw a C-way K-shot episode without replacement.

    Within a class, sample and query images are disjoint by construction.
    """
    if d.n_classes < way:
        raise SamplingError(
            f"episode needs {way} classes, dataset has {d.n_classes}")
    class_idx = rng.choice(d.n_classes, size=way, replace=False)
    samples, queries_out, labels = [], [], []
    for slot, ci in enumerate(class_idx):
        m = d.class_size(ci)
        if m < shot + queries:
            raise SamplingError(
                f"class {d.classes[ci].name!r} has {m} images, episode needs "
                f"{shot}+{queries}")
        pick = rng.choice(m, size=shot + queries, replace=False)
        for ii in pick[:shot]:
            samples.append(d.get_image(ci, ii))
        for ii in pick[shot:]:
            queries_out.append(d.get_image(ci, ii))
            labels.append(slot)
    return Episode(
        way=way, shot=shot, queries_per_class=queries,
        sample_images=np.stack(samples),
        query_images=np.stack(queries_out),
        query_labels=np.asarray(labels, dtype=np.int64),
        class_indices=np.asarray(class_idx, dtype=np.int64),
        class_names=[d.classes[ci].name for ci in class_idx],
    )


def one_hot(labels: np.ndarray, way: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), way), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out
