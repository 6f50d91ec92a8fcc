"""Dataset container, loaders and the synthetic generator.

Images are float64 arrays in [0,1] with shape (C,H,W), stored stacked as
(N,C,H,W). Each sample carries a provenance flag (clean / payload /
cover) plus its original label; these exist purely so evaluation can
compare a defense run against ground truth. Training/defense code never
looks at them.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLEAN = 0
POISON_PAYLOAD = 1
POISON_COVER = 2

PROVENANCE_NAMES = {CLEAN: "clean", POISON_PAYLOAD: "poison_payload", POISON_COVER: "poison_cover"}
PROVENANCE_CODES = {v: k for k, v in PROVENANCE_NAMES.items()}


class DataFormatError(ValueError):
    """A dataset file is missing, malformed or inconsistent."""


@dataclass
class LabeledSample:
    image: np.ndarray
    label: int
    provenance: int
    original_label: int


@dataclass
class LabeledDataset:
    images: np.ndarray          # (N,C,H,W) float64 in [0,1]
    labels: np.ndarray          # (N,) int64
    num_classes: int
    split: str = "train"
    provenance: np.ndarray = None
    original_labels: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.provenance is None:
            self.provenance = np.full(len(self.labels), CLEAN, dtype=np.int8)
        else:
            self.provenance = np.asarray(self.provenance, dtype=np.int8)
        if self.original_labels is None:
            self.original_labels = self.labels.copy()
        else:
            self.original_labels = np.asarray(self.original_labels, dtype=np.int64)

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def sample(self, i):
        return LabeledSample(
            self.images[i], int(self.labels[i]),
            int(self.provenance[i]), int(self.original_labels[i]),
        )

    def validate(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N,C,H,W), got {self.images.shape}")
        n = self.images.shape[0]
        for name, arr in (("labels", self.labels), ("provenance", self.provenance),
                          ("original_labels", self.original_labels)):
            if arr.shape != (n,):
                raise DataFormatError(f"{name} has shape {arr.shape}, expected ({n},)")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataFormatError("image values must lie in [0,1]")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError("labels out of range")
        bad = (self.provenance == CLEAN) & (self.labels != self.original_labels)
        if bad.any():
            raise DataFormatError("clean samples must keep their original label")
        return self

    def subset(self, indices, split=None):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.images[idx].copy(), self.labels[idx].copy(), self.num_classes,
            split or self.split, self.provenance[idx].copy(), self.original_labels[idx].copy(),
        )

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def relabeled_union(ds, keep_idx, other_idx, other_labels, split=None):
    """Dataset of keep_idx rows as-is plus other_idx rows with new labels.

    Used to merge an extracted subset with relabeled leftovers; the new
    labels are model predictions, so the clean-label consistency check
    intentionally does not apply to the result.
    """
    keep_idx = np.asarray(keep_idx, dtype=np.int64)
    other_idx = np.asarray(other_idx, dtype=np.int64)
    other_labels = np.asarray(other_labels, dtype=np.int64)
    images = np.concatenate([ds.images[keep_idx], ds.images[other_idx]])
    labels = np.concatenate([ds.labels[keep_idx], other_labels])
    prov = np.concatenate([ds.provenance[keep_idx], ds.provenance[other_idx]])
    orig = np.concatenate([ds.original_labels[keep_idx], ds.original_labels[other_idx]])
    return LabeledDataset(images.copy(), labels, ds.num_classes, split or ds.split, prov, orig)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _class_template(shape, rng, bumps=3):
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w))
    for _ in range(bumps):
        cy = rng.uniform(0.15 * h, 0.85 * h)
        cx = rng.uniform(0.15 * w, 0.85 * w)
        sig = rng.uniform(0.08, 0.22) * min(h, w)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sig * sig))
    img = img / max(img.max(), 1e-9) * 0.9
    return np.broadcast_to(img, (c, h, w)).copy()


def gen_synthetic(classes, per_class, shape, seed, noise=0.25, max_shift=2, split="train",
                  template_seed=None):
    """Class-conditional Gaussian-blob images, exactly balanced.

    Each class gets a fixed template of random smooth bumps; samples are
    the template randomly shifted by up to `max_shift` pixels plus pixel
    noise, clipped to [0,1]. Same seed, same dataset. A train/test pair
    must share `template_seed` (else they describe different classes)
    while using different sample seeds.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    template_rng = np.random.default_rng(seed if template_seed is None else template_seed)
    templates = [_class_template(shape, template_rng) for _ in range(classes)]
    n = classes * per_class
    images = np.empty((n, *shape), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for k in range(classes):
        for _ in range(per_class):
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = np.roll(templates[k], (int(dy), int(dx)), axis=(1, 2))
            img = img + rng.normal(0.0, noise, size=shape)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = k
            i += 1
    order = rng.permutation(n)
    return LabeledDataset(images[order], labels[order], classes, split).validate()


def subsample(ds, per_class, seed):
    """Exact class-balanced subset drawn with a seeded PRNG."""
    counts = ds.class_counts()
    if per_class > counts.min():
        raise ValueError(f"per_class {per_class} exceeds smallest class size {counts.min()}")
    rng = np.random.default_rng(seed)
    picked = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        picked.append(rng.choice(idx, size=per_class, replace=False))
    idx = np.concatenate(picked)
    rng.shuffle(idx)
    return ds.subset(idx)


# ---------------------------------------------------------------------------
# IDX (MNIST-style) loader
# ---------------------------------------------------------------------------

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_exact(f, n, path):
    b = f.read(n)
    if len(b) != n:
        raise DataFormatError(f"truncated file: {path}")
    return b


def load_idx(images_path, labels_path, split="train"):
    """Load an IDX image/label file pair; pixels scaled into [0,1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(f"bad IDX image magic 0x{magic:08x}: {images_path}")
        raw = _read_exact(f, count * rows * cols, images_path)
        if f.read(1):
            raise DataFormatError(f"trailing bytes in {images_path}")
    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(f"bad IDX label magic 0x{magic:08x}: {labels_path}")
        lraw = _read_exact(f, lcount, labels_path)
        if f.read(1):
            raise DataFormatError(f"trailing bytes in {labels_path}")
    if count != lcount:
        raise DataFormatError(
            f"count mismatch: {count} images in {images_path}, {lcount} labels in {labels_path}"
        )
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(count, 1, rows, cols)
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)
    k = int(labels.max()) + 1 if count else 0
    return LabeledDataset(images, labels, k, split).validate()


# ---------------------------------------------------------------------------
# CIFAR-10 binary loader
# ---------------------------------------------------------------------------

CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


def load_cifar_bin(directory, split="train", limit=None):
    """Load CIFAR-10 binary batches from a directory.

    `limit` keeps only the first n records in file order (stable).
    """
    directory = Path(directory)
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    chunks = []
    for name in names:
        path = directory / name
        if not path.exists():
            raise DataFormatError(f"missing CIFAR batch: {path}")
        raw = path.read_bytes()
        if len(raw) % CIFAR_RECORD != 0:
            raise DataFormatError(
                f"record size mismatch in {path}: {len(raw)} bytes not a multiple of {CIFAR_RECORD}"
            )
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    recs = np.concatenate(chunks)
    if limit is not None:
        recs = recs[:limit]
    labels = recs[:, 0].astype(np.int64)
    images = recs[:, 1:].astype(np.float64).reshape(-1, 3, 32, 32) / 255.0
    return LabeledDataset(images, labels, 10, split).validate()


# ---------------------------------------------------------------------------
# manifest + raw persistence
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
RAW_NAME = "images.f64"


def save_dataset(ds, directory):
    """Write a dataset as manifest.json + raw little-endian float64 images."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "count": len(ds),
        "classes": ds.num_classes,
        "shape": list(ds.shape),
        "split": ds.split,
        "dtype": "<f8",
        "labels": ds.labels.tolist(),
        "original_labels": ds.original_labels.tolist(),
        "provenance": [PROVENANCE_NAMES[int(p)] for p in ds.provenance],
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True))
    arr = np.ascontiguousarray(ds.images, dtype="<f8")
    (directory / RAW_NAME).write_bytes(arr.tobytes())


def load_dataset(directory):
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.exists():
        raise DataFormatError(f"missing manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    count = manifest["count"]
    shape = tuple(manifest["shape"])
    raw = (directory / RAW_NAME).read_bytes()
    expected = count * int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise DataFormatError(
            f"raw image file {directory / RAW_NAME} has {len(raw)} bytes, expected {expected}"
        )
    images = np.frombuffer(raw, dtype="<f8").reshape(count, *shape).astype(np.float64)
    prov = np.array([PROVENANCE_CODES[p] for p in manifest["provenance"]], dtype=np.int8)
    ds = LabeledDataset(
        images, np.array(manifest["labels"], dtype=np.int64), manifest["classes"],
        manifest["split"], prov, np.array(manifest["original_labels"], dtype=np.int64),
    )
    return ds


def save_raw_image(path, image):
    """Single image in the raw float64 format (used for trigger assets)."""
    arr = np.ascontiguousarray(image, dtype="<f8")
    Path(path).write_bytes(arr.tobytes())


def load_raw_image(path, shape):
    raw = Path(path).read_bytes()
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise DataFormatError(f"raw image {path} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
