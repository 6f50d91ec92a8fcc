"""Trigger construction and dataset poisoning.

A trigger is a (mask, pattern, target) triple applied as
x' = (1-m)*x + m*t, clipped to [0,1]. Additive triggers (the sinusoid)
reuse the same blending form with the pattern acting as a signed offset
on top of the image. Poisoning recipes: badnet, blend, sig (clean
label), tact (source-specific + covers), adaptive_blend (covers).
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    POISON_COVER,
    POISON_PAYLOAD,
    LabeledDataset,
    load_raw_image,
    save_raw_image,
)

ATTACK_KINDS = ("badnet", "blend", "sig", "tact", "adaptive_blend")


@dataclass(frozen=True)
class TriggerSpec:
    """Blending mask, pattern and target class.

    For `additive` triggers the pattern is a signed offset in [-1,1]
    added under the mask before clipping; otherwise the pattern is an
    image in [0,1] blended in by the mask.
    """

    mask: np.ndarray
    pattern: np.ndarray
    target: int
    additive: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=np.float64))
        object.__setattr__(self, "pattern", np.asarray(self.pattern, dtype=np.float64))
        if self.mask.shape != self.pattern.shape:
            raise ValueError("mask and pattern shapes differ")
        if self.mask.min() < 0.0 or self.mask.max() > 1.0:
            raise ValueError("mask entries must lie in [0,1]")
        if not self.additive and (self.pattern.min() < 0.0 or self.pattern.max() > 1.0):
            raise ValueError("pattern values must lie in [0,1]")


def apply_trigger(x, trig):
    """x' = (1-m)*x + m*t, clipped to [0,1]; works on (C,H,W) or (N,C,H,W)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != trig.mask.shape:
        raise ValueError(f"image shape {x.shape} does not match trigger {trig.mask.shape}")
    t = x + trig.pattern if trig.additive else trig.pattern
    out = (1.0 - trig.mask) * x + trig.mask * t
    return np.clip(out, 0.0, 1.0)


def make_badnet(shape, target):
    """3x3 white square in the bottom-right corner, all channels."""
    c, h, w = shape
    if h < 3 or w < 3:
        raise ValueError("image too small for a 3x3 patch")
    mask = np.zeros(shape)
    mask[:, h - 3:, w - 3:] = 1.0
    pattern = np.zeros(shape)
    pattern[:, h - 3:, w - 3:] = 1.0
    return TriggerSpec(mask, pattern, target)


def _fit_pattern(pattern, shape):
    """Center-crop or nearest-neighbour resize a pattern to the image shape."""
    pattern = np.asarray(pattern, dtype=np.float64)
    c, h, w = shape
    pc, ph, pw = pattern.shape
    if pc == 1 and c > 1:
        pattern = np.broadcast_to(pattern, (c, ph, pw)).copy()
    elif pc > 1 and c == 1:
        pattern = pattern.mean(axis=0, keepdims=True)
    elif pc != c:
        raise ValueError(f"cannot fit {pc}-channel pattern to {c}-channel images")
    if (ph, pw) != (h, w):
        if ph >= h and pw >= w:
            top, left = (ph - h) // 2, (pw - w) // 2
            pattern = pattern[:, top:top + h, left:left + w]
        else:
            ri = (np.arange(h) * ph // h).clip(0, ph - 1)
            ci = (np.arange(w) * pw // w).clip(0, pw - 1)
            pattern = pattern[:, ri][:, :, ci]
    return pattern


def make_blend(pattern_image, alpha, target, shape=None):
    """Whole-image blend: constant mask alpha, pattern fitted to shape."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0,1)")
    pattern = np.asarray(pattern_image, dtype=np.float64)
    if shape is not None:
        pattern = _fit_pattern(pattern, shape)
    mask = np.full(pattern.shape, float(alpha))
    return TriggerSpec(mask, pattern, target)


def blend_pattern(shape, seed=7):
    """Deterministic procedurally generated texture standing in for a
    stock blend image that cannot be redistributed."""
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        py, px = rng.uniform(0.0, 2.0 * np.pi, size=2)
        img += rng.uniform(0.4, 1.0) * np.sin(2 * np.pi * fy * yy / h + py) * np.sin(
            2 * np.pi * fx * xx / w + px
        )
    img = (img - img.min()) / max(img.max() - img.min(), 1e-9)
    return np.broadcast_to(img, (c, h, w)).copy()


def make_sig(shape, delta, freq, target):
    """Horizontal sinusoid offset v(i,j) = delta*sin(2*pi*j*freq/W), additive."""
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0,1)")
    if freq < 1:
        raise ValueError("freq must be >= 1")
    c, h, w = shape
    j = np.arange(w)
    v = delta * np.sin(2.0 * np.pi * j * freq / w)
    pattern = np.broadcast_to(v, (c, h, w)).copy()
    mask = np.ones(shape)
    return TriggerSpec(mask, pattern, target, additive=True)


@dataclass(frozen=True)
class PoisonPlan:
    kind: str
    poison_ratio: float
    trigger: TriggerSpec
    seed: int
    cover_rate: float = 0.0
    source: int = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not (0.0 <= self.poison_ratio <= 0.5):
            raise ValueError("poison ratio must lie in [0, 0.5]")
        if not (0.0 <= self.cover_rate <= 0.1):
            raise ValueError("cover rate must lie in [0, 0.1]")
        if self.kind == "tact" and self.source is None:
            raise ValueError("tact needs a source class")


def poison_dataset(ds, plan):
    """Poisoned copy of `ds` per the plan, reshuffled, provenance flagged.

    badnet/blend: any samples, relabeled to the target.
    sig: target-class samples only, labels kept (clean label).
    tact: source-class samples relabeled + covers from other classes
          that keep their true labels.
    adaptive_blend: relabeled payloads + true-label covers.
    """
    n = len(ds)
    n_payload = int(plan.poison_ratio * n + 1e-9)  # floor, robust to float dust
    if n_payload < 1:
        raise ValueError("no samples to poison")
    n_cover = int(plan.cover_rate * n + 1e-9)
    rng = np.random.default_rng(plan.seed)
    trig = plan.trigger

    if plan.kind == "sig":
        pool = np.flatnonzero(ds.labels == trig.target)
    elif plan.kind == "tact":
        pool = np.flatnonzero(ds.labels == plan.source)
    else:
        pool = np.arange(n)
    if n_payload > pool.size:
        raise ValueError(
            f"cannot poison {n_payload} samples: only {pool.size} eligible for {plan.kind}"
        )
    payload = rng.choice(pool, size=n_payload, replace=False)

    cover = np.array([], dtype=np.int64)
    if plan.kind in ("tact", "adaptive_blend") and n_cover > 0:
        if plan.kind == "tact":
            cover_pool = np.flatnonzero(ds.labels != plan.source)
        else:
            cover_pool = np.arange(n)
        cover_pool = np.setdiff1d(cover_pool, payload)
        if n_cover > cover_pool.size:
            raise ValueError("not enough samples for cover set")
        cover = rng.choice(cover_pool, size=n_cover, replace=False)

    images = ds.images.copy()
    labels = ds.labels.copy()
    provenance = ds.provenance.copy()
    original = ds.original_labels.copy()

    images[payload] = apply_trigger(images[payload], trig)
    provenance[payload] = POISON_PAYLOAD
    if plan.kind != "sig":
        labels[payload] = trig.target

    if cover.size:
        images[cover] = apply_trigger(images[cover], trig)
        provenance[cover] = POISON_COVER

    order = rng.permutation(n)
    return LabeledDataset(
        images[order], labels[order], ds.num_classes, ds.split,
        provenance[order], original[order],
    ).validate()


def make_asr_testset(test, trig):
    """Triggered copies of all non-target test samples, labeled target."""
    idx = np.flatnonzero(test.labels != trig.target)
    images = apply_trigger(test.images[idx], trig)
    labels = np.full(idx.size, trig.target, dtype=np.int64)
    prov = np.full(idx.size, POISON_PAYLOAD, dtype=np.int8)
    return LabeledDataset(images, labels, test.num_classes, "test", prov, test.labels[idx].copy())


def save_trigger(directory, trig):
    """Persist a trigger as JSON metadata plus raw float64 mask/pattern."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "shape": list(trig.mask.shape),
        "target": int(trig.target),
        "additive": bool(trig.additive),
    }
    (directory / "trigger.json").write_text(json.dumps(meta, sort_keys=True))
    save_raw_image(directory / "mask.f64", trig.mask)
    save_raw_image(directory / "pattern.f64", trig.pattern)


def load_trigger(directory):
    directory = Path(directory)
    meta = json.loads((directory / "trigger.json").read_text())
    shape = tuple(meta["shape"])
    mask = load_raw_image(directory / "mask.f64", shape)
    pattern = load_raw_image(directory / "pattern.f64", shape)
    return TriggerSpec(mask, pattern, meta["target"], meta["additive"])
