"""Robustness scoring and dataset partition.

Every sample gets a KL score: divergence between the model's output on
the image and on a patch-perturbed copy, where the perturbation is the
input-loss gradient normalized to unit L2 and clamped elementwise to
+-eps, written into a random r x r square. High scores (sensitive
samples) are split off as the presumed-clean side.
"""

from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass(frozen=True)
class PatchMask:
    """Binary r x r square mask shared by all channels."""

    mask: np.ndarray  # (C,H,W), exactly r*r ones per channel
    r: int
    top: int
    left: int


def random_patch_mask(shape, r, rng):
    """Square patch with the top-left corner uniform over valid positions."""
    c, h, w = shape
    if r > min(h, w):
        raise ValueError(f"patch size {r} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - r + 1))
    left = int(rng.integers(0, w - r + 1))
    mask = np.zeros(shape)
    mask[:, top:top + r, left:left + r] = 1.0
    return PatchMask(mask, r, top, left)


def _normalize_clamp(grads, eps):
    """Per-sample: g / ||g||_2 clamped to [-eps, eps]; zero grad stays zero."""
    flat = grads.reshape(grads.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    delta = grads / safe.reshape(-1, *([1] * (grads.ndim - 1)))
    return np.clip(delta, -eps, eps)


def craft_perturbation(spec, params, x, y, eps):
    """Adversarial direction at a single input."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, input_grads = nn.loss_and_grads(spec, params, ([x], [y]))
    return _normalize_clamp(input_grads, eps)[0]


def craft_perturbation_batch(spec, params, images, labels, eps, chunk=256):
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = np.empty_like(images)
    for lo in range(0, images.shape[0], chunk):
        _, g = nn.loss_and_grads(
            spec, params, (images[lo:lo + chunk], labels[lo:lo + chunk])
        )
        out[lo:lo + chunk] = _normalize_clamp(g, eps)
    return out


def perturb_input(x, patch, delta, mode="replace"):
    """Write the perturbation into the patch.

    replace: x_hat = x*(1-m) + m*delta (patch pixels become delta).
    add:     x_hat = x + m*delta.
    Both clipped back to [0,1].
    """
    m = patch.mask
    if mode == "replace":
        out = x * (1.0 - m) + m * delta
    elif mode == "add":
        out = x + m * delta
    else:
        raise ValueError(f"unknown perturb mode {mode!r}")
    return np.clip(out, 0.0, 1.0)


def kl_score(spec, params, x, x_hat):
    """KL(f(x) || f(x_hat)) — low means the prediction barely moved."""
    p = nn.forward(spec, params, x)
    q = nn.forward(spec, params, x_hat)
    return nn.kl_divergence(p, q)


@dataclass(frozen=True)
class PartitionOutcome:
    """Per-sample scores plus the resulting index split.

    clean_idx holds the highest-scoring (least robust) samples; the
    retained_idx remainder is the still-suspect pool. Both are sorted
    ascending. |clean_idx| == round((1-p)*N).
    """

    scores: np.ndarray
    clean_idx: np.ndarray
    retained_idx: np.ndarray
    p: float


def score_dataset(ds, spec, params, eps, r, rng, mode="replace", chunk=256):
    """KL score of every sample, index-ordered; one fresh mask each."""
    n = len(ds)
    c, h, w = ds.shape
    tops = rng.integers(0, h - r + 1, size=n)
    lefts = rng.integers(0, w - r + 1, size=n)

    deltas = craft_perturbation_batch(spec, params, ds.images, ds.labels, eps, chunk=chunk)
    perturbed = ds.images.copy()
    for i in range(n):
        t, l = tops[i], lefts[i]
        if mode == "replace":
            perturbed[i, :, t:t + r, l:l + r] = deltas[i, :, t:t + r, l:l + r]
        else:
            perturbed[i, :, t:t + r, l:l + r] += deltas[i, :, t:t + r, l:l + r]
    np.clip(perturbed, 0.0, 1.0, out=perturbed)

    p_orig = nn.forward_batch(spec, params, ds.images, chunk=chunk)
    p_pert = nn.forward_batch(spec, params, perturbed, chunk=chunk)
    return nn.kl_rows(p_orig, p_pert)


def split_by_scores(scores, p):
    """Highest-score (1-p) fraction -> clean side; ties keep index order."""
    if not (0.0 <= p <= 1.0):
        raise ValueError("partition rate p must lie in [0,1]")
    n = scores.shape[0]
    n_clean = int(round((1.0 - p) * n))
    order = np.argsort(-scores, kind="stable")
    clean = np.sort(order[:n_clean])
    retained = np.sort(order[n_clean:])
    return clean, retained


def partition_dataset(ds, spec, params, eps, r, p, rng, mode="replace", chunk=256):
    """Score the whole set and split it at partition rate p."""
    scores = score_dataset(ds, spec, params, eps, r, rng, mode=mode, chunk=chunk)
    clean, retained = split_by_scores(scores, p)
    return PartitionOutcome(scores, clean, retained, float(p))
