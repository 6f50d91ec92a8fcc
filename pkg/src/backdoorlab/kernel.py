"""RBF kernel-regression surrogate for the trained network.

Stands in for the infinite-width view of training: the predicted
target-class probability at a query is the kernel-weighted share of
target-labeled and poisoned training points. Used to check, without any
gradient training, that poisoned samples keep voting for the target
class under patch perturbations once the poison count approaches the
clean count.
"""

from dataclasses import dataclass

import numpy as np

from .attacks import apply_trigger
from .partition import _normalize_clamp


@dataclass(frozen=True)
class KernelModel:
    clean_images: np.ndarray      # (N_b, C, H, W)
    clean_labels: np.ndarray      # (N_b,)
    poisoned_images: np.ndarray   # (N_p, C, H, W)
    target: int
    gamma_k: float
    num_classes: int

    def __post_init__(self):
        if self.clean_images.shape[0] < 1:
            raise ValueError("kernel model needs at least one clean sample")
        if self.gamma_k <= 0:
            raise ValueError("kernel width must be positive")


def default_gamma_k(shape):
    """1/(2d) keeps exp(-2*gamma*||.||^2) in a useful dynamic range."""
    return 1.0 / (2.0 * float(np.prod(shape)))


def rbf_kernel(x, z, gamma_k):
    """exp(-2*gamma*||x-z||^2), in (0,1]."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    return float(np.exp(-2.0 * gamma_k * np.sum(d * d)))


def _kernel_row(query, images, gamma_k):
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    flat = images.reshape(images.shape[0], -1)
    d2 = np.sum((flat - q) ** 2, axis=1)
    return np.exp(-2.0 * gamma_k * d2)


def phi_target(query, km):
    """Kernel share of target-labeled plus poisoned mass at the query."""
    kc = _kernel_row(query, km.clean_images, km.gamma_k)
    kp = (
        _kernel_row(query, km.poisoned_images, km.gamma_k)
        if km.poisoned_images.shape[0]
        else np.zeros(0)
    )
    numer = kc[km.clean_labels == km.target].sum() + kp.sum()
    denom = kc.sum() + kp.sum()
    return float(numer / denom)


def build_kernel_model(base, trigger, ratio, rng, gamma_k=None):
    """Clean set = the base dataset; poisoned set = round(ratio*N_b)
    triggered copies of base samples drawn uniformly with replacement
    (both sets i.i.d. from the same class-uniform distribution)."""
    if not (0.0 <= ratio <= 1.0):
        raise ValueError("ratio must lie in [0,1]")
    n_b = len(base)
    n_p = int(round(ratio * n_b))
    picks = rng.choice(n_b, size=n_p, replace=True) if n_p else np.array([], dtype=np.int64)
    poisoned = (
        apply_trigger(base.images[picks], trigger)
        if n_p
        else np.zeros((0, *base.shape))
    )
    if gamma_k is None:
        gamma_k = default_gamma_k(base.shape)
    return KernelModel(
        base.images.copy(), base.labels.copy(), poisoned,
        trigger.target, float(gamma_k), base.num_classes,
    )


def _random_patch_perturbation(shape, eps, r, rng):
    """Craft-style random direction: unit-L2 noise clamped to +-eps,
    written into a random r x r patch (the kernel model has no
    gradients to follow)."""
    c, h, w = shape
    g = rng.normal(size=(1, c, h, w))
    delta = _normalize_clamp(g, eps)[0]
    top = int(rng.integers(0, h - r + 1))
    left = int(rng.integers(0, w - r + 1))
    return delta, top, left


def theorem1_row(base, trigger, eps, r, ratio, rng, gamma_k=None):
    """(ratio, fraction of perturbed poisoned queries with phi >= 1/2, mean phi)."""
    km = build_kernel_model(base, trigger, ratio, rng, gamma_k=gamma_k)
    if km.poisoned_images.shape[0] == 0:
        # no poison mass: evaluate at triggered-but-unpoisoned queries
        queries = apply_trigger(base.images, trigger)
    else:
        queries = km.poisoned_images
    phis = np.empty(queries.shape[0])
    for i, q in enumerate(queries):
        delta, top, left = _random_patch_perturbation(q.shape, eps, r, rng)
        x_hat = q.copy()
        x_hat[:, top:top + r, left:left + r] = delta[:, top:top + r, left:left + r]
        np.clip(x_hat, 0.0, 1.0, out=x_hat)
        phis[i] = phi_target(x_hat, km)
    return float(ratio), float(np.mean(phis >= 0.5)), float(phis.mean())


def theorem1_check(base, trigger, eps, r, gamma_k, ratios, seed=0):
    """Fraction of robust poisoned queries per poison/clean ratio.

    Returns a list of (ratio, fraction, mean_phi) rows, one per ratio,
    in the order given.
    """
    rng = np.random.default_rng(seed)
    return [
        theorem1_row(base, trigger, eps, r, ratio, rng, gamma_k=gamma_k)
        for ratio in ratios
    ]
