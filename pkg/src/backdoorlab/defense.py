"""Iterative backdoor enhancement and clean-model training.

The enhancement loop alternates one epoch of training on the retained
pool with one epoch of gradient *ascent* on the samples the partition
stage flagged as clean, under a shrinking partition rate
p = 1 - (e+1)*gamma. The end product is a model that still fires on
triggered samples but misclassifies ordinary ones, so misclassification
becomes the clean-sample detector. A fresh model is then trained on the
extracted subset; optionally the leftovers are relabeled with that
model's predictions and used for fine-tuning.

Nothing in this module may look at ground-truth poisoning flags.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import relabeled_union
from .partition import partition_dataset


class DefenseError(RuntimeError):
    """The defense pipeline reached an unusable state."""


@dataclass
class DefenseSchedule:
    gamma: float = 0.05            # per-epoch clean-fraction increment
    enhance_epochs: int = 10
    standard_epochs: int = 30
    lr_train: float = 0.1
    lr_unlearn: float = 1e-4
    eps: float = 1e-3              # perturbation bound
    patch_size: int = 2
    batch_size: int = 32
    unlearn_clip: float = 5.0      # per-batch gradient L2 cap during ascent
    perturb_mode: str = "replace"

    def validate(self):
        if self.enhance_epochs * self.gamma >= 1.0:
            raise ValueError(
                f"schedule error: p reaches {1.0 - self.enhance_epochs * self.gamma:.3f} "
                f"(enhance_epochs*gamma must stay below 1)"
            )
        for name in ("gamma", "lr_train", "lr_unlearn", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patch_size < 1 or self.batch_size < 1:
            raise ValueError("patch_size and batch_size must be >= 1")
        return self


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def train_epoch(spec, params, images, labels, lr, batch_size, rng):
    """One shuffled epoch of plain SGD; returns mean batch loss."""
    losses = []
    for idx in _batches(images.shape[0], batch_size, rng):
        loss, _ = nn.loss_and_grads(spec, params, (images[idx], labels[idx]))
        nn.sgd_step(params, params.grads, lr, "descend")
        losses.append(loss)
    return float(np.mean(losses))


def _clip_grads(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return grads


def unlearn_epoch(spec, params, images, labels, lr, batch_size, rng, clip=5.0):
    """One epoch of gradient ascent on the cross-entropy of the given pool.

    lr may be 0 (no-op). Per-batch gradients are L2-clipped so the
    ascent cannot blow the parameters up; a non-finite loss aborts.
    """
    if images.shape[0] == 0:
        raise ValueError("unlearn pool must be non-empty")
    if lr == 0.0:
        return params
    losses = []
    for idx in _batches(images.shape[0], batch_size, rng):
        loss, _ = nn.loss_and_grads(spec, params, (images[idx], labels[idx]))
        if not np.isfinite(loss):
            raise DefenseError(
                f"non-finite loss {loss} during unlearning "
                f"(lr={lr}, batch of {idx.size}); lower lr_unlearn or the clip"
            )
        _clip_grads(params.grads, clip)
        nn.sgd_step(params, params.grads, lr, "ascend")
        losses.append(loss)
    if not params.finite():
        raise DefenseError("parameters became non-finite during unlearning")
    return params


@dataclass
class EnhanceEpoch:
    epoch: int
    p: float
    n_clean: int
    train_loss: float
    clean_pool_loss: float  # mean loss on that epoch's clean side, pre-ascent


def enhance_backdoor(ds, spec, sched, rng, on_epoch=None):
    """Run the enhancement loop on the untrusted set.

    Per epoch e: train on the current retained pool, re-partition the
    *original* set at p = 1-(e+1)*gamma with the current model, then
    unlearn that epoch's clean side. Returns the enhanced parameters
    and a per-epoch trace; `on_epoch(epoch, params, outcome)` lets the
    caller record metrics without this module touching ground truth.
    """
    sched.validate()
    params = nn.init_params(spec, rng)
    retained = np.arange(len(ds))
    trace = []
    for e in range(sched.enhance_epochs):
        train_loss = train_epoch(
            spec, params, ds.images[retained], ds.labels[retained],
            sched.lr_train, sched.batch_size, rng,
        )
        p = 1.0 - (e + 1) * sched.gamma
        outcome = partition_dataset(
            ds, spec, params, sched.eps, sched.patch_size, p, rng,
            mode=sched.perturb_mode,
        )
        clean_idx = outcome.clean_idx
        clean_pool_loss = float("nan")
        if clean_idx.size:
            clean_pool_loss = float(nn.per_sample_losses(
                spec, params, ds.images[clean_idx], ds.labels[clean_idx]
            ).mean())
            unlearn_epoch(
                spec, params, ds.images[clean_idx], ds.labels[clean_idx],
                sched.lr_unlearn, sched.batch_size, rng, clip=sched.unlearn_clip,
            )
        retained = outcome.retained_idx
        trace.append(EnhanceEpoch(e, p, int(clean_idx.size), train_loss, clean_pool_loss))
        if on_epoch is not None:
            on_epoch(e, params, outcome)
    return params, trace


def extract_clean(ds, spec, params):
    """Samples the enhanced model misclassifies, with their indices."""
    preds = nn.predict_batch(spec, params, ds.images)
    idx = np.flatnonzero(preds != ds.labels)
    if idx.size == 0:
        raise DefenseError("enhancement failed: model classifies every sample correctly")
    return ds.subset(idx), idx


def train_clean(ds_clean, spec, epochs, lr, batch_size, rng, on_epoch=None):
    """Train a fresh model on the extracted subset."""
    if len(ds_clean) == 0:
        raise ValueError("clean training set must be non-empty")
    params = nn.init_params(spec, rng)
    for e in range(epochs):
        loss = train_epoch(
            spec, params, ds_clean.images, ds_clean.labels, lr, batch_size, rng
        )
        if on_epoch is not None:
            on_epoch(e, params, loss)
    return params


def relabel_relearn(ds, clean_idx, spec, params, epochs, lr, batch_size, rng,
                    on_epoch=None):
    """Relabel the non-extracted remainder with the clean model's
    predictions, merge, and fine-tune on the union."""
    clean_idx = np.asarray(clean_idx, dtype=np.int64)
    mask = np.ones(len(ds), dtype=bool)
    mask[clean_idx] = False
    other_idx = np.flatnonzero(mask)
    new_labels = (
        nn.predict_batch(spec, params, ds.images[other_idx])
        if other_idx.size
        else np.zeros(0, dtype=np.int64)
    )
    combined = relabeled_union(ds, clean_idx, other_idx, new_labels)
    for e in range(epochs):
        loss = train_epoch(
            spec, params, combined.images, combined.labels, lr, batch_size, rng
        )
        if on_epoch is not None:
            on_epoch(e, params, loss)
    return params, combined
