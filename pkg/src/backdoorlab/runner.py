"""Composes datasets, attacks, training and defense into run directories.

A run directory holds: config.toml (echo), metrics.csv, report.json,
checkpoints/ and scores/. Everything is driven by one seed so two runs
of the same config produce byte-identical outputs.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks, defense, evaluate, nn
from .config import config_hash, write_config_echo
from .data import gen_synthetic, load_cifar_bin, load_idx, subsample


def derive_seeds(seed, n):
    """Independent child seeds for the stages of a run."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def build_dataset(cfg):
    """(train, test) pair for the configured dataset source."""
    shape = tuple(cfg.image_shape)
    train_seed, test_seed, sub_seed, template_seed = derive_seeds(cfg.seed, 4)
    if cfg.dataset == "synthetic":
        train = gen_synthetic(cfg.classes, cfg.train_per_class, shape, train_seed,
                              noise=cfg.noise, max_shift=cfg.max_shift, split="train",
                              template_seed=template_seed)
        test = gen_synthetic(cfg.classes, cfg.test_per_class, shape, test_seed,
                             noise=cfg.noise, max_shift=cfg.max_shift, split="test",
                             template_seed=template_seed)
        return train, test
    if cfg.dataset == "idx":
        root = Path(cfg.data_dir)
        train = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
        test = load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte",
                        split="test")
    else:
        train = load_cifar_bin(cfg.data_dir, split="train")
        test = load_cifar_bin(cfg.data_dir, split="test")
    train = subsample(train, cfg.train_per_class, sub_seed)
    test = subsample(test, cfg.test_per_class, sub_seed + 1)
    test.split = "test"
    return train, test


def build_model(cfg):
    shape = tuple(cfg.image_shape)
    if cfg.model == "cnn":
        return nn.conv_net(shape, cfg.classes, channels=tuple(cfg.conv_channels))
    return nn.mlp_net(shape, cfg.classes, hidden=tuple(cfg.mlp_hidden))


def build_trigger(cfg):
    """Trigger for the configured attack; a dummy badnet patch for
    attack=none so an ASR number always exists."""
    shape = tuple(cfg.image_shape)
    kind = cfg.attack
    if kind in ("badnet", "tact", "none"):
        return attacks.make_badnet(shape, cfg.target)
    if kind in ("blend", "adaptive_blend"):
        pattern = attacks.blend_pattern(shape)
        return attacks.make_blend(pattern, cfg.blend_alpha, cfg.target, shape)
    if kind == "sig":
        return attacks.make_sig(shape, cfg.sig_delta, cfg.sig_freq, cfg.target)
    raise ValueError(f"unknown attack {kind!r}")


def build_plan(cfg, trigger):
    if cfg.attack == "none":
        return None
    cover = cfg.cover_rate if cfg.attack in ("tact", "adaptive_blend") else 0.0
    (plan_seed,) = derive_seeds(cfg.seed + 1, 1)
    return attacks.PoisonPlan(
        cfg.attack, cfg.poison_ratio, trigger, plan_seed,
        cover_rate=cover, source=cfg.source if cfg.attack == "tact" else None,
    )


def build_schedule(cfg):
    return defense.DefenseSchedule(
        gamma=cfg.gamma, enhance_epochs=cfg.enhance_epochs,
        standard_epochs=cfg.standard_epochs, lr_train=cfg.lr_train,
        lr_unlearn=cfg.lr_unlearn, eps=cfg.eps, patch_size=cfg.patch_size,
        batch_size=cfg.batch_size, unlearn_clip=cfg.unlearn_clip,
        perturb_mode=cfg.perturb_mode,
    )


def prepare_run(cfg):
    """Datasets, model spec, trigger and (optionally) the poisoned train set."""
    train, test = build_dataset(cfg)
    spec = build_model(cfg)
    trigger = build_trigger(cfg)
    plan = build_plan(cfg, trigger)
    poisoned = attacks.poison_dataset(train, plan) if plan else train
    asr_set = attacks.make_asr_testset(test, trigger)
    return train, test, poisoned, asr_set, spec, trigger


def _fmt(x):
    return format(float(x), ".12g")


class MetricsLog:
    """Collects (epoch, phase, acc, asr, n_clean, p) rows for metrics.csv."""

    def __init__(self):
        self.rows = []

    def add(self, epoch, phase, acc, asr, n_clean, p=None):
        self.rows.append({
            "epoch": epoch, "phase": phase, "acc": _fmt(acc), "asr": _fmt(asr),
            "n_clean": n_clean, "p": _fmt(p) if p is not None else "",
        })

    def write(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "phase", "acc", "asr", "n_clean", "p"])
            for r in self.rows:
                w.writerow([r["epoch"], r["phase"], r["acc"], r["asr"], r["n_clean"], r["p"]])


def _ensure_run_dir(cfg, out):
    root = Path(out)
    (root / "checkpoints").mkdir(parents=True, exist_ok=True)
    (root / "scores").mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, root / "config.toml")
    return root


def train_undefended(cfg, poisoned, spec, rng):
    """Plain training on the (possibly poisoned) set — the no-defense model."""
    params = nn.init_params(spec, rng)
    for _ in range(cfg.baseline_epochs):
        defense.train_epoch(spec, params, poisoned.images, poisoned.labels,
                            cfg.lr_train, cfg.batch_size, rng)
    return params


def run_train(cfg, out=None):
    """`train` subcommand: undefended model, metrics, checkpoint."""
    out = Path(out or cfg.out)
    root = _ensure_run_dir(cfg, out)
    train, test, poisoned, asr_set, spec, trigger = prepare_run(cfg)
    (rng_seed,) = derive_seeds(cfg.seed + 2, 1)
    rng = np.random.default_rng(rng_seed)
    params = train_undefended(cfg, poisoned, spec, rng)
    acc = evaluate.compute_acc(spec, params, test)
    asr = evaluate.compute_asr(spec, params, asr_set)
    nn.save_params(root / "checkpoints" / "undefended.ckpt", params)
    report = {
        "acc": acc, "asr": asr, "config_hash": config_hash(cfg),
        "defense_success": bool(asr < evaluate.ASR_SUCCESS_THRESHOLD),
        "seed": cfg.seed, "attack": cfg.attack,
    }
    (root / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


def run_defend(cfg, out=None, relearn=None):
    """Full defense: enhancement, extraction, clean training, optional relearn."""
    out = Path(out or cfg.out)
    root = _ensure_run_dir(cfg, out)
    do_relearn = cfg.relearn if relearn is None else relearn

    train, test, poisoned, asr_set, spec, trigger = prepare_run(cfg)
    (rng_seed,) = derive_seeds(cfg.seed + 2, 1)
    rng = np.random.default_rng(rng_seed)
    sched = build_schedule(cfg)
    log = MetricsLog()
    last_outcome = {}

    def on_enhance(epoch, params, outcome):
        acc = evaluate.compute_acc(spec, params, test)
        asr = evaluate.compute_asr(spec, params, asr_set)
        log.add(epoch, "enhance", acc, asr, int(outcome.clean_idx.size), outcome.p)
        last_outcome["outcome"] = outcome

    enhanced, trace = defense.enhance_backdoor(poisoned, spec, sched, rng,
                                               on_epoch=on_enhance)
    nn.save_params(root / "checkpoints" / "enhanced.ckpt", enhanced)
    evaluate.export_histogram(last_outcome["outcome"], poisoned, root / "scores")

    d_clean, clean_idx = defense.extract_clean(poisoned, spec, enhanced)

    def on_clean(epoch, params, loss):
        acc = evaluate.compute_acc(spec, params, test)
        asr = evaluate.compute_asr(spec, params, asr_set)
        log.add(epoch, "clean", acc, asr, len(d_clean))

    clean_params = defense.train_clean(
        d_clean, spec, sched.standard_epochs, sched.lr_train, sched.batch_size,
        rng, on_epoch=on_clean,
    )
    nn.save_params(root / "checkpoints" / "clean.ckpt", clean_params)

    acc_before = evaluate.compute_acc(spec, clean_params, test)
    asr_before = evaluate.compute_asr(spec, clean_params, asr_set)
    acc_after, asr_after = acc_before, asr_before

    if do_relearn:
        def on_relearn(epoch, params, loss):
            acc = evaluate.compute_acc(spec, params, test)
            asr = evaluate.compute_asr(spec, params, asr_set)
            log.add(epoch, "relearn", acc, asr, len(d_clean))

        final_params, _ = defense.relabel_relearn(
            poisoned, clean_idx, spec, clean_params, cfg.relearn_epochs,
            cfg.relearn_lr, sched.batch_size, rng, on_epoch=on_relearn,
        )
        acc_after = evaluate.compute_acc(spec, final_params, test)
        asr_after = evaluate.compute_asr(spec, final_params, asr_set)
        nn.save_params(root / "checkpoints" / "final.ckpt", final_params)
    else:
        final_params = clean_params

    quality = evaluate.detection_quality(clean_idx, poisoned)
    log.write(root / "metrics.csv")
    report = {
        "acc_before": acc_before, "acc_after": acc_after,
        "asr_before": asr_before, "asr_after": asr_after,
        "precision": quality.precision, "recall": quality.recall, "f1": quality.f1,
        "n_clean": len(d_clean),
        "defense_success": bool(asr_after < evaluate.ASR_SUCCESS_THRESHOLD),
        "relearn": bool(do_relearn),
        "config_hash": config_hash(cfg), "seed": cfg.seed, "attack": cfg.attack,
    }
    (root / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report, trace


def run_eval(cfg, checkpoint):
    """ACC/ASR of a stored checkpoint under the configured data + trigger."""
    train, test, poisoned, asr_set, spec, trigger = prepare_run(cfg)
    params = nn.load_params(checkpoint)
    acc = evaluate.compute_acc(spec, params, test)
    asr = evaluate.compute_asr(spec, params, asr_set)
    return {"acc": acc, "asr": asr,
            "defense_success": bool(asr < evaluate.ASR_SUCCESS_THRESHOLD)}


def run_kl_hist(cfg, checkpoint, out=None):
    """Score the (poisoned) training set under a checkpointed model."""
    from .partition import partition_dataset

    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test, poisoned, asr_set, spec, trigger = prepare_run(cfg)
    params = nn.load_params(checkpoint)
    (rng_seed,) = derive_seeds(cfg.seed + 3, 1)
    rng = np.random.default_rng(rng_seed)
    outcome = partition_dataset(poisoned, spec, params, cfg.eps, cfg.patch_size,
                                1.0 - cfg.gamma, rng, mode=cfg.perturb_mode)
    evaluate.export_histogram(outcome, poisoned, out)
    return outcome


def run_kernel_check(cfg, out=None, ratios=None):
    """Kernel-oracle robustness fractions, one CSV row per ratio."""
    from .kernel import default_gamma_k, theorem1_check

    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    shape = tuple(cfg.image_shape)
    (data_seed, check_seed) = derive_seeds(cfg.seed + 4, 2)
    base = gen_synthetic(cfg.classes, cfg.train_per_class, shape, data_seed,
                         noise=cfg.noise, max_shift=cfg.max_shift)
    trigger = build_trigger(cfg)
    gamma_k = cfg.kernel_gamma if cfg.kernel_gamma > 0 else default_gamma_k(shape)
    rows = theorem1_check(base, trigger, cfg.eps, cfg.patch_size, gamma_k,
                          ratios or cfg.kernel_ratios, seed=check_seed)
    evaluate.write_kernel_csv(out / "kernel_check.csv", rows)
    return rows


def run_gen_data(cfg, out=None):
    from .data import save_dataset

    out = Path(out or cfg.out)
    train, test = build_dataset(cfg)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    return {"train": len(train), "test": len(test)}


def run_poison(cfg, out=None):
    from .data import save_dataset

    out = Path(out or cfg.out)
    train, test, poisoned, asr_set, spec, trigger = prepare_run(cfg)
    if cfg.attack == "none":
        raise ValueError("no samples to poison (attack = none)")
    save_dataset(poisoned, out / "train_poisoned")
    attacks.save_trigger(out / "trigger", trigger)
    n_payload = int(np.sum(poisoned.provenance == 1))
    n_cover = int(np.sum(poisoned.provenance == 2))
    return {"total": len(poisoned), "payload": n_payload, "cover": n_cover}
