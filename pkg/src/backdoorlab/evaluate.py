"""Metrics, detection quality against ground truth, and score exports.

This is the only place (besides tests) allowed to read provenance
flags; everything here is about judging a run, not steering it.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import CLEAN

# A defense run counts as successful when the post-defense attack
# success rate stays below this fraction.
ASR_SUCCESS_THRESHOLD = 0.20


@dataclass(frozen=True)
class Metrics:
    acc: float
    asr: float

    @property
    def defense_success(self):
        return self.asr < ASR_SUCCESS_THRESHOLD


def compute_acc(spec, params, ds):
    """Fraction of samples classified as their label."""
    if len(ds) == 0:
        raise ValueError("cannot compute accuracy on an empty dataset")
    preds = nn.predict_batch(spec, params, ds.images)
    return float(np.mean(preds == ds.labels))


def compute_asr(spec, params, asr_ds):
    """Fraction of the triggered set predicted as the target label.

    The set built by make_asr_testset already carries the target as its
    label for every row, so this is accuracy on that set.
    """
    if len(asr_ds) == 0:
        raise ValueError("ASR set is empty (every test sample was already the target class)")
    return compute_acc(spec, params, asr_ds)


@dataclass(frozen=True)
class DetectionQuality:
    precision: float
    recall: float
    f1: float


def detection_quality(clean_idx, ds):
    """Precision/recall of poison identification.

    Predicted-poison = everything the defense retained (not extracted
    as clean); ground truth comes from provenance flags.
    """
    clean_idx = np.asarray(clean_idx, dtype=np.int64)
    predicted_poison = np.ones(len(ds), dtype=bool)
    predicted_poison[clean_idx] = False
    true_poison = ds.provenance != CLEAN
    tp = int(np.sum(predicted_poison & true_poison))
    fp = int(np.sum(predicted_poison & ~true_poison))
    fn = int(np.sum(~predicted_poison & true_poison))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionQuality(precision, recall, f1)


def clean_extraction_stats(clean_idx, ds):
    """(recall of true-clean samples, poison contamination of the extract)."""
    clean_idx = np.asarray(clean_idx, dtype=np.int64)
    is_clean = ds.provenance == CLEAN
    n_true_clean = int(is_clean.sum())
    got_clean = int(is_clean[clean_idx].sum())
    recall = got_clean / n_true_clean if n_true_clean else 0.0
    contamination = 1.0 - got_clean / clean_idx.size if clean_idx.size else 0.0
    return recall, contamination


# ---------------------------------------------------------------------------
# rank statistics used by trend and separability checks
# ---------------------------------------------------------------------------

def _average_ranks(values):
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    """Spearman rank correlation with average ranks for ties."""
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    return float(np.sum(rx * ry) / denom) if denom > 0 else 0.0


def roc_auc(scores, positive):
    """AUC for `positive` samples scoring higher, via the rank-sum form."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative samples for AUC")
    ranks = _average_ranks(scores)
    r_pos = ranks[positive].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def smooth(values, window=2):
    """Trailing moving average used by the trend checks."""
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    for i in range(v.size):
        lo = max(0, i - window + 1)
        out[i] = v[lo:i + 1].mean()
    return out


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------

def _fmt(x):
    return format(float(x), ".12g")


def write_scores_csv(path, outcome, ds):
    """index, kl_score, provenance, assigned_partition rows."""
    from .data import PROVENANCE_NAMES

    clean = set(outcome.clean_idx.tolist())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "kl_score", "provenance", "assigned_partition"])
        for i, score in enumerate(outcome.scores):
            w.writerow([
                i, _fmt(score), PROVENANCE_NAMES[int(ds.provenance[i])],
                "clean" if i in clean else "retained",
            ])


def write_histogram_csv(path, scores, ds, bins=30):
    """Binned clean-vs-poison score counts (Fig-style histogram data)."""
    scores = np.asarray(scores, dtype=np.float64)
    is_clean = ds.provenance == CLEAN
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        # degenerate spread: one bin holding everything
        rows = [(lo, hi, int(is_clean.sum()), int((~is_clean).sum()))]
    else:
        edges = np.linspace(lo, hi, bins + 1)
        n_clean, _ = np.histogram(scores[is_clean], bins=edges)
        n_poison, _ = np.histogram(scores[~is_clean], bins=edges)
        rows = [
            (edges[i], edges[i + 1], int(n_clean[i]), int(n_poison[i]))
            for i in range(len(edges) - 1)
        ]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "n_clean", "n_poison"])
        for blo, bhi, nc, npn in rows:
            w.writerow([_fmt(blo), _fmt(bhi), nc, npn])


def export_histogram(outcome, ds, directory, bins=30):
    """Write scores.csv and histogram.csv for a partition outcome."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_scores_csv(directory / "scores.csv", outcome, ds)
    write_histogram_csv(directory / "histogram.csv", outcome.scores, ds, bins=bins)
    return directory


def write_kernel_csv(path, rows):
    """theorem-check output: ratio, fraction, mean_phi."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ratio", "fraction", "mean_phi"])
        for ratio, fraction, mean_phi in rows:
            w.writerow([_fmt(ratio), _fmt(fraction), _fmt(mean_phi)])


def read_csv_rows(path):
    """Re-parse one of our CSV exports into a list of dict rows."""
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
