"""Frame-level evaluation: clip-to-frame expansion, late fusion, metrics, ROC."""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels
from .dataset import FRAMES_PER_CLIP
from .errors import SynchronizationError, UndefinedAUCError, ValidationError


@dataclass
class FrameScoreSeq:
    scores: np.ndarray
    labels: np.ndarray
    scene_id: str = ""
    source: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise SynchronizationError(f"{self.scores.shape[0]} scores vs {self.labels.shape[0]} labels")
        if self.scores.shape[0] % FRAMES_PER_CLIP:
            raise SynchronizationError(f"frame count {self.scores.shape[0]} is not a multiple of {FRAMES_PER_CLIP}")

    def __len__(self):
        return self.scores.shape[0]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    fpr: float
    bacc: float
    prec: float
    rec: float
    f1: float
    threshold: float = 0.5
    degenerate: tuple = ()

    def as_dict(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


METRIC_NAMES = ("auc", "fpr", "bacc", "prec", "rec", "f1")


@dataclass(frozen=True)
class FusionConfig:
    strategy: str = "max"
    beta: float = None

    def __post_init__(self):
        if self.strategy not in ("linear", "max", "min"):
            raise ValidationError(f"fusion strategy must be linear, max or min, got {self.strategy!r}")
        if self.strategy == "linear":
            b = 0.5 if self.beta is None else self.beta
            if not 0.0 <= b <= 1.0:
                raise ValidationError(f"beta must be in [0, 1], got {b}")
            object.__setattr__(self, "beta", float(b))
        elif self.beta is not None:
            raise ValidationError("beta only applies to linear fusion")

    @property
    def tag(self):
        return f"linear(beta={self.beta:g})" if self.strategy == "linear" else self.strategy


def expand_to_frames(bag, frame_labels):
    """Repeat each clip score over its 16 frames."""
    labels = np.asarray(frame_labels)
    n = len(bag.scores)
    if labels.shape[0] != FRAMES_PER_CLIP * n:
        raise SynchronizationError(f"{labels.shape[0]} frame labels for {n} clips (need {FRAMES_PER_CLIP * n})")
    return FrameScoreSeq(np.repeat(bag.scores, FRAMES_PER_CLIP), labels, bag.scene_id, str(bag.camera_id))


def concat(seqs, source=""):
    return FrameScoreSeq(
        np.concatenate([s.scores for s in seqs]), np.concatenate([s.labels for s in seqs]), "pooled", source
    )


def fuse(seqs, cfg=FusionConfig()):
    if not seqs:
        raise ValidationError("nothing to fuse")
    first = seqs[0]
    for s in seqs[1:]:
        if len(s) != len(first) or not np.array_equal(s.labels, first.labels):
            raise SynchronizationError("fused sequences must share length and labels")
    stack = np.stack([s.scores for s in seqs])
    if cfg.strategy == "max":
        fused = stack.max(axis=0)
    elif cfg.strategy == "min":
        fused = stack.min(axis=0)
    elif len(seqs) == 2:
        fused = cfg.beta * stack[0] + (1.0 - cfg.beta) * stack[1]
    else:
        fused = stack.mean(axis=0)
    return FrameScoreSeq(fused, first.labels.copy(), first.scene_id, f"fused:{cfg.tag}")


def confusion(seq, threshold=0.5):
    """Counts with the inclusive convention: predicted positive iff ``score >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must be in [0, 1], got {threshold}")
    pred = seq.scores >= threshold
    truth = seq.labels.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        tn=int(np.sum(~pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(counts, auc=float("nan"), threshold=0.5):
    """Threshold metrics; zero denominators give 0 and are listed in ``degenerate``."""
    flags = []
    fpr = _ratio(counts.fp, counts.fp + counts.tn, "fpr", flags)
    prec = _ratio(counts.tp, counts.tp + counts.fp, "prec", flags)
    rec = _ratio(counts.tp, counts.tp + counts.fn, "rec", flags)
    tnr = _ratio(counts.tn, counts.tn + counts.fp, "tnr", flags)
    f1 = _ratio(2.0 * prec * rec, prec + rec, "f1", flags)
    return MetricsReport(float(auc), fpr, (rec + tnr) / 2.0, prec, rec, f1, threshold, tuple(flags))


def _sorted_desc(scores, labels):
    order = np.argsort(-scores, kind="mergesort")
    return scores[order], labels[order].astype(bool)


def _check_two_classes(labels):
    n_pos = int(np.sum(labels))
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs both positive and negative frames")
    return n_pos, n_neg


def auc_score(scores, labels):
    """ROC AUC with half credit for tied positive/negative pairs (Mann-Whitney U)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_two_classes(labels)
    _, tp, fp = kernels.roc_counts(*_sorted_desc(scores, labels))
    dtp = np.diff(tp, prepend=0)
    dfp = np.diff(fp, prepend=0)
    tp_before = tp - dtp
    # twice the U statistic, in exact integers
    u2 = int(np.sum(dfp * (2 * tp_before + dtp)))
    return u2 / (2 * n_pos * n_neg)


def auc(seq):
    return auc_score(seq.scores, seq.labels)


def auc_bruteforce(scores, labels):
    """Pairwise Mann-Whitney statistic, O(P*N).  Reference for tests."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError("AUC needs both classes")
    total = Fraction(0)
    for p in pos:
        total += int(np.sum(p > neg)) + Fraction(int(np.sum(p == neg)), 2)
    return float(total / (pos.size * neg.size))


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def area(self):
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def roc_points(seq):
    """One ROC point per distinct threshold (descending), starting at (0, 0) and ending at (1, 1)."""
    n_pos, n_neg = _check_two_classes(seq.labels)
    thr, tp, fp = kernels.roc_counts(*_sorted_desc(seq.scores, seq.labels))
    return RocCurve(
        np.concatenate([[np.inf], thr]),
        np.concatenate([[0.0], fp / n_neg]),
        np.concatenate([[0.0], tp / n_pos]),
    )


def write_roc_csv(path, curve):
    with open(path, "w") as fh:
        fh.write("threshold,fpr,tpr\n")
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            fh.write(f"{t!r},{f!r},{p!r}\n")


def roc_svg(curves, size=800, margin=60):
    """Standalone SVG with one polyline per ROC curve; ``curves`` maps label -> RocCurve."""
    span = size - 2 * margin
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def xy(f, t):
        return f"{margin + f * span:.2f},{margin + (1.0 - t) * span:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin + span}" x2="{margin + span}" y2="{margin}" stroke="#bbb" '
        'stroke-dasharray="6,6"/>',
    ]
    for i in range(6):
        v = i / 5
        parts.append(
            f'<text x="{margin + v * span:.1f}" y="{size - margin / 2:.1f}" font-size="14" '
            f'text-anchor="middle">{v:.1f}</text>'
        )
        parts.append(
            f'<text x="{margin / 2:.1f}" y="{margin + (1 - v) * span + 5:.1f}" font-size="14" '
            f'text-anchor="middle">{v:.1f}</text>'
        )
    parts.append(f'<text x="{size / 2}" y="{size - 8}" font-size="16" text-anchor="middle">FPR</text>')
    parts.append(f'<text x="16" y="{size / 2}" font-size="16" text-anchor="middle" '
                 f'transform="rotate(-90 16 {size / 2})">TPR</text>')
    for i, (label, curve) in enumerate(curves.items()):
        color = colors[i % len(colors)]
        pts = " ".join(xy(f, t) for f, t in zip(curve.fpr, curve.tpr))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(
            f'<text x="{margin + span - 10}" y="{margin + span - 20 - 20 * i}" font-size="14" fill="{color}" '
            f'text-anchor="end">{label} (AUC {curve.area():.4f})</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


@dataclass
class EvalResult:
    reports: dict = field(default_factory=dict)  # target -> MetricsReport
    sequences: dict = field(default_factory=dict)  # target -> pooled FrameScoreSeq


def evaluate_sequences(per_target, threshold=0.5):
    """Metrics for each pooled sequence in ``per_target``."""
    out = EvalResult()
    for target, seq in per_target.items():
        a = auc(seq)
        out.reports[target] = metrics(confusion(seq, threshold), a, threshold)
        out.sequences[target] = seq
    return out
