"""Class-wise AUC / precision / recall and TPR disparity against a reference group."""

from __future__ import annotations

import csv
import io
import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Sequence

import numpy as np

FAIR_LOW = 0.8
FAIR_HIGH = 1.25


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half, via average ranks."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    lab = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != lab.shape:
        raise ValueError(f"auc_roc: {s.size} scores but {lab.size} labels")
    n_pos = int(lab.sum())
    n_neg = int(lab.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc: need at least one positive and one negative label")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    # rank of a tie block = mean of the 1-based positions it occupies
    ends = np.cumsum(counts)
    avg_rank = ends - (counts - 1) / 2.0
    rank_sum = avg_rank[inverse][lab].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) reference: fraction of (pos, neg) pairs ranked correctly, ties 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    lab = np.asarray(labels).reshape(-1).astype(bool)
    pos, neg = s[lab], s[~lab]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc_pairwise: need at least one positive and one negative label")
    diff = pos[:, None] - neg[None, :]
    wins = float((diff > 0).sum()) + 0.5 * float((diff == 0).sum())
    return wins / (pos.size * neg.size)


@dataclass(frozen=True)
class Counts:
    tp: int
    fn: int
    fp: int
    tn: int


@dataclass
class ConfusionCounts:
    """Per-class one-vs-rest counts from argmax decisions, per group and pooled."""

    by_group: dict[int, list[Counts]]
    overall: list[Counts]

    @classmethod
    def from_decisions(cls, predicted, truth, groups, n_classes: int, group_ids: Sequence[int]):
        predicted = np.asarray(predicted)
        truth = np.asarray(truth)
        groups = np.asarray(groups)

        def tally(mask) -> list[Counts]:
            out = []
            p, t = predicted[mask], truth[mask]
            for c in range(n_classes):
                tp = int(((p == c) & (t == c)).sum())
                fn = int(((p != c) & (t == c)).sum())
                fp = int(((p == c) & (t != c)).sum())
                tn = int(((p != c) & (t != c)).sum())
                out.append(Counts(tp, fn, fp, tn))
            return out

        by_group = {int(g): tally(groups == g) for g in group_ids}
        return cls(by_group, tally(np.ones(truth.shape, dtype=bool)))


def precision_recall(counts: Counts) -> tuple[float | None, float | None]:
    """(precision, recall); None marks an undefined ratio (zero denominator)."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else None
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    return precision, recall


def tpr(counts: Counts) -> float | None:
    return counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None


def tpr_disparity(counts: ConfusionCounts, cls: int, group: int, ref_group: int) -> float | None:
    """TPR of ``group`` over TPR of ``ref_group`` for one class; None when undefined."""
    if group == ref_group:
        raise ValueError("tpr_disparity: group and reference group must differ")
    g = counts.by_group[group][cls]
    r = counts.by_group[ref_group][cls]
    if g.tp + g.fn == 0 or r.tp == 0:
        return None
    # ratio of ratios in exact arithmetic, rounded once (0.6 / 0.8 would give 0.7499...)
    return float(Fraction(g.tp, g.tp + g.fn) / Fraction(r.tp, r.tp + r.fn))


def fairness_flag(disparity: float) -> bool:
    return FAIR_LOW <= disparity <= FAIR_HIGH


@dataclass
class PredictionSet:
    scores: np.ndarray  # (N, C) softmax scores
    y: np.ndarray
    z: np.ndarray
    patient_id: np.ndarray
    groups: tuple[int, ...]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.int64)
        self.patient_id = np.asarray(self.patient_id, dtype=np.int64)
        self.groups = tuple(int(g) for g in self.groups)
        if self.scores.ndim != 2:
            raise ValueError("scores must be an N x C array")
        unknown = set(np.unique(self.z).tolist()) - set(self.groups)
        if unknown:
            raise ValueError(f"group ids {sorted(unknown)} missing from the group vocabulary")

    @property
    def n_classes(self) -> int:
        return int(self.scores.shape[1])

    def decisions(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lower class index
        return self.scores.argmax(axis=1)


@dataclass
class DisparityCell:
    cls: int
    group: int
    tpr: float | None
    tpr_ref: float | None
    disparity: float | None

    @property
    def defined(self) -> bool:
        return self.disparity is not None

    @property
    def fair(self) -> bool | None:
        return None if self.disparity is None else fairness_flag(self.disparity)


@dataclass
class FairnessReport:
    ref_group: int
    auc: list[float | None]
    precision: list[float | None]
    recall: list[float | None]
    cells: list[DisparityCell]
    counts: ConfusionCounts

    @property
    def n_classes(self) -> int:
        return len(self.auc)

    def cell(self, cls: int, group: int) -> DisparityCell:
        for c in self.cells:
            if c.cls == cls and c.group == group:
                return c
        raise KeyError((cls, group))

    def macro_auc(self) -> float:
        vals = [a for a in self.auc if a is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_abs_log_disparity(self) -> float:
        """Mean |ln d| over defined cells; a zero disparity counts as infinitely unfair."""
        vals = [abs(math.log(c.disparity)) if c.disparity > 0 else math.inf for c in self.cells if c.defined]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, header_lines: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "group", "tpr", "tpr_ref", "disparity", "fair"])
        for c in self.cells:
            w.writerow([c.cls, c.group, _fmt(c.tpr), _fmt(c.tpr_ref), _fmt(c.disparity), _fmt_flag(c.fair)])
        return buf.getvalue()


def _fmt(v: float | None) -> str:
    return "undefined" if v is None else f"{v:.6f}"


def _fmt_flag(v: bool | None) -> str:
    return "undefined" if v is None else str(v).lower()


def build_reports(preds: PredictionSet, ref_group: int) -> FairnessReport:
    if preds.scores.shape[0] == 0:
        raise ValueError("build_reports: empty prediction set")
    if ref_group not in preds.groups:
        raise ValueError(f"build_reports: unknown reference group {ref_group}; groups are {preds.groups}")
    decided = preds.decisions()
    counts = ConfusionCounts.from_decisions(decided, preds.y, preds.z, preds.n_classes, preds.groups)
    aucs, precisions, recalls = [], [], []
    for c in range(preds.n_classes):
        positive = preds.y == c
        aucs.append(auc_roc(preds.scores[:, c], positive) if 0 < positive.sum() < positive.size else None)
        p, r = precision_recall(counts.overall[c])
        precisions.append(p)
        recalls.append(r)
    cells = []
    for c in range(preds.n_classes):
        t_ref = tpr(counts.by_group[ref_group][c])
        for g in preds.groups:
            if g == ref_group:
                continue
            cells.append(DisparityCell(c, g, tpr(counts.by_group[g][c]), t_ref, tpr_disparity(counts, c, g, ref_group)))
    return FairnessReport(ref_group, aucs, precisions, recalls, cells, counts)
