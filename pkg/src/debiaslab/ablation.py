"""Filter-ablation study that picks which conv layers to fine-tune.

For every conv layer the most mutually similar filters (cosine similarity of
flattened weights) are zeroed, and the change in macro AUC for the target
task and for the protected-attribute probe is recorded.  Layers whose
ablation hurts protected prediction more than target prediction rank first.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fairness import auc_roc
from .model import DualHeadModel, FilterMask, apply_filter_mask
from .synth import Dataset
from .training import predict, softmax


class UntrainedProbeError(RuntimeError):
    pass


@dataclass
class SimilarityScores:
    layer_id: int
    scores: np.ndarray


def filter_similarity(weights, layer_id: int = -1) -> SimilarityScores:
    """Mean cosine similarity of each filter to every other filter in the layer.

    Filters with zero norm score -1 (they are already dead).
    """
    w = np.asarray(getattr(weights, "data", weights), dtype=np.float64)
    n = w.shape[0]
    if n < 2:
        raise ValueError(f"filter_similarity needs at least 2 filters, got {n}")
    flat = w.reshape(n, -1)
    norms = np.linalg.norm(flat, axis=1)
    alive = norms > 0
    unit = np.zeros_like(flat)
    unit[alive] = flat[alive] / norms[alive, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(cos, 0.0)
    scores = cos.sum(axis=1) / (n - 1)
    scores[~alive] = -1.0
    return SimilarityScores(layer_id, scores)


def ablation_size(n_filters: int, fraction: float) -> int:
    return max(1, int(round(fraction * n_filters)))


def select_ablation_set(scores: SimilarityScores, fraction: float = 0.10) -> FilterMask:
    """The ``max(1, round(fraction * F))`` highest-scoring filters; lower index wins ties."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    s = np.asarray(scores.scores)
    n = ablation_size(s.size, fraction)
    order = sorted(range(s.size), key=lambda i: (-s[i], i))
    return FilterMask(scores.layer_id, order[:n])


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean one-vs-rest AUC over the classes that have both positives and negatives."""
    vals = []
    for c in range(scores.shape[1]):
        positive = labels == c
        if 0 < positive.sum() < positive.size:
            vals.append(auc_roc(scores[:, c], positive))
    if not vals:
        raise ValueError("macro_auc: no class has both positives and negatives")
    return float(np.mean(vals))


def evaluate_aucs(model: DualHeadModel, data: Dataset) -> tuple[float, float]:
    yl, zl = predict(model, data.images)
    return macro_auc(softmax(yl), data.y), macro_auc(softmax(zl), data.z)


@dataclass
class LayerAblation:
    layer_id: int
    n_filters: int
    mask: FilterMask
    delta_target: float
    delta_protected: float

    @property
    def n_ablated(self) -> int:
        return len(self.mask.indices)

    @property
    def score(self) -> float:
        return self.delta_target - self.delta_protected


@dataclass
class AblationReport:
    baseline_target_auc: float
    baseline_protected_auc: float
    layers: list[LayerAblation] = field(default_factory=list)
    fraction: float = 0.10
    # model layout, needed to close the fine-tune selection downstream
    backbone_ids: list[int] = field(default_factory=list)
    head_ids: list[int] = field(default_factory=list)

    def to_csv(self, header_lines: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([
            "layer_id", "n_filters", "n_ablated", "baseline_target_auc",
            "baseline_protected_auc", "delta_target", "delta_protected", "score",
        ])
        for l in self.layers:
            w.writerow([
                l.layer_id, l.n_filters, l.n_ablated,
                f"{self.baseline_target_auc:.8f}", f"{self.baseline_protected_auc:.8f}",
                f"{l.delta_target:.8f}", f"{l.delta_protected:.8f}", f"{l.score:.8f}",
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, model: DualHeadModel) -> "AblationReport":
        rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
        if not rows:
            raise ValueError("ablation report CSV has no rows")
        report = cls(
            float(rows[0]["baseline_target_auc"]),
            float(rows[0]["baseline_protected_auc"]),
            backbone_ids=model.backbone_ids,
            head_ids=model.head_ids,
        )
        for r in rows:
            report.layers.append(LayerAblation(
                int(r["layer_id"]),
                int(r["n_filters"]),
                # only the size survives the CSV round trip
                FilterMask(int(r["layer_id"]), range(int(r["n_ablated"]))),
                float(r["delta_target"]),
                float(r["delta_protected"]),
            ))
        return report


def run_ablation_study(model: DualHeadModel, val_data: Dataset, fraction: float = 0.10) -> AblationReport:
    """Ablate each conv layer independently on copies of ``model`` and record AUC deltas."""
    if not model.adversary_fitted:
        raise UntrainedProbeError("the adversarial head must be fitted as a probe before the ablation study")
    if len(val_data) == 0:
        raise ValueError("run_ablation_study: empty validation set")
    base_t, base_p = evaluate_aucs(model, val_data)
    report = AblationReport(base_t, base_p, fraction=fraction, backbone_ids=model.backbone_ids, head_ids=model.head_ids)
    for layer_id in model.conv_ids:
        layer = model.layer(layer_id)
        mask = select_ablation_set(filter_similarity(layer.weight, layer_id), fraction)
        t, p = evaluate_aucs(apply_filter_mask(model, mask), val_data)
        report.layers.append(LayerAblation(layer_id, layer.spec.filters, mask, t - base_t, p - base_p))
    return report


@dataclass
class FinetuneSelection:
    pivot: int
    selected: list[int]
    ranking: list[tuple[int, float]]  # (layer id, score), best first

    def to_text(self, header_lines: Sequence[str] = ()) -> str:
        lines = [f"# {h}" for h in header_lines]
        lines += [
            f"pivot={self.pivot}",
            "selected=" + " ".join(str(i) for i in self.selected),
            "ranking=" + " ".join(f"{i}:{s:.8f}" for i, s in self.ranking),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FinetuneSelection":
        kv = {}
        for line in text.splitlines():
            if line.startswith("#") or "=" not in line:
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        ranking = []
        for item in kv.get("ranking", "").split():
            i, _, s = item.partition(":")
            ranking.append((int(i), float(s)))
        return cls(int(kv["pivot"]), [int(i) for i in kv["selected"].split()], ranking)


def select_finetune_layers(report: AblationReport, k: int = 1) -> FinetuneSelection:
    """Pivot = lowest layer id among the top-k ranked conv layers.

    The selection is the pivot, every backbone layer after it, and all head
    layers.
    """
    if not report.layers:
        raise ValueError("select_finetune_layers: empty ablation report")
    if not 1 <= k <= len(report.layers):
        raise ValueError(f"k must lie in [1, {len(report.layers)}], got {k}")
    ranked = sorted(report.layers, key=lambda l: (-l.score, l.layer_id))
    pivot = min(l.layer_id for l in ranked[:k])
    selected = [i for i in report.backbone_ids if i >= pivot] + list(report.head_ids)
    return FinetuneSelection(pivot, selected, [(l.layer_id, l.score) for l in ranked])
