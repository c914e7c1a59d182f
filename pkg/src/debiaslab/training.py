"""Baseline training and two-pass adversarial debiasing.

Pass 1 minimises ``L_pred + lambda * L_adv`` over every trainable parameter.
Pass 2 backpropagates ``-lambda * L_adv`` and applies it to the trainable
backbone only (optionally also to the adversarial head), either as its own
optimizer step or summed into the pass-1 gradients before a single step.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tensor
from .model import DualHeadModel, forward_dual, set_trainable
from .synth import Dataset

MODES = ("baseline", "full_debias", "partial_debias")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    mode: str = "baseline"
    lam: float = 0.53
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    pass2_fresh_forward: bool = True
    pass2_updates_adversary: bool = False
    pass2_apply: str = "immediate"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {self.batch_size}")
        if self.pass2_apply not in ("immediate", "summed"):
            raise ValueError(f"pass2_apply must be 'immediate' or 'summed', got {self.pass2_apply!r}")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.lr, self.momentum)

    def header_lines(self) -> list[str]:
        return [
            f"mode={self.mode}",
            f"lambda={self.lam}",
            f"lr={self.lr}",
            f"momentum={self.momentum}",
            f"epochs={self.epochs}",
            f"batch_size={self.batch_size}",
            f"seed={self.seed}",
            f"pass2_fresh_forward={str(self.pass2_fresh_forward).lower()}",
            f"pass2_updates_adversary={str(self.pass2_updates_adversary).lower()}",
            f"pass2_apply={self.pass2_apply}",
        ]


@dataclass
class LossBreakdown:
    l_predictor: float
    l_adversarial: float
    combined: float


@dataclass
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    val_target_acc: float
    val_adversary_acc: float
    seconds: float = field(compare=False)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    header: list[str] = field(default_factory=list)

    def to_csv(self, timing: bool = True) -> str:
        """CSV rows; ``timing=False`` writes 0 seconds for byte-reproducible output."""
        buf = io.StringIO()
        for line in self.header:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "l_predictor", "l_adversarial", "combined", "val_target_acc", "val_adversary_acc", "seconds"])
        for r in self.records:
            w.writerow([
                r.epoch,
                f"{r.losses.l_predictor:.8f}",
                f"{r.losses.l_adversarial:.8f}",
                f"{r.losses.combined:.8f}",
                f"{r.val_target_acc:.6f}",
                f"{r.val_adversary_acc:.6f}",
                f"{r.seconds if timing else 0.0:.3f}",
            ])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _as_input(images: np.ndarray) -> np.ndarray:
    return images.astype(ad.default_dtype(), copy=False)


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss ({value}) in {where}")


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffle indices (Fisher-Yates via Generator.permutation) and yield batches."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def predict(model: DualHeadModel, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Logits of both heads without recording a graph."""
    ys, zs = [], []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            yl, zl = forward_dual(model, _as_input(images[start : start + batch_size]))
            ys.append(yl.data)
            zs.append(zl.data)
    k_y, k_z = model.n_target_classes, model.n_protected_groups
    if not ys:
        return np.zeros((0, k_y)), np.zeros((0, k_z))
    return np.concatenate(ys), np.concatenate(zs)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def accuracies(model: DualHeadModel, data: Dataset) -> tuple[float, float]:
    """(target accuracy, adversary accuracy) on ``data``."""
    if len(data) == 0:
        return float("nan"), float("nan")
    yl, zl = predict(model, data.images)
    return float((yl.argmax(1) == data.y).mean()), float((zl.argmax(1) == data.z).mean())


def _require_data(*datasets: Dataset) -> None:
    for d in datasets:
        if len(d) == 0:
            raise ValueError("training needs non-empty train and validation datasets")


def _mean_losses(losses: list[LossBreakdown]) -> LossBreakdown:
    return LossBreakdown(
        float(np.mean([l.l_predictor for l in losses])),
        float(np.mean([l.l_adversarial for l in losses])),
        float(np.mean([l.combined for l in losses])),
    )


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def baseline_step(model: DualHeadModel, images, y, z, lam: float, opt: OptimizerState) -> LossBreakdown:
    """One predictor-only update of the trainable backbone and predictor head."""
    y_logits, z_logits = forward_dual(model, _as_input(images))
    l_pred = ad.softmax_cross_entropy(y_logits, y)
    lp = l_pred.item()
    _check_finite(lp, "baseline step")
    with ad.no_grad():
        la = ad.softmax_cross_entropy(Tensor(z_logits.data), z).item()
    params = model.backbone_params() + model.predictor_params()
    ad.backward(l_pred, 1.0, wrt=params)
    ad.sgd_step(params, opt)
    return LossBreakdown(lp, la, lp + lam * la)


def train_baseline(model: DualHeadModel, train_data: Dataset, val_data: Dataset, config: TrainConfig) -> TrainLog:
    """Fit backbone + predictor head on L_pred only; the adversarial head is never touched."""
    if config.mode != "baseline":
        raise ValueError(f"train_baseline needs mode 'baseline', got {config.mode!r}")
    _require_data(train_data, val_data)
    rng = np.random.default_rng(config.seed)
    opt = config.optimizer()
    log = TrainLog(header=config.header_lines())
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses = [
            baseline_step(model, train_data.images[idx], train_data.y[idx], train_data.z[idx], config.lam, opt)
            for idx in batches(len(train_data), config.batch_size, rng)
        ]
        acc_y, acc_z = accuracies(model, val_data)
        log.records.append(EpochRecord(epoch, _mean_losses(losses), acc_y, acc_z, time.perf_counter() - t0))
    return log


# ---------------------------------------------------------------------------
# two-step update
# ---------------------------------------------------------------------------


def _all_trainable(model: DualHeadModel) -> list[Tensor]:
    return model.params(trainable_only=True)


def _pass2_targets(model: DualHeadModel, config: TrainConfig) -> list[Tensor]:
    targets = model.backbone_params()
    if config.pass2_updates_adversary:
        targets += model.adversary_params()
    return targets


def pass_one(model: DualHeadModel, images, y, z, config: TrainConfig, opt: OptimizerState):
    """Forward once, backprop L_pred + lambda * L_adv, and step if pass 2 is applied separately.

    Returns the loss breakdown and the adversarial loss tensor, which pass 2
    can reuse when it does not run a fresh forward.
    """
    if z is None:
        raise ValueError("two-step update needs protected labels z")
    y_logits, z_logits = forward_dual(model, _as_input(images))
    l_pred = ad.softmax_cross_entropy(y_logits, y)
    l_adv = ad.softmax_cross_entropy(z_logits, z)
    total = ad.add(l_pred, ad.scalar_scale(l_adv, config.lam))
    lp, la, lt = l_pred.item(), l_adv.item(), total.item()
    _check_finite(lt, "pass 1")
    ad.backward(total, 1.0, wrt=_all_trainable(model))
    if config.pass2_apply == "immediate":
        ad.sgd_step(_all_trainable(model), opt)
    return LossBreakdown(lp, la, lt), l_adv


def pass_two(model: DualHeadModel, images, z, config: TrainConfig, opt: OptimizerState, l_adv: Tensor | None = None) -> None:
    """Backprop -lambda * L_adv into the pass-2 targets and take the optimizer step.

    Under ``pass2_apply == 'summed'`` the pass-1 gradients are still
    accumulated, so the single step here covers both passes.
    """
    if config.pass2_fresh_forward or l_adv is None:
        _, z_logits = forward_dual(model, _as_input(images))
        l_adv = ad.softmax_cross_entropy(z_logits, z)
        _check_finite(l_adv.item(), "pass 2")
    targets = _pass2_targets(model, config)
    ad.backward(l_adv, -config.lam, wrt=targets)
    if config.pass2_apply == "immediate":
        ad.sgd_step(targets, opt)
    else:
        ad.sgd_step([p for p in _all_trainable(model) if p.grad is not None], opt)


def two_step_update(model: DualHeadModel, images, y, z, config: TrainConfig, opt: OptimizerState) -> LossBreakdown:
    """Pass 1 then pass 2 on one batch; returns the pass-1 losses.

    With lambda == 0 the pass-2 loss is identically zero and the pass is
    skipped outright, so momentum does not take an extra step.
    """
    losses, l_adv = pass_one(model, images, y, z, config, opt)
    if config.lam == 0.0:
        if config.pass2_apply == "summed":
            ad.sgd_step(_all_trainable(model), opt)
        return losses
    pass_two(model, images, z, config, opt, l_adv)
    return losses


def train_debias(
    model: DualHeadModel,
    train_data: Dataset,
    val_data: Dataset,
    config: TrainConfig,
    trainable_ids: Sequence[int] | None = None,
) -> TrainLog:
    """Two-step adversarial training over seeded shuffled batches.

    Full mode trains every layer; partial mode needs ``trainable_ids`` from
    the ablation study.  The adversarial head counts as fitted afterwards.
    """
    if config.mode == "full_debias":
        ids = [l.id for l in model.layers] if trainable_ids is None else list(trainable_ids)
    elif config.mode == "partial_debias":
        if not trainable_ids:
            raise ValueError("partial_debias needs trainable_ids from the ablation study")
        ids = list(trainable_ids)
    else:
        raise ValueError(f"train_debias needs a debias mode, got {config.mode!r}")
    _require_data(train_data, val_data)
    set_trainable(model, ids)
    rng = np.random.default_rng(config.seed)
    opt = config.optimizer()
    log = TrainLog(header=config.header_lines() + ["trainable_ids=" + " ".join(str(i) for i in sorted(ids))])
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses = [
            two_step_update(model, train_data.images[idx], train_data.y[idx], train_data.z[idx], config, opt)
            for idx in batches(len(train_data), config.batch_size, rng)
        ]
        acc_y, acc_z = accuracies(model, val_data)
        log.records.append(EpochRecord(epoch, _mean_losses(losses), acc_y, acc_z, time.perf_counter() - t0))
    model.adversary_fitted = True
    set_trainable(model, [l.id for l in model.layers])
    return log


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def fit_probe(
    model: DualHeadModel,
    train_data: Dataset,
    val_data: Dataset,
    max_epochs: int = 20,
    patience: int = 3,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 32,
    seed: int = 0,
) -> float:
    """Fit the adversarial head on the frozen backbone until validation accuracy plateaus.

    The best-validation head weights are kept.  Returns that accuracy.
    """
    _require_data(train_data, val_data)
    head = model.adversary_params(trainable_only=False)
    everything = model.params()
    saved = [p.requires_grad for p in everything]
    for p in everything:
        p.requires_grad = any(p is h for h in head)
    rng = np.random.default_rng(seed)
    opt = OptimizerState(lr, momentum)
    best_acc, best_state, stale = -1.0, [p.data.copy() for p in head], 0
    try:
        # backbone is frozen: compute its features once
        with ad.no_grad():
            from .model import features

            train_feats = np.concatenate([
                features(model, _as_input(train_data.images[s : s + 256])).data
                for s in range(0, len(train_data), 256)
            ])
        for _ in range(max_epochs):
            for idx in batches(len(train_data), batch_size, rng):
                x = Tensor(train_feats[idx])
                for layer in model.adversarial_head:
                    x = layer.forward(x)
                loss = ad.softmax_cross_entropy(x, train_data.z[idx])
                _check_finite(loss.item(), "probe fit")
                ad.backward(loss, 1.0, wrt=head)
                ad.sgd_step(head, opt)
            _, acc = accuracies(model, val_data)
            if acc > best_acc:
                best_acc, best_state, stale = acc, [p.data.copy() for p in head], 0
            else:
                stale += 1
                if stale >= patience:
                    break
    finally:
        for p, flag in zip(everything, saved):
            p.requires_grad = flag
    for p, data in zip(head, best_state):
        p.data = data
    model.adversary_fitted = True
    return best_acc
