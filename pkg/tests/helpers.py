"""Hand-built fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from debiaslab.model import build_model, conv, dense, flatten, maxpool, relu
from debiaslab.synth import Dataset

# Conv layer that carries the group watermark in the planted fixture.
PLANTED_LAYER = 2


def planted_watermark_model():
    """Three 1x1-output conv layers with a group watermark routed through layer 2 only.

    Input is 1x2x2: pixel (0, 0) holds z, pixel (1, 1) holds y.  Filter
    weights are chosen so that each layer's most similar filter (the one the
    10% ablation removes) is:
      layer 0: a mixed filter nothing downstream reads -> no effect
      layer 2: the only carrier of the watermark -> protected AUC collapses
      layer 4: a summing filter no head reads -> no effect
    The predictor head reads the y channel, the adversary the z channel.
    """
    backbone = [conv(5, 2), relu(), conv(3, 1), relu(), conv(3, 1), relu(), flatten()]
    model = build_model(backbone, n_target_classes=2, n_protected_groups=2, seed=0,
                        input_shape=(1, 2, 2), head_hidden=0)
    dt = model.layer(0).weight.data.dtype

    w0 = np.zeros((5, 1, 2, 2))
    w0[0, 0] = [[1, 0], [0, 1]]  # mix
    w0[1, 0] = [[1, 0], [0, 0]]  # z
    w0[2, 0] = [[0, 0], [0, 1]]  # y
    # filters 3 and 4 stay zero: constant-zero channels used as shared anchors

    # channels: [mix, z, y, zero, zero]
    w2 = np.array([
        [0, 0.5, 0, 1, 0],  # carries z
        [0, 0, 1, 1, 0],  # carries y
        [0, 0, 0, 1, 1],  # constant zero
    ], dtype=float)[:, :, None, None]

    w4 = np.array([
        [1, 1, 1],  # sum, unread
        [1, 0, 0],  # z pass-through
        [0, 1, 0],  # y pass-through
    ], dtype=float)[:, :, None, None]

    head_p = np.zeros((3, 2))
    head_p[2, 1] = 1.0
    head_a = np.zeros((3, 2))
    head_a[1, 1] = 1.0

    for lid, w in ((0, w0), (2, w2), (4, w4), (7, head_p), (8, head_a)):
        layer = model.layer(lid)
        layer.weight.data = w.astype(dt)
        layer.bias.data = np.zeros_like(layer.bias.data)
    model.adversary_fitted = True
    return model


def planted_watermark_data(repeats: int = 5, split: str = "validation") -> Dataset:
    combos = [(y, z) for y in (0, 1) for z in (0, 1)] * repeats
    n = len(combos)
    images = np.zeros((n, 1, 2, 2), dtype=np.float32)
    y = np.array([c[0] for c in combos], dtype=np.int64)
    z = np.array([c[1] for c in combos], dtype=np.int64)
    images[:, 0, 0, 0] = z
    images[:, 0, 1, 1] = y
    return Dataset(images, y, z, np.arange(n, dtype=np.int64), np.full(n, split), 2, 2)


def toy_separable(n: int = 200, seed: int = 0, size: int = 8) -> tuple[Dataset, Dataset]:
    """Two classes told apart by the sign of the left-minus-right brightness."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    images = rng.uniform(0.0, 0.3, size=(n, 1, size, size)).astype(np.float32)
    half = size // 2
    for i in range(n):
        if y[i] == 0:
            images[i, 0, :, :half] += 0.6
        else:
            images[i, 0, :, half:] += 0.6
    z = rng.integers(0, 2, size=n)
    pid = np.arange(n)
    split = np.where(np.arange(n) < int(0.75 * n), "train", "validation")
    data = Dataset(images, y.astype(np.int64), z.astype(np.int64), pid, split, 2, 2)
    return data.subset("train"), data.subset("validation")


def small_backbone(filters: int = 4):
    return [conv(filters, 3), relu(), maxpool(), flatten()]


def random_batch(model, n: int = 6, seed: int = 0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(n, *model.input_shape))
    y = rng.integers(0, model.n_target_classes, size=n)
    z = rng.integers(0, model.n_protected_groups, size=n)
    return images, y, z


def linear_model(n_in: int = 4, n_hidden: int = 3, seed: int = 0):
    """flatten -> dense backbone with linear heads; small enough for exact gradient algebra."""
    return build_model([flatten(), dense(n_hidden)], n_target_classes=2, n_protected_groups=2,
                       seed=seed, input_shape=(1, 1, n_in), head_hidden=0)
