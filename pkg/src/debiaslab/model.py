"""Shared CNN backbone with a predictor head and an adversarial head."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool2d", "flatten")
PARAM_KINDS = ("conv2d", "dense")


class ModelShapeError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    filters: int = 0  # conv2d
    kernel: int = 0  # conv2d
    width: int = 0  # dense output width
    id: int = -1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def conv(filters: int, kernel: int = 3) -> LayerSpec:
    return LayerSpec("conv2d", filters=filters, kernel=kernel)


def dense(width: int) -> LayerSpec:
    return LayerSpec("dense", width=width)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool() -> LayerSpec:
    return LayerSpec("maxpool2d")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def default_backbone() -> list[LayerSpec]:
    """Three conv blocks of 8/16/32 3x3 filters, each followed by relu and pooling."""
    spec: list[LayerSpec] = []
    for filters in (8, 16, 32):
        spec += [conv(filters, 3), relu(), maxpool()]
    spec.append(flatten())
    return spec


@dataclass
class Layer:
    spec: LayerSpec
    weight: Tensor | None = None
    bias: Tensor | None = None
    trainable: bool = True

    @property
    def id(self) -> int:
        return self.spec.id

    @property
    def kind(self) -> str:
        return self.spec.kind

    def params(self) -> list[Tensor]:
        return [p for p in (self.weight, self.bias) if p is not None]

    def forward(self, x: Tensor) -> Tensor:
        kind = self.kind
        if kind == "conv2d":
            return ad.conv2d(x, self.weight, self.bias)
        if kind == "dense":
            return ad.dense(x, self.weight, self.bias)
        if kind == "relu":
            return ad.relu(x)
        if kind == "maxpool2d":
            return ad.maxpool2d(x)
        return ad.flatten(x)


@dataclass
class DualHeadModel:
    input_shape: tuple[int, int, int]
    backbone: list[Layer]
    predictor_head: list[Layer]
    adversarial_head: list[Layer]
    n_target_classes: int
    n_protected_groups: int
    head_hidden: int = 64
    seed: int = 0
    # set once the adversarial head has been fitted (probe or debias training)
    adversary_fitted: bool = False
    feature_width: int = field(default=0)

    @property
    def layers(self) -> list[Layer]:
        return self.backbone + self.predictor_head + self.adversarial_head

    def layer(self, layer_id: int) -> Layer:
        layers = self.layers
        if not 0 <= layer_id < len(layers):
            raise KeyError(f"unknown layer id {layer_id}; model has ids 0..{len(layers) - 1}")
        return layers[layer_id]

    @property
    def backbone_ids(self) -> list[int]:
        return [l.id for l in self.backbone]

    @property
    def head_ids(self) -> list[int]:
        return [l.id for l in self.predictor_head + self.adversarial_head]

    @property
    def conv_ids(self) -> list[int]:
        return [l.id for l in self.backbone if l.kind == "conv2d"]

    def named_params(self) -> dict[str, Tensor]:
        return {p.name: p for l in self.layers for p in l.params()}

    def params(self, layers: Iterable[Layer] | None = None, trainable_only: bool = False) -> list[Tensor]:
        chosen = self.layers if layers is None else list(layers)
        return [p for l in chosen if (l.trainable or not trainable_only) for p in l.params()]

    def backbone_params(self, trainable_only: bool = True) -> list[Tensor]:
        return self.params(self.backbone, trainable_only)

    def predictor_params(self, trainable_only: bool = True) -> list[Tensor]:
        return self.params(self.predictor_head, trainable_only)

    def adversary_params(self, trainable_only: bool = True) -> list[Tensor]:
        return self.params(self.adversarial_head, trainable_only)

    def copy(self) -> "DualHeadModel":
        return copy.deepcopy(self)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params().items()}


def _init_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _make_layer(spec: LayerSpec, in_shape: tuple[int, ...], rng: np.random.Generator, where: str):
    """Instantiate one layer; returns (layer, output shape without batch axis)."""
    dtype = ad.default_dtype()
    kind = spec.kind
    name = f"layer{spec.id}"
    if kind == "conv2d":
        if len(in_shape) != 3:
            raise ModelShapeError(f"{where} layer {spec.id} (conv2d): expects C,H,W input, got {in_shape}")
        if spec.filters < 2:
            raise ModelShapeError(f"{where} layer {spec.id} (conv2d): needs at least 2 filters, got {spec.filters}")
        c, h, w = in_shape
        k = spec.kernel
        if k < 1 or h < k or w < k:
            raise ModelShapeError(f"{where} layer {spec.id} (conv2d): kernel {k} does not fit input {h}x{w}")
        fan_in, fan_out = c * k * k, spec.filters * k * k
        weight = Tensor(_init_uniform(rng, (spec.filters, c, k, k), fan_in, fan_out), True, f"{name}.weight", dtype)
        bias = Tensor(np.zeros(spec.filters), True, f"{name}.bias", dtype)
        return Layer(spec, weight, bias), (spec.filters, h - k + 1, w - k + 1)
    if kind == "dense":
        if len(in_shape) != 1:
            raise ModelShapeError(f"{where} layer {spec.id} (dense): expects flat features, got {in_shape}")
        if spec.width < 1:
            raise ModelShapeError(f"{where} layer {spec.id} (dense): width must be positive")
        (n_in,) = in_shape
        weight = Tensor(_init_uniform(rng, (n_in, spec.width), n_in, spec.width), True, f"{name}.weight", dtype)
        bias = Tensor(np.zeros(spec.width), True, f"{name}.bias", dtype)
        return Layer(spec, weight, bias), (spec.width,)
    if kind == "relu":
        return Layer(spec), in_shape
    if kind == "maxpool2d":
        if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
            raise ModelShapeError(f"{where} layer {spec.id} (maxpool2d): input {in_shape} too small for 2x2 pooling")
        c, h, w = in_shape
        return Layer(spec), (c, h // 2, w // 2)
    return Layer(spec), (int(np.prod(in_shape)),)


def head_spec(head_hidden: int, n_out: int) -> list[LayerSpec]:
    if head_hidden:
        return [dense(head_hidden), relu(), dense(n_out)]
    return [dense(n_out)]


def build_model(
    backbone_spec: Sequence[LayerSpec] | None = None,
    n_target_classes: int = 4,
    n_protected_groups: int = 2,
    seed: int = 0,
    input_shape: tuple[int, int, int] = (1, 28, 28),
    head_hidden: int = 64,
) -> DualHeadModel:
    """Build a dual-head model with seeded Glorot-uniform weights and zero biases.

    Layer ids run 0.. through the backbone, then the predictor head, then the
    adversarial head.  ``head_hidden=0`` gives single-dense (linear) heads.
    """
    if n_target_classes < 2 or n_protected_groups < 2:
        raise ModelShapeError("need at least 2 target classes and 2 protected groups")
    backbone_spec = default_backbone() if backbone_spec is None else backbone_spec
    rng = np.random.default_rng(seed)
    next_id = 0

    def build_chain(specs, shape, where):
        nonlocal next_id
        layers = []
        for s in specs:
            s = copy.copy(s)
            s.id = next_id
            next_id += 1
            layer, shape = _make_layer(s, shape, rng, where)
            layers.append(layer)
        return layers, shape

    backbone, feat_shape = build_chain(backbone_spec, tuple(input_shape), "backbone")
    if len(feat_shape) != 1:
        raise ModelShapeError(f"backbone must end in flat features (add a flatten layer), ends in shape {feat_shape}")
    pred, pred_out = build_chain(head_spec(head_hidden, n_target_classes), feat_shape, "predictor head")
    adv, adv_out = build_chain(head_spec(head_hidden, n_protected_groups), feat_shape, "adversarial head")
    assert pred_out == (n_target_classes,) and adv_out == (n_protected_groups,)
    return DualHeadModel(
        input_shape=tuple(input_shape),
        backbone=backbone,
        predictor_head=pred,
        adversarial_head=adv,
        n_target_classes=n_target_classes,
        n_protected_groups=n_protected_groups,
        head_hidden=head_hidden,
        seed=seed,
        feature_width=feat_shape[0],
    )


def _run(layers: Sequence[Layer], x: Tensor) -> Tensor:
    for layer in layers:
        x = layer.forward(x)
    return x


def features(model: DualHeadModel, images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ModelShapeError(f"images have shape {x.shape[1:]}, model expects {model.input_shape}")
    return _run(model.backbone, x)


def forward_dual(model: DualHeadModel, images) -> tuple[Tensor, Tensor]:
    """One shared backbone pass feeding both heads; returns (y_logits, z_logits)."""
    feats = features(model, images)
    return _run(model.predictor_head, feats), _run(model.adversarial_head, feats)


def set_trainable(model: DualHeadModel, trainable_ids: Iterable[int]) -> None:
    """Train exactly the listed layers; every other layer is frozen.

    Frozen parameters stop accumulating gradients, but gradients still flow
    through them to trainable layers upstream.
    """
    ids = set(trainable_ids)
    if not ids:
        raise ValueError("set_trainable: the trainable set is empty")
    known = {l.id for l in model.layers}
    unknown = sorted(ids - known)
    if unknown:
        raise KeyError(f"set_trainable: unknown layer ids {unknown}")
    for layer in model.layers:
        layer.trainable = layer.id in ids
        for p in layer.params():
            p.requires_grad = layer.trainable
            p.grad = None


def trainable_ids(model: DualHeadModel) -> set[int]:
    return {l.id for l in model.layers if l.trainable}


@dataclass(frozen=True)
class FilterMask:
    layer_id: int
    indices: frozenset[int]

    def __init__(self, layer_id: int, indices: Iterable[int]):
        object.__setattr__(self, "layer_id", int(layer_id))
        object.__setattr__(self, "indices", frozenset(int(i) for i in indices))


def apply_filter_mask(model: DualHeadModel, mask: FilterMask) -> DualHeadModel:
    """Return a copy of ``model`` with the masked conv filters (weights and bias) zeroed."""
    layer = model.layer(mask.layer_id)
    if layer.kind != "conv2d":
        raise ValueError(f"apply_filter_mask: layer {mask.layer_id} is {layer.kind}, not conv2d")
    if not mask.indices:
        raise ValueError("apply_filter_mask: empty mask")
    n = layer.spec.filters
    bad = sorted(i for i in mask.indices if not 0 <= i < n)
    if bad:
        raise IndexError(f"apply_filter_mask: filter indices {bad} out of range [0, {n})")
    out = model.copy()
    target = out.layer(mask.layer_id)
    idx = sorted(mask.indices)
    w = target.weight.data.copy()
    b = target.bias.data.copy()
    w[idx] = 0
    b[idx] = 0
    target.weight.data = w
    target.bias.data = b
    return out


# ---------------------------------------------------------------------------
# checkpoint + manifest
# ---------------------------------------------------------------------------


def _manifest_lines(model: DualHeadModel) -> list[str]:
    lines = [
        "format=dblb-manifest",
        "version=1",
        "input_shape=" + ",".join(str(d) for d in model.input_shape),
        f"n_target_classes={model.n_target_classes}",
        f"n_protected_groups={model.n_protected_groups}",
        f"head_hidden={model.head_hidden}",
        f"seed={model.seed}",
        f"adversary_fitted={str(model.adversary_fitted).lower()}",
        f"backbone_layers={len(model.backbone)}",
    ]
    for layer in model.layers:
        s = layer.spec
        section = "backbone" if layer in model.backbone else (
            "predictor" if layer in model.predictor_head else "adversary"
        )
        desc = f"layer.{s.id}={section}:{s.kind}"
        if s.kind == "conv2d":
            desc += f":filters={s.filters}:kernel={s.kernel}"
        elif s.kind == "dense":
            desc += f":width={s.width}"
        lines.append(desc)
    return lines


def _atomic_write(path: Path, write) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def save_checkpoint(model: DualHeadModel, path) -> None:
    """Write ``<path>`` (binary weights) and ``<path>.manifest`` (layer layout)."""
    path = Path(path)
    params = list(model.named_params().values())
    _atomic_write(path, lambda p: ad.save_params(p, params, len(model.layers)))
    text = "\n".join(_manifest_lines(model)) + "\n"
    _atomic_write(Path(str(path) + ".manifest"), lambda p: p.write_text(text))


def _parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ad.CheckpointFormatError(f"manifest line without '=': {raw!r}")
        out[key.strip()] = value.strip()
    return out


def load_checkpoint(path) -> DualHeadModel:
    path = Path(path)
    meta = _parse_manifest(Path(str(path) + ".manifest").read_text())
    if meta.get("format") != "dblb-manifest":
        raise ad.CheckpointFormatError(f"{path}.manifest: not a dblb manifest")
    n_layers = sum(1 for k in meta if k.startswith("layer."))
    n_backbone = int(meta["backbone_layers"])
    specs = []
    for i in range(n_backbone):
        fields = meta[f"layer.{i}"].split(":")
        kind = fields[1]
        kw = dict(f.split("=") for f in fields[2:])
        specs.append(LayerSpec(kind, **{k: int(v) for k, v in kw.items()}))
    model = build_model(
        specs,
        n_target_classes=int(meta["n_target_classes"]),
        n_protected_groups=int(meta["n_protected_groups"]),
        seed=int(meta["seed"]),
        input_shape=tuple(int(d) for d in meta["input_shape"].split(",")),
        head_hidden=int(meta["head_hidden"]),
    )
    model.adversary_fitted = meta.get("adversary_fitted") == "true"
    layer_count, arrays = ad.load_params(path)
    if layer_count != n_layers or layer_count != len(model.layers):
        raise ad.CheckpointFormatError(
            f"{path}: checkpoint has {layer_count} layers, manifest describes {n_layers}"
        )
    named = model.named_params()
    if set(arrays) != set(named):
        raise ad.CheckpointFormatError(f"{path}: parameter names do not match the manifest architecture")
    for name, p in named.items():
        if arrays[name].shape != p.shape:
            raise ad.CheckpointFormatError(f"{path}: {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name].astype(ad.default_dtype())
    return model
