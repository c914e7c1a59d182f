"""Small reverse-mode autodiff over dense numpy arrays.

Only the handful of operations a small CNN classifier needs are provided:
conv2d, dense, relu, maxpool2d, flatten, softmax_cross_entropy,
scalar_scale and add.  Every op returns a :class:`Tensor` that remembers the
node which produced it, and :func:`backward` walks that graph in reverse
topological order, accumulating ``scale * dloss/dparam`` into every leaf
tensor flagged ``requires_grad``.
"""

from __future__ import annotations

import contextlib
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

OP_KINDS = (
    "conv2d",
    "dense",
    "relu",
    "maxpool2d",
    "flatten",
    "softmax_cross_entropy",
    "scalar_scale",
    "add",
)

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = os.environ.get("DBLB_PRECISION", "f32")
_grad_enabled = True
# when a list, relu/maxpool2d append their switching pattern (used by grad_check)
_pattern: list | None = None


class ShapeError(ValueError):
    """An op received inputs whose shapes do not fit together."""


class GraphConsumedError(RuntimeError):
    pass


class MissingGradientError(RuntimeError):
    pass


def set_precision(mode: str) -> None:
    global _precision
    if mode not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _precision = mode


def get_precision() -> str:
    return _precision


def default_dtype() -> type:
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global float precision ("f32" or "f64")."""
    previous = _precision
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording graph nodes (evaluation only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Node:
    __slots__ = ("kind", "inputs", "backward_fn", "consumed")

    def __init__(self, kind: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.kind = kind
        self.inputs = tuple(inputs)
        # backward_fn(grad_out) -> tuple of input grads (None where not needed)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """A dense array plus an optional accumulated gradient.

    Leaf tensors with ``requires_grad`` set are treated as parameters: they
    are the only tensors that keep a ``grad`` after :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def _result(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(_needs_grad(t) for t in inputs):
        out.requires_grad = True
        out.node = Node(kind, inputs, backward_fn)
    return out


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation of an NCHW batch with FCkk filters."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d NCHW, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d (F,C,k,k), got shape {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    if h < kh or w < kw:
        raise ShapeError(f"conv2d: input {h}x{w} smaller than kernel {kh}x{kw}")
    ho, wo = h - kh + 1, w - kw + 1

    # (N, C, Ho, Wo, k, k) -> (N*Ho*Wo, C*k*k)
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward_fn(g: np.ndarray):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + ho, j : j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _result("conv2d", out, (x, weight, bias), backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` for a batch x features input; W is (in, out)."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense: input must be 2-d batch x features, got shape {x.shape}")
    if weight.data.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"dense: input has {x.shape[1]} features but weight has shape {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match output width {weight.shape[1]}")
    out = x.data @ weight.data + bias.data

    def backward_fn(g: np.ndarray):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result("dense", out, (x, weight, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)
    if _pattern is not None:
        _pattern.append(mask.tobytes())

    def backward_fn(g: np.ndarray):
        return (g * mask,)

    return _result("relu", out, (x,), backward_fn)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be 4-d NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2d: input {h}x{w} too small for a 2x2 window")
    blocks = x.data[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, 4)
    # first maximum wins on ties
    arg = blocks.argmax(axis=-1)
    if _pattern is not None:
        _pattern.append(arg.tobytes())
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        gblocks = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gblocks, arg[..., None], g[..., None], axis=-1)
        gblocks = gblocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * ho, : 2 * wo] = gblocks
        return (gx,)

    return _result("maxpool2d", out, (x,), backward_fn)


def flatten(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: input needs a batch axis, got shape {x.shape}")
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward_fn(g: np.ndarray):
        return (g.reshape(shape),)

    return _result("flatten", out, (x,), backward_fn)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer class ``targets`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d batch x classes, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {n} logit rows but {t.shape[0]} targets")
    if n == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    if t.min() < 0 or t.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: targets must lie in [0, {k}), got range [{t.min()}, {t.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, t].mean()
    out = np.asarray(loss, dtype=logits.data.dtype)

    def backward_fn(g: np.ndarray):
        p = np.exp(logp)
        p[rows, t] -= 1
        return (p * (g / n),)

    return _result("softmax_cross_entropy", out, (logits,), backward_fn)


def scalar_scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = (x.data * factor).astype(x.data.dtype)

    def backward_fn(g: np.ndarray):
        return (g * factor,)

    return _result("scalar_scale", out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def backward_fn(g: np.ndarray):
        return g, g

    return _result("add", out, (a, b), backward_fn)


_OPS = {
    "conv2d": conv2d,
    "dense": dense,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "flatten": flatten,
    "softmax_cross_entropy": softmax_cross_entropy,
    "scalar_scale": scalar_scale,
    "add": add,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Dispatch by op name.

    ``softmax_cross_entropy`` takes ``targets=`` and ``scalar_scale`` takes
    ``factor=`` as keyword params; all other ops take tensors only.
    """
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, scale: float = 1.0, wrt: Iterable[Tensor] | None = None) -> None:
    """Accumulate ``scale * dloss/dp`` into ``p.grad`` for reachable parameters.

    ``wrt`` optionally restricts accumulation to the given parameters; the
    remaining gradients are still propagated through but then discarded.
    A loss tensor can only be traversed once per forward pass.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        return
    if loss.node.consumed:
        raise GraphConsumedError(f"backward: {loss.node.kind} loss already traversed; run a new forward")
    loss.node.consumed = True
    allowed = None if wrt is None else {id(p) for p in wrt}

    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, scale, dtype=loss.data.dtype)}
    for t in reversed(_topological(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if allowed is None or id(t) in allowed:
                g = g.astype(t.data.dtype, copy=False)
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    # coordinates whose +-epsilon probe flipped a relu or maxpool switch
    skipped: int


def _probe(loss_fn: Callable[[], Tensor]) -> tuple[float, tuple]:
    global _pattern
    _pattern = []
    try:
        with no_grad():
            value = loss_fn().item()
        return value, tuple(_pattern)
    finally:
        _pattern = None


def grad_check_detail(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    max_checks_per_param: int | None = None,
    seed: int = 0,
    skip_kinks: bool = True,
) -> GradCheckResult:
    """Compare analytic gradients against central differences, coordinate by coordinate.

    ``loss_fn`` must rebuild the graph from ``params`` on every call.  When
    ``max_checks_per_param`` is given, that many coordinates are sampled
    (seeded) from each parameter instead of checking every one.

    A central difference is only a valid oracle if the loss is smooth on
    [theta - eps, theta + eps].  With ``skip_kinks`` a coordinate is left out
    when any relu mask or maxpool argmax differs between the two probes.
    """
    if get_precision() != "f64":
        raise RuntimeError("grad_check needs 64-bit precision; wrap it in precision('f64')")
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    params = list(params)
    if not params:
        return GradCheckResult(0.0, 0, 0)
    for p in params:
        p.grad = None
    backward(loss_fn(), 1.0, wrt=params)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks_per_param is not None and flat.size > max_checks_per_param:
            idx = np.sort(rng.choice(flat.size, size=max_checks_per_param, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            up, pat_up = _probe(loss_fn)
            flat[i] = orig - epsilon
            down, pat_down = _probe(loss_fn)
            flat[i] = orig
            if skip_kinks and pat_up != pat_down:
                skipped += 1
                continue
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
            checked += 1
        p.grad = None
    return GradCheckResult(worst, checked, skipped)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    max_checks_per_param: int | None = None,
    seed: int = 0,
    skip_kinks: bool = True,
) -> float:
    """Max relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)."""
    return grad_check_detail(loss_fn, params, epsilon, max_checks_per_param, seed, skip_kinks).max_error


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Iterable[Tensor], state: OptimizerState) -> None:
    """theta <- theta - lr * v with v <- momentum * v + grad; grads are cleared.

    Parameter arrays are replaced rather than mutated, so graphs recorded
    before the step keep seeing the old values.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradientError(f"sgd_step: parameter {p.name or p!r} has no accumulated gradient")
    for p in params:
        g = p.grad
        if state.momentum > 0:
            if not p.name:
                raise ValueError("sgd_step: momentum needs named parameters to key velocities")
            v = state.velocity.get(p.name)
            v = g.copy() if v is None else state.momentum * v + g
            state.velocity[p.name] = v
            step = v
        else:
            step = g
        p.data = (p.data - state.lr * step).astype(p.data.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

MAGIC = b"DBLB"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_params(path, params: Sequence[Tensor], layer_count: int) -> None:
    """Write named parameters as little-endian float32 in the DBLB layout."""
    chunks = [MAGIC, struct.pack("<III", FORMAT_VERSION, layer_count, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_params(path) -> tuple[int, dict[str, np.ndarray]]:
    """Read a DBLB checkpoint; returns (layer_count, {name: float32 array})."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise CheckpointFormatError(
                f"{path}: truncated while reading {what} at byte {pos}: need {nbytes} bytes, {len(buf) - pos} left"
            )
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a DBLB checkpoint")
    version, layer_count, n_params = struct.unpack("<III", take(12, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data of {name}"), dtype="<f4").reshape(dims)
        out[name] = data.astype(np.float32)
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - pos} trailing bytes after byte {pos}")
    return layer_count, out
