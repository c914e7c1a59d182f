import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debiaslab import autodiff as ad
from debiaslab.autodiff import Tensor, backward, forward_op, grad_check
from debiaslab.model import build_model, forward_dual

SEEDS = range(10)


def _param(rng, *shape, name="p", scale=1.0):
    return Tensor(scale * rng.normal(size=shape), requires_grad=True, name=name)


def _readout(t: Tensor, rng, n_classes=3):
    """Scalar loss on top of any tensor: flatten, fixed random projection, cross-entropy."""
    flat = forward_op("flatten", [t]) if t.data.ndim > 2 else t
    # scaled so logits stay O(1); a saturated softmax leaves gradients below finite-difference noise
    w = Tensor(rng.normal(size=(flat.shape[1], n_classes)) / np.sqrt(flat.shape[1]))
    b = Tensor(np.zeros(n_classes))
    logits = forward_op("dense", [flat, w, b])
    targets = np.arange(flat.shape[0]) % n_classes
    return forward_op("softmax_cross_entropy", [logits], targets=targets)


def _check(build, seed):
    """grad_check where ``build(rng)`` returns (params, fn(params) -> output tensor)."""
    rng = np.random.default_rng(seed)
    params, fn = build(rng)
    head_seed = int(rng.integers(1 << 30))
    return grad_check(lambda: _readout(fn(params), np.random.default_rng(head_seed)), params, epsilon=1e-5)


OP_CASES = {
    "conv2d": lambda rng: (
        # fan-in scaled weights keep the readout softmax out of saturation
        [_param(rng, 2, 2, 5, 5, name="x"), _param(rng, 3, 2, 3, 3, name="w", scale=18 ** -0.5),
         _param(rng, 3, name="b")],
        lambda p: forward_op("conv2d", p),
    ),
    "dense": lambda rng: (
        [_param(rng, 4, 5, name="x"), _param(rng, 5, 3, name="w"), _param(rng, 3, name="b")],
        lambda p: forward_op("dense", p),
    ),
    "relu": lambda rng: ([_param(rng, 4, 6, name="x")], lambda p: forward_op("relu", p)),
    "maxpool2d": lambda rng: ([_param(rng, 2, 2, 5, 5, name="x")], lambda p: forward_op("maxpool2d", p)),
    "flatten": lambda rng: ([_param(rng, 2, 3, 2, 2, name="x")], lambda p: forward_op("flatten", p)),
    "softmax_cross_entropy": lambda rng: ([_param(rng, 5, 4, name="logits")], lambda p: p[0]),
    "scalar_scale": lambda rng: (
        [_param(rng, 3, 4, name="x")],
        lambda p: forward_op("scalar_scale", p, factor=-0.53),
    ),
    "add": lambda rng: (
        [_param(rng, 3, 4, name="a"), _param(rng, 3, 4, name="b")],
        lambda p: forward_op("add", p),
    ),
}


@pytest.mark.parametrize("kind", sorted(OP_CASES))
@pytest.mark.parametrize("seed", SEEDS)
def test_grad_check_every_op(f64, kind, seed):
    assert _check(OP_CASES[kind], seed) < 1e-4


def test_op_cases_cover_the_closed_op_set():
    assert set(OP_CASES) == set(ad.OP_KINDS)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_check_full_dual_head_model(f64, seed):
    model = build_model(seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(2, 1, 28, 28))
    y, z = np.array([0, 3]), np.array([1, 0])

    def loss():
        yl, zl = forward_dual(model, images)
        l_adv = forward_op("scalar_scale", [forward_op("softmax_cross_entropy", [zl], targets=z)], factor=0.53)
        return forward_op("add", [forward_op("softmax_cross_entropy", [yl], targets=y), l_adv])

    assert grad_check(loss, model.params(), epsilon=1e-5, max_checks_per_param=10, seed=seed) < 1e-4


def test_grad_check_single_dense_seed7(f64):
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(4, 5)))
    w, b = _param(rng, 5, 3, name="w"), _param(rng, 3, name="b")
    fn = lambda: forward_op("softmax_cross_entropy", [forward_op("dense", [x, w, b])], targets=[0, 1, 2, 0])  # noqa: E731
    assert grad_check(fn, [w, b], epsilon=1e-5) < 1e-4


def test_grad_check_skips_coordinates_straddling_a_relu_kink(f64):
    x = Tensor(np.array([[3e-6, 0.7]]), requires_grad=True, name="x")
    w = Tensor(np.array([[1.0, -2.0], [0.5, 1.0]]))
    b = Tensor(np.zeros(2))

    def loss():
        h = forward_op("relu", [x])
        return forward_op("softmax_cross_entropy", [forward_op("dense", [h, w, b])], targets=[1])

    strict = ad.grad_check_detail(loss, [x], epsilon=1e-5, skip_kinks=False)
    aware = ad.grad_check_detail(loss, [x], epsilon=1e-5)
    assert strict.max_error > 1e-2  # the probe crosses zero: finite differences average two slopes
    assert aware.skipped == 1 and aware.checked == 1
    assert aware.max_error < 1e-6


def test_grad_check_constant_graph_is_zero(f64):
    assert grad_check(lambda: Tensor(1.5), [], epsilon=1e-5) == 0.0


def test_grad_check_requires_f64():
    with ad.precision("f32"):
        with pytest.raises(RuntimeError):
            grad_check(lambda: Tensor(0.0), [])


def test_grad_check_rejects_bad_epsilon(f64):
    with pytest.raises(ValueError):
        grad_check(lambda: Tensor(0.0), [], epsilon=1e-2)


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------


def test_conv2d_hand_example():
    x = Tensor(np.array([[[[1, 2], [3, 4]]]]))
    w = Tensor(np.array([[[[1, 0], [0, 1]]]]))
    out = forward_op("conv2d", [x, w, Tensor(np.zeros(1))])
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 5


def test_relu_example():
    assert forward_op("relu", [Tensor([-1.0, 0.0, 2.0])]).data.tolist() == [0, 0, 2]


@pytest.mark.parametrize("target", range(4))
def test_cross_entropy_uniform_logits(target):
    loss = forward_op("softmax_cross_entropy", [Tensor(np.zeros((1, 4)))], targets=[target])
    assert loss.item() == pytest.approx(math.log(4), rel=1e-6)


def test_maxpool_drops_odd_trailing_row():
    x = Tensor(np.arange(25.0).reshape(1, 1, 5, 5))
    out = forward_op("maxpool2d", [x])
    assert out.data[0, 0].tolist() == [[6, 8], [16, 18]]


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown op"):
        forward_op("sigmoid", [Tensor([0.0])])


@pytest.mark.parametrize("kind, inputs, where", [
    ("conv2d", lambda: [Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1))], "channels"),
    ("dense", lambda: [Tensor(np.zeros((2, 4))), Tensor(np.zeros((5, 3))), Tensor(np.zeros(3))], "features"),
    ("add", lambda: [Tensor(np.zeros(3)), Tensor(np.zeros(4))], "add"),
    ("conv2d", lambda: [Tensor(np.zeros((2, 4))), Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.zeros(1))], "4-d"),
])
def test_shape_errors_name_the_op(kind, inputs, where):
    with pytest.raises(ad.ShapeError, match=kind if kind != "add" else "add") as info:
        forward_op(kind, inputs())
    assert where in str(info.value)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 3), c=st.integers(1, 3), h=st.integers(1, 8), w=st.integers(1, 8),
    f=st.integers(1, 4), k=st.integers(1, 3),
)
def test_shape_safety(n, c, h, w, f, k):
    x = Tensor(np.ones((n, c, h, w)))
    if h < k or w < k:
        with pytest.raises(ad.ShapeError):
            forward_op("conv2d", [x, Tensor(np.ones((f, c, k, k))), Tensor(np.zeros(f))])
        return
    out = forward_op("conv2d", [x, Tensor(np.ones((f, c, k, k))), Tensor(np.zeros(f))])
    assert out.shape == (n, f, h - k + 1, w - k + 1)
    assert out.data.size == int(np.prod(out.shape))
    if h >= 2 and w >= 2:
        pooled = forward_op("maxpool2d", [x])
        assert pooled.shape == (n, c, h // 2, w // 2)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _dense_loss(seed=0):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 5)))
    w, b = _param(rng, 5, 3, name="w"), _param(rng, 3, name="b")

    def run():
        return forward_op("softmax_cross_entropy", [forward_op("dense", [x, w, b])], targets=[0, 1, 2, 1])

    return run, [w, b]


def test_relu_dead_region_gradient():
    x = Tensor(np.array([[-1.0]]), requires_grad=True, name="x")
    out = forward_op("relu", [x])
    loss = forward_op("softmax_cross_entropy", [forward_op("add", [out, out])], targets=[0])
    backward(loss, 1.0)
    assert x.grad.tolist() == [[0.0]]


def test_backward_scale_matches_lambda(f64):
    run, params = _dense_loss()
    backward(run(), 1.0)
    ref = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    backward(run(), -0.53)
    for p, g in zip(params, ref):
        np.testing.assert_allclose(p.grad, -0.53 * g, rtol=1e-12, atol=0)


def test_backward_accumulates_two_scales(f64):
    run, params = _dense_loss(1)
    backward(run(), 0.3)
    backward(run(), 1.2)
    acc = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    backward(run(), 1.5)
    for p, g in zip(params, acc):
        np.testing.assert_allclose(g, p.grad, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(-4, 4, allow_nan=False), seed=st.integers(0, 1000))
def test_backward_linearity_property(scale, seed):
    with ad.precision("f64"):
        run, params = _dense_loss(seed)
        backward(run(), 1.0)
        ref = [p.grad.copy() for p in params]
        for p in params:
            p.grad = None
        backward(run(), scale)
        for p, g in zip(params, ref):
            np.testing.assert_allclose(p.grad, scale * g, rtol=1e-12, atol=1e-300)


def test_backward_twice_on_same_graph_fails():
    run, _ = _dense_loss()
    loss = run()
    backward(loss)
    with pytest.raises(ad.GraphConsumedError):
        backward(loss)


def test_backward_non_scalar_fails():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        backward(forward_op("relu", [x]))


def test_backward_wrt_restricts_accumulation():
    run, (w, b) = _dense_loss()
    backward(run(), 1.0, wrt=[w])
    assert w.grad is not None and b.grad is None


def test_forward_and_gradients_deterministic():
    grads = []
    for _ in range(2):
        run, params = _dense_loss(3)
        loss = run()
        backward(loss)
        grads.append((loss.data.tobytes(), [p.grad.tobytes() for p in params]))
    assert grads[0] == grads[1]


def test_no_grad_records_nothing():
    run, params = _dense_loss()
    with ad.no_grad():
        loss = run()
    assert loss.node is None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_sgd_plain_step():
    p = Tensor([1.0], requires_grad=True, name="p")
    p.grad = np.array([0.5])
    ad.sgd_step([p], ad.OptimizerState(lr=0.1, momentum=0.0))
    assert p.data.tolist() == pytest.approx([0.95])
    assert p.grad is None


def test_sgd_zero_grad_fixed_point():
    p = Tensor([1.0, -2.0], requires_grad=True, name="p")
    before = p.data.copy()
    state = ad.OptimizerState(lr=0.1, momentum=0.9)
    for _ in range(3):
        p.grad = np.zeros(2)
        ad.sgd_step([p], state)
    assert np.array_equal(p.data, before)


def test_sgd_momentum_second_step_displacement(f64):
    g = np.array([0.3, -1.0])
    p = Tensor([0.0, 0.0], requires_grad=True, name="p")
    state = ad.OptimizerState(lr=0.1, momentum=0.9)
    p.grad = g.copy()
    ad.sgd_step([p], state)
    first = p.data.copy()
    p.grad = g.copy()
    ad.sgd_step([p], state)
    np.testing.assert_allclose(p.data - first, -0.1 * 1.9 * g, rtol=1e-12)


def test_sgd_velocity_exists_iff_momentum():
    p = Tensor(np.ones((2, 3)), requires_grad=True, name="p")
    s0 = ad.OptimizerState(lr=0.1)
    p.grad = np.ones((2, 3))
    ad.sgd_step([p], s0)
    assert s0.velocity == {}
    s1 = ad.OptimizerState(lr=0.1, momentum=0.5)
    p.grad = np.ones((2, 3))
    ad.sgd_step([p], s1)
    assert s1.velocity["p"].shape == p.shape


def test_sgd_missing_gradient_names_parameter():
    p = Tensor([1.0], requires_grad=True, name="layer3.weight")
    with pytest.raises(ad.MissingGradientError, match="layer3.weight"):
        ad.sgd_step([p], ad.OptimizerState(lr=0.1))


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def _params(seed=0):
    rng = np.random.default_rng(seed)
    return [
        Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32), name="layer0.weight", dtype=np.float32),
        Tensor(rng.normal(size=(3,)).astype(np.float32), name="layer0.bias", dtype=np.float32),
    ]


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = _params()
    path = tmp_path / "w.ckpt"
    ad.save_params(path, params, layer_count=2)
    layers, loaded = ad.load_params(path)
    assert layers == 2
    for p in params:
        assert loaded[p.name].tobytes() == p.data.tobytes()
    ad.save_params(tmp_path / "again.ckpt", [Tensor(loaded[p.name], name=p.name) for p in params], 2)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "w.ckpt"
    ad.save_params(path, _params(), layer_count=7)
    raw = path.read_bytes()
    assert raw[:4] == b"DBLB"
    assert int.from_bytes(raw[4:8], "little") == ad.FORMAT_VERSION
    assert int.from_bytes(raw[8:12], "little") == 7


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "w.ckpt"
    ad.save_params(path, _params(), layer_count=2)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ad.CheckpointFormatError, match="truncated"):
        ad.load_params(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "w.ckpt"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ad.CheckpointFormatError, match="magic"):
        ad.load_params(path)
