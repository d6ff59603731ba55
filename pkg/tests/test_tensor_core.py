from __future__ import annotations

import math

import numpy as np
import pytest

from src.core import functional as F
from src.core.checkpoint import load_archive, load_weights, save_archive, save_weights
from src.core.errors import CheckpointError, ShapeError
from src.core.functional import ConvSpec
from src.core.gradcheck import gradient_check
from src.core.layers import BatchNorm, Linear, Module
from src.core.optim import AdamState, adam_step, clip_gradients, global_grad_norm
from src.core.tensor import DiffTensor, backward

TOLERANCE = 1e-4


def leaf(rng, *shape, scale=1.0):
    return DiffTensor(rng.standard_normal(shape) * scale, requires_grad=True)


def weighted_sum(out: DiffTensor, weights: np.ndarray) -> DiffTensor:
    return F.sum(F.mul(out, DiffTensor(weights)))


# ---------------------------------------------------------------- 卷积

def test_conv2d_all_ones_is_nine():
    x = DiffTensor(np.ones((1, 1, 3, 3)))
    w = DiffTensor(np.ones((1, 1, 3, 3)))
    out = F.conv2d_forward(x, ConvSpec(1, 1, 1, 3), w)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv2d_identity_kernel(rng):
    x = DiffTensor(rng.standard_normal((2, 1, 5, 6)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = F.conv2d_forward(x, ConvSpec(1, 1, 1, 3, padding=(0, 1, 1)), DiffTensor(w))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_output_extent_formula():
    x = DiffTensor(np.zeros((1, 2, 11, 9)))
    spec = ConvSpec(2, 3, 1, 3, stride=(1, 2, 2), padding=(0, 1, 1))
    out = F.conv2d_forward(x, spec, DiffTensor(np.zeros(spec.weight_shape_2d)))
    assert out.shape == (1, 3, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv2d_gradient_check(rng):
    spec = ConvSpec(3, 4, 1, 3, stride=(1, 2, 1), padding=(0, 1, 1))
    x, w, b = leaf(rng, 2, 3, 8, 8), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
    weights_out = rng.standard_normal((2, 4, 4, 8))
    error = gradient_check(lambda: weighted_sum(F.conv2d_forward(x, spec, w, b), weights_out), [x, w, b], max_checks=60)
    assert error < TOLERANCE


def test_conv2d_rejects_wrong_weight_shape():
    with pytest.raises(ShapeError, match="权重形状"):
        F.conv2d_forward(DiffTensor(np.zeros((1, 2, 5, 5))), ConvSpec(2, 3, 1, 3), DiffTensor(np.zeros((3, 2, 5, 5))))


def test_conv3d_all_ones_is_twenty_seven():
    out = F.conv3d_forward(DiffTensor(np.ones((1, 1, 3, 3, 3))), ConvSpec(1, 1, 3, 3), DiffTensor(np.ones((1, 1, 3, 3, 3))))
    assert out.data.item() == 27.0


def test_conv3d_central_kernel_is_identity_on_interior(rng):
    x = DiffTensor(rng.standard_normal((1, 1, 5, 6, 6)))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    out = F.conv3d_forward(x, ConvSpec(1, 1, 3, 3), DiffTensor(w))
    np.testing.assert_array_equal(out.data, x.data[:, :, 1:-1, 1:-1, 1:-1])


def test_conv3d_gradient_check(rng):
    spec = ConvSpec(2, 3, 3, 3, padding=(1, 1, 1))
    x, w = leaf(rng, 2, 2, 4, 6, 6), leaf(rng, 3, 2, 3, 3, 3)
    weights_out = rng.standard_normal((2, 3, 4, 6, 6))
    assert gradient_check(lambda: weighted_sum(F.conv3d_forward(x, spec, w), weights_out), [x, w], max_checks=50) < TOLERANCE


# ---------------------------------------------------------------- (2+1)D 分解

@pytest.mark.parametrize(
    "n_in, n_out, t, d, expected",
    [(64, 64, 3, 3, 144), (16, 32, 3, 3, 57), (1, 1, 1, 1, 1)],
)
def test_mid_channels(n_in, n_out, t, d, expected):
    assert F.mid_channels(n_in, n_out, t, d) == expected


def test_factorized_parameter_parity_at_64_channels():
    assert F.full_conv3d_param_count(64, 64, 3, 3) == 110592
    assert F.factorized_param_count(64, 64, 3, 3) == 110592


def test_factorized_never_exceeds_full_3d():
    for n_in in (4, 7, 16, 64):
        for n_out in (4, 9, 32, 128):
            for t in (1, 3, 5):
                for d in (1, 3, 7):
                    assert F.factorized_param_count(n_in, n_out, t, d) <= F.full_conv3d_param_count(n_in, n_out, t, d)


def _factorized_weights(rng, spec: ConvSpec):
    spatial, temporal = F.factorized_specs(spec)
    return {
        "spatial": leaf(rng, *spatial.weight_shape_3d, scale=0.3),
        "temporal": leaf(rng, *temporal.weight_shape_3d, scale=0.3),
    }


def test_factorized_block_zero_input_gives_zero_output(rng):
    spec = ConvSpec(3, 8, 3, 3, padding=(1, 1, 1))
    out = F.factorized_conv_block(DiffTensor(np.zeros((1, 3, 4, 6, 6))), spec, _factorized_weights(rng, spec))
    assert not out.data.any()


def test_factorized_block_matches_full_conv_shape(rng):
    spec = ConvSpec(3, 8, 3, 3, padding=(1, 1, 1))
    x = DiffTensor(rng.standard_normal((1, 3, 8, 16, 16)))
    out = F.factorized_conv_block(x, spec, _factorized_weights(rng, spec))
    full = F.conv3d_forward(x, spec, DiffTensor(np.zeros(spec.weight_shape_3d)))
    assert out.shape == full.shape == (1, 8, 8, 16, 16)

    strided = ConvSpec(3, 8, 3, 3, stride=(2, 2, 2), padding=(1, 1, 1))
    out = F.factorized_conv_block(x, strided, _factorized_weights(rng, strided))
    full = F.conv3d_forward(x, strided, DiffTensor(np.zeros(strided.weight_shape_3d)))
    assert out.shape == full.shape


def test_factorized_block_gradient_check(rng):
    spec = ConvSpec(2, 3, 3, 3, padding=(1, 1, 1))
    weights = _factorized_weights(rng, spec)
    x = leaf(rng, 2, 2, 3, 5, 5)
    weights_out = rng.standard_normal((2, 3, 3, 5, 5))
    tensors = [x, weights["spatial"], weights["temporal"]]
    assert gradient_check(lambda: weighted_sum(F.factorized_conv_block(x, spec, weights), weights_out), tensors,
                          max_checks=40) < TOLERANCE


# ---------------------------------------------------------------- 结构层

def test_relu_values():
    out = F.relu(DiffTensor(np.array([-1.5, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_max_pool_and_global_average_gradients(rng):
    x = leaf(rng, 2, 3, 7, 7)
    weights_out = rng.standard_normal((2, 3, 4, 4))
    assert gradient_check(lambda: weighted_sum(F.max_pool(x, (3, 3), (2, 2), (1, 1)), weights_out), [x], max_checks=60) < TOLERANCE
    weights_out = rng.standard_normal((2, 3))
    assert gradient_check(lambda: weighted_sum(F.global_average_pool(x), weights_out), [x], max_checks=60) < TOLERANCE


def test_batch_norm_zero_variance_returns_bias():
    bn = BatchNorm(2)
    bn.beta.data[:] = [0.25, -1.0]
    x = DiffTensor(np.full((4, 2), 3.0, dtype=np.float32))
    out = bn(x)
    np.testing.assert_array_equal(out.data, np.tile([0.25, -1.0], (4, 1)).astype(np.float32))


def test_batch_norm_requires_two_samples_in_training():
    bn = BatchNorm(3)
    with pytest.raises(ShapeError, match="≥ 2"):
        bn(DiffTensor(np.ones((1, 3), dtype=np.float32)))
    bn.eval()
    assert bn(DiffTensor(np.ones((1, 3), dtype=np.float32))).shape == (1, 3)


def test_batch_norm_eval_uses_frozen_statistics(rng):
    bn = BatchNorm(3)
    bn(DiffTensor(rng.standard_normal((8, 3, 4)).astype(np.float32)))
    mean, var = bn.running_mean.copy(), bn.running_var.copy()
    bn.eval()
    x = rng.standard_normal((5, 3, 4)).astype(np.float32)
    out = bn(DiffTensor(x))
    np.testing.assert_array_equal(bn.running_mean, mean)
    expected = (x - mean.reshape(1, 3, 1)) / np.sqrt(var.reshape(1, 3, 1) + 1e-5)
    np.testing.assert_allclose(out.data, expected, rtol=1e-5, atol=1e-5)


def test_batch_norm_training_gradient_check(rng):
    x = leaf(rng, 4, 3, 5)
    gamma, beta = leaf(rng, 3), leaf(rng, 3)
    weights_out = rng.standard_normal((4, 3, 5))

    def fn():
        return weighted_sum(F.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), training=True), weights_out)

    assert gradient_check(fn, [x, gamma, beta]) < TOLERANCE


def test_linear_gradient_check(rng):
    x, w, b = leaf(rng, 5, 7), leaf(rng, 3, 7), leaf(rng, 3)
    weights_out = rng.standard_normal((5, 3))
    assert gradient_check(lambda: weighted_sum(F.linear(x, w, b), weights_out), [x, w, b]) < TOLERANCE


# ---------------------------------------------------------------- softmax 与交叉熵

def test_uniform_logits_cross_entropy_is_log_classes():
    loss = F.softmax_cross_entropy(DiffTensor(np.zeros((3, 60))), [0, 17, 59])
    assert loss.item() == pytest.approx(math.log(60), abs=1e-12)
    assert loss.item() == pytest.approx(4.0943, abs=1e-4)


def test_cross_entropy_vanishes_with_margin():
    losses = []
    for margin in (1.0, 10.0, 100.0):
        logits = np.zeros((1, 5))
        logits[0, 2] = margin
        losses.append(F.softmax_cross_entropy(DiffTensor(logits), [2]).item())
    assert losses[0] > losses[1] > losses[2] >= 0.0
    assert losses[2] < 1e-30


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    logits = leaf(rng, 4, 6)
    labels = np.array([0, 5, 2, 2])
    backward(F.softmax_cross_entropy(logits, labels))
    probs = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(4), labels] -= 1.0
    np.testing.assert_allclose(logits.grad, probs / 4, atol=1e-12)
    assert gradient_check(lambda: F.softmax_cross_entropy(logits, labels), [logits]) < TOLERANCE


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(ValueError, match="标签超出范围"):
        F.softmax_cross_entropy(DiffTensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_rejects_empty_batch():
    with pytest.raises(ShapeError, match="batch为空"):
        F.softmax_cross_entropy(DiffTensor(np.zeros((0, 3))), [])


def test_softmax_rows_sum_to_one(rng):
    probs = F.softmax(DiffTensor(rng.standard_normal((6, 9)) * 50))
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones(rng):
    x = leaf(rng, 3, 4)
    backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square_gives_twice_input(rng):
    x = leaf(rng, 5)
    backward(F.sum(F.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_shared_node_visited_once(rng):
    x = leaf(rng, 4)
    y = F.mul(x, 3.0)
    backward(F.sum(F.add(y, y)))
    np.testing.assert_allclose(x.grad, np.full(4, 6.0))


def test_backward_rejects_non_scalar(rng):
    with pytest.raises(ShapeError, match="标量"):
        backward(F.mul(leaf(rng, 3), 2.0))


def test_two_layer_network_gradient_check(rng):
    x = DiffTensor(rng.standard_normal((4, 5)))
    w1, b1, w2, b2 = leaf(rng, 6, 5), leaf(rng, 6), leaf(rng, 3, 6), leaf(rng, 3)
    labels = np.array([0, 1, 2, 1])

    def fn():
        hidden = F.relu(F.linear(x, w1, b1))
        return F.softmax_cross_entropy(F.linear(hidden, w2, b2), labels)

    assert gradient_check(fn, [w1, b1, w2, b2]) < TOLERANCE


def test_unreachable_parameter_gets_zero_gradient(rng):
    class Net(Module):
        def __init__(self):
            super().__init__()
            self.used = Linear(3, 2, rng, dtype=np.float64)
            self.unused = Linear(3, 2, rng, dtype=np.float64)

    net = Net()
    net.zero_grad()
    backward(F.sum(net.used(DiffTensor(rng.standard_normal((2, 3))))))
    assert not net.unused.weight.grad.any()
    assert net.used.weight.grad.any()


# ---------------------------------------------------------------- 梯度裁剪与 Adam

def _params_with_grads(grads):
    params = {}
    for index, grad in enumerate(grads):
        p = DiffTensor(np.zeros_like(grad), requires_grad=True)
        p.grad = np.array(grad, dtype=np.float64)
        params[f"p{index}"] = p
    return params


def test_clip_scales_norm_twenty_by_half():
    params = _params_with_grads([np.array([12.0, 16.0])])
    norm, scale = clip_gradients(params, 10.0)
    assert norm == pytest.approx(20.0)
    assert scale == pytest.approx(0.5)
    np.testing.assert_allclose(params["p0"].grad, [6.0, 8.0])


def test_clip_leaves_small_gradients_untouched():
    params = _params_with_grads([np.array([1.8, 2.4])])
    norm, scale = clip_gradients(params, 10.0)
    assert norm == pytest.approx(3.0)
    assert scale == 1.0
    np.testing.assert_array_equal(params["p0"].grad, [1.8, 2.4])


def test_clip_many_parameters_and_idempotence(rng):
    params = _params_with_grads([rng.standard_normal(s) * 10 for s in [(3, 4), (7,), (2, 2, 2), (50,)]])
    clip_gradients(params, 10.0)
    assert global_grad_norm(params) == pytest.approx(10.0, abs=1e-6)
    snapshot = {k: p.grad.copy() for k, p in params.items()}
    clip_gradients(params, 10.0)
    for name, grad in snapshot.items():
        np.testing.assert_array_equal(params[name].grad, grad)


def test_adam_first_step_moves_by_learning_rate():
    for magnitude in (1e-3, 1.0, 1e4):
        params = _params_with_grads([np.array([magnitude, -magnitude])])
        adam_step(AdamState(learning_rate=1e-4), params)
        np.testing.assert_allclose(np.abs(params["p0"].data), 1e-4, rtol=1e-3)


def test_adam_zero_gradient_leaves_parameters():
    params = _params_with_grads([np.zeros(4)])
    params["p0"].data[:] = [1.0, 2.0, 3.0, 4.0]
    adam_step(AdamState(), params)
    np.testing.assert_array_equal(params["p0"].data, [1.0, 2.0, 3.0, 4.0])


def test_adam_matches_reference_on_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    p = DiffTensor(np.zeros(3), requires_grad=True)
    state = AdamState(learning_rate=0.1)

    ref = np.zeros(3)
    m = np.zeros(3)
    v = np.zeros(3)
    for step in range(1, 11):
        p.grad = None
        backward(F.sum(F.mul(F.sub(p, target), F.sub(p, target))))
        adam_step(state, {"p": p})

        g = 2 * (ref - target)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12, atol=1e-12)
    assert state.step_count == 10


def test_adam_rejects_mismatched_moment_shape():
    params = _params_with_grads([np.ones(3)])
    state = AdamState()
    state.first_moment["p0"] = np.zeros(4)
    state.second_moment["p0"] = np.zeros(4)
    with pytest.raises(ShapeError):
        adam_step(state, params)


# ---------------------------------------------------------------- 归档

def test_archive_is_byte_identical_and_exact(tmp_path, rng):
    arrays = {"layer.weight": rng.standard_normal((3, 4)).astype(np.float32), "steps": np.array(7)}
    first = save_archive(tmp_path / "a.ckpt", arrays, {"note": "x"})
    second = save_archive(tmp_path / "b.ckpt", arrays, {"note": "x"})
    assert first.read_bytes() == second.read_bytes()
    loaded, metadata = load_archive(first)
    np.testing.assert_array_equal(loaded["layer.weight"], arrays["layer.weight"])
    assert loaded["layer.weight"].dtype == np.float32
    assert metadata == {"note": "x"}


def test_corrupt_archive_raises(tmp_path):
    path = tmp_path / "broken.ckpt"
    path.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError, match="损坏"):
        load_archive(path)


def test_partial_weight_import_reports_differences(tmp_path, rng):
    source = Linear(3, 2, rng)
    path = save_weights(tmp_path / "w.ckpt", source)

    class Wrapper(Module):
        def __init__(self):
            super().__init__()
            self.weight = Linear(3, 2, rng).weight
            self.extra = Linear(2, 2, rng)

    target = Wrapper()
    with pytest.raises(CheckpointError):
        load_weights(path, target, strict=True)
    report = load_weights(path, target, strict=False)
    assert report["unexpected"] == ["bias"]
    assert "extra.weight" in report["missing"]
    np.testing.assert_array_equal(target.weight.data, source.weight.data)
