import numpy as np
import pytest

import nn_utils as nn
import tensor_utils as tu
from nn_utils import DropoutMode
from tensor_utils import ConfigError, ContractError, DimensionError, EmptyGraphError, RngStream, Tensor


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_conv1d(x, w, bias):
    c_out, c_in, width = w.shape
    out_len = x.shape[-1] - width + 1
    out = np.zeros((x.shape[0], c_out, out_len))
    for b in range(x.shape[0]):
        for o in range(c_out):
            for t in range(out_len):
                out[b, o, t] = np.sum(x[b, :, t:t + width] * w[o]) + bias[o]
    return out


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Forward primitives
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_matmul_identity_and_basis():
    a = Tensor(np.arange(6.0).reshape(2, 3), dtype=np.float64)
    assert np.array_equal(tu.matmul(a, Tensor(np.eye(3))).data, a.data)
    e1 = Tensor(np.array([[1.0], [0.0], [0.0]]))
    assert np.array_equal(tu.matmul(a, e1).data[:, 0], a.data[:, 0])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    out = tu.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    assert np.allclose(out, naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tu.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv1d_output_length():
    x = Tensor(np.zeros((9, 128)))
    w = Tensor(np.zeros((32, 9, 9)))
    assert tu.conv1d(x, w).shape == (32, 120)


def test_conv1d_unit_kernel_is_truncated_identity():
    x = np.arange(10.0)[None]
    w = np.zeros((1, 1, 4))
    w[0, 0, 0] = 1.0
    out = tu.conv1d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
    assert np.array_equal(out[0], x[0, :7])


def test_conv1d_matches_sliding_window_oracle():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 3, 16)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
    out = tu.conv1d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    assert np.allclose(out, naive_conv1d(x, w, b), atol=1e-12)


def test_conv1d_rejects_short_input():
    with pytest.raises(DimensionError, match="shorter than kernel"):
        tu.conv1d(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 1, 5))))


def test_max_pool_takes_window_maximum():
    x = Tensor(np.array([[[1.0, 3.0, 2.0, 0.0, 5.0, 4.0]]]))
    assert np.array_equal(tu.max_pool1d(x, 2, 2).data, [[[3.0, 2.0, 5.0]]])


def test_softmax_normalizes_and_is_shift_invariant():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 7))
    p = tu.softmax(Tensor(z, dtype=np.float64)).data
    q = tu.softmax(Tensor(z + 123.0, dtype=np.float64)).data
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(p, q, atol=1e-12)


def test_einsum_rejects_index_in_one_operand_only():
    with pytest.raises(DimensionError):
        tu.einsum("ij,jk->i", Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))))


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Backward pass
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_backward_of_square():
    tu.reset_tape()
    x = Tensor(3.0, requires_grad=True, name="x", dtype=np.float64)
    grads = tu.backward(tu.mul(x, x))
    assert grads["x"].item() == 6.0


def test_backward_through_relu_sum():
    tu.reset_tape()
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True, name="x", dtype=np.float64)
    grads = tu.backward(tu.reduce_sum(tu.relu(x)))
    assert np.array_equal(grads["x"].data, [0.0, 1.0])


def test_backward_of_cube_sum():
    tu.reset_tape()
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, name="x", dtype=np.float64)
    grads = tu.backward(tu.reduce_sum(tu.power(x, 3)))
    assert np.allclose(grads["x"].data, [3.0, 12.0])


def test_unused_leaf_gets_zero_gradient():
    tu.reset_tape()
    x = Tensor(np.ones(3), requires_grad=True, name="x", dtype=np.float64)
    y = Tensor(np.ones(2), requires_grad=True, name="y", dtype=np.float64)
    tu.mul(y, 2.0)  # recorded but not part of the loss
    grads = tu.backward(tu.reduce_sum(x))
    assert np.array_equal(grads["y"].data, np.zeros(2))


def test_backward_rejects_non_scalar_loss():
    tu.reset_tape()
    x = Tensor(np.ones(3), requires_grad=True, name="x")
    with pytest.raises(ContractError, match="scalar"):
        tu.backward(tu.mul(x, 2.0))


def test_backward_rejects_disconnected_loss():
    with pytest.raises(EmptyGraphError):
        tu.backward(Tensor(1.0))
    with pytest.raises(EmptyGraphError):
        tu.backward(tu.reduce_sum(Tensor(np.ones(3))))


def test_tape_is_consumed_by_backward():
    tu.reset_tape()
    x = Tensor(np.ones(2), requires_grad=True, name="x")
    loss = tu.reduce_sum(x)
    tu.backward(loss)
    with pytest.raises(ContractError, match="consumed"):
        tu.backward(loss)


def test_no_grad_records_nothing():
    tape = tu.reset_tape()
    x = Tensor(np.ones(2), requires_grad=True, name="x")
    with tu.no_grad():
        y = tu.exp(x)
    assert len(tape) == 0
    assert not y.requires_grad


def test_duplicate_leaf_names_are_rejected():
    tu.reset_tape()
    a = Tensor(np.ones(2), requires_grad=True, name="w")
    b = Tensor(np.ones(2), requires_grad=True, name="w")
    with pytest.raises(ContractError, match="share the name"):
        tu.backward(tu.reduce_sum(tu.add(a, b)))


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Gradient checks
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def _point(*shape, seed=0, low=0.5, high=1.5):
    # bounded away from zero so relu kinks and log poles stay out of reach
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(signs * rng.uniform(low, high, size=shape), dtype=np.float64)


@pytest.mark.parametrize("f", [
    lambda x: tu.reduce_sum(tu.mul(tu.exp(x), x)),
    lambda x: tu.reduce_sum(tu.log(tu.mul(x, x))),
    lambda x: tu.reduce_sum(tu.div(tu.sub(x, 3.0), tu.add(tu.mul(x, x), 1.0))),
    lambda x: tu.reduce_mean(tu.mul(tu.relu(x), tu.neg(x))),
    lambda x: tu.reduce_sum(tu.mul(tu.softmax(x, axis=1), Tensor(np.arange(12.0).reshape(3, 4)))),
    lambda x: tu.reduce_sum(tu.mul(tu.log_softmax(x, axis=0), Tensor(np.arange(12.0).reshape(3, 4)))),
    lambda x: tu.reduce_sum(tu.power(tu.reshape(x, (4, 3)), 2)),
    lambda x: tu.reduce_sum(tu.reduce_sum(tu.mul(x, x), axis=1, keepdims=True)),
], ids=["exp", "log", "div", "relu", "softmax", "log_softmax", "reshape", "keepdims"])
def test_elementwise_gradients(f):
    report = tu.grad_check(f, _point(3, 4))
    assert report.passed, report.worst


def test_linear_function_gradient_is_exact():
    w = np.array([2.0, -1.0, 0.5])
    report = tu.grad_check(lambda x: tu.reduce_sum(tu.mul(x, Tensor(w))), _point(3))
    assert report.max_rel_error < 1e-9


def test_matmul_and_einsum_gradients():
    point = {"a": _point(3, 4, seed=1), "b": _point(4, 2, seed=2), "c": _point(3, 2, seed=3)}

    def f(p):
        return tu.reduce_sum(tu.mul(tu.matmul(p["a"], p["b"]), tu.einsum("ij,ij->ij", p["c"], p["c"])))

    assert tu.grad_check(f, point).passed


def test_conv_and_pool_gradients():
    rng = np.random.default_rng(4)
    # distinct, well separated values keep every pooling window's winner stable under the step
    x = Tensor((rng.permutation(2 * 3 * 12) * 0.1).reshape(2, 3, 12), dtype=np.float64)
    point = {"x": x, "w": _point(4, 3, 3, seed=5), "b": _point(4, seed=6)}
    weights = Tensor(rng.normal(size=(2, 4, 10)))

    def f(p):
        return tu.reduce_sum(tu.mul(tu.conv1d(p["x"], p["w"], p["b"]), weights))

    assert tu.grad_check(f, point).passed

    pool_weights = Tensor(rng.normal(size=(2, 3, 6)))

    def pooled(p):
        return tu.reduce_sum(tu.mul(tu.max_pool1d(p["x"], 2, 2), pool_weights))

    assert tu.grad_check(pooled, {"x": x}).passed


def test_two_layer_dense_net_gradient():
    rng = np.random.default_rng(7)
    point = {"w1": Tensor(rng.normal(size=(5, 8))), "b1": Tensor(rng.normal(size=8)),
             "w2": Tensor(rng.normal(size=(8, 3))), "b2": Tensor(rng.normal(size=3))}
    x = Tensor(rng.normal(size=(6, 5)))
    labels = rng.integers(0, 3, size=6)

    def f(p):
        hidden = tu.relu(tu.add(tu.matmul(x, p["w1"]), p["b1"]))
        return nn.softmax_cross_entropy(tu.add(tu.matmul(hidden, p["w2"]), p["b2"]), labels)

    report = tu.grad_check(f, point, tol=1e-6)
    assert report.passed, report.worst


def kink_pattern(model, params, x, stream):
    """ Sign of every ReLU input and winner of every pooling window, under the dropout masks forward() draws """
    bound = model.bind(params)
    sampler = stream.bind(np.arange(len(x)), 0)
    h = Tensor(np.asarray(x, dtype=np.float64))
    signs, winners = [], []
    with tu.no_grad():
        for i, layer in enumerate(bound.layers):
            if isinstance(layer, nn.ReLU):
                signs.append(h.data > 0)
            elif isinstance(layer, nn.MaxPool1d):
                b, c, length = h.shape
                usable = length // layer.kernel * layer.kernel
                winners.append(h.data[..., :usable].reshape(b, c, -1, layer.kernel).argmax(axis=-1))
            h, _ = nn.run_layers(bound, h, DropoutMode.TRAIN, sampler, start=i, stop=i + 1)
    return signs + winners


def crosses_a_kink(model, base, directions, step, x, stream):
    reference = kink_pattern(model, base, x, stream)
    for direction in directions:
        for sign in (1, -1):
            moved = {name: base[name] + sign * step * direction[name] for name in base}
            if any(not np.array_equal(a, b) for a, b in zip(reference, kink_pattern(model, moved, x, stream))):
                return True
    return False


def test_har_cnn_gradient_in_float64():
    model = nn.build_har_cnn(p=0.2, dtype=np.float64, seed=0)
    base = {name: t.data for name, t in model.params.items()}
    directions = tu.unit_directions(base, 8, seed=3)
    labels = np.array([1, 4])
    stream = RngStream(11)
    step = 1e-5

    # inputs whose ±step evaluations switch a ReLU or a pooling winner are drawn again
    for seed in range(8, 40):
        x = np.random.default_rng(seed).normal(size=(2, 9, 128))
        if not crosses_a_kink(model, base, directions, step, x, stream):
            break
    else:
        pytest.fail("no input batch kept every ReLU and pooling window on one side of its kink")

    def f(params):
        _, logits = nn.forward(model.bind(params), x, DropoutMode.TRAIN, stream, np.arange(2), pass_index=0)
        return nn.softmax_cross_entropy(logits, labels)

    report = tu.grad_check(f, dict(model.params), step=step, tol=1e-6, directions=directions)
    assert report.checked == 8
    assert report.passed, report.worst


def test_explicit_directions_match_the_seeded_ones():
    rng = np.random.default_rng(2)
    point = {"w": Tensor(rng.normal(size=(3, 4))), "b": Tensor(rng.normal(size=4))}

    def f(p):
        return tu.reduce_sum(tu.relu(tu.add(p["w"], p["b"])))

    seeded = tu.grad_check(f, point, directions=4, seed=5)
    explicit = tu.grad_check(f, point, directions=tu.unit_directions({k: v.data for k, v in point.items()}, 4, 5))
    assert seeded.max_rel_error == explicit.max_rel_error
    for direction in tu.unit_directions({"w": np.zeros((3, 4)), "b": np.zeros(4)}, 3):
        assert np.sqrt(sum(np.sum(v * v) for v in direction.values())) == pytest.approx(1.0)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Random streams
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_rng_stream_is_a_pure_function_of_its_triple():
    a = RngStream(5).generator(3, 7).random(4)
    b = RngStream(5).generator(3, 7).random(4)
    c = RngStream(5).generator(3, 8).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_derived_streams_are_distinct_and_stable():
    base = RngStream(0)
    assert base.derive("teacher-passes") == RngStream(0).derive("teacher-passes")
    assert base.derive("teacher-passes") != base.derive("student-dropout")


def test_mask_sampler_ignores_batch_order():
    stream = RngStream(1)
    forward = stream.bind([4, 9], 0).bernoulli((5,), 0.5)
    backward = stream.bind([9, 4], 0).bernoulli((5,), 0.5)
    assert np.array_equal(forward, backward[::-1])


def test_rng_stream_rejects_negative_seed():
    with pytest.raises(ConfigError):
        RngStream(-1)
