import math

import numpy as np
import pytest

import nn_utils as nn
import tensor_utils as tu
from nn_utils import DropoutMode
from tensor_utils import CheckpointError, ConfigError, ContractError, DataError, DimensionError, RngStream, Tensor


@pytest.fixture(scope="module")
def har_cnn():
    return nn.build_har_cnn(p=0.2, seed=0)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# HAR 1D-CNN
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_har_cnn_shape_algebra(har_cnn):
    shapes = [shape for _, shape in har_cnn.layer_shapes()]
    assert shapes == [(32, 120), (32, 120), (32, 60), (64, 52), (64, 52), (64, 26), (1664,),
                      (1000,), (1000,), (1000,), (500,), (500,), (6,)]
    assert har_cnn.feature_tap == 11
    assert har_cnn.feature_dim == 500
    assert har_cnn.num_classes == 6
    assert har_cnn.dropout_sites == [9]


def test_har_cnn_parameter_count(har_cnn):
    expected = (32 * 9 * 9 + 32) + (64 * 32 * 9 + 64) + (1664 * 1000 + 1000) + (1000 * 500 + 500) + (500 * 6 + 6)
    assert har_cnn.num_parameters() == expected == 2_189_626


def test_har_cnn_forward_shapes(har_cnn):
    x = np.random.default_rng(0).normal(size=(3, 9, 128))
    features, logits = nn.forward(har_cnn, x)
    assert features.shape == (3, 500)
    assert logits.shape == (3, 6)


def test_zero_input_yields_classifier_bias():
    model = nn.build_har_cnn(p=0.2, seed=1, dtype=np.float64)
    state = model.state_dict()
    state["fc3.bias"] = np.arange(6.0)
    model.load_state_dict(state)
    _, logits = nn.forward(model, np.zeros((2, 9, 128)))
    assert np.array_equal(logits.data, np.tile(np.arange(6.0), (2, 1)))


def test_forward_rejects_wrong_input_shape(har_cnn):
    with pytest.raises(DimensionError, match="9, 128"):
        nn.forward(har_cnn, np.zeros((2, 9, 100)))


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Dropout modes
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_eval_is_deterministic(tiny_mlp):
    x = np.random.default_rng(1).normal(size=(4, 1, 8))
    _, a = nn.forward(tiny_mlp, x, DropoutMode.EVAL)
    _, b = nn.forward(tiny_mlp, x, DropoutMode.EVAL)
    assert np.array_equal(a.data, b.data)


def test_distill_masks_follow_sample_and_pass(tiny_mlp):
    x = np.random.default_rng(2).normal(size=(4, 1, 8))
    stream = RngStream(3)
    ids = np.arange(4)
    f1, _ = nn.forward(tiny_mlp, x, DropoutMode.DISTILL, stream, ids, pass_index=0)
    f2, _ = nn.forward(tiny_mlp, x, DropoutMode.DISTILL, stream, ids, pass_index=0)
    f3, _ = nn.forward(tiny_mlp, x, DropoutMode.DISTILL, stream, ids, pass_index=1)
    assert np.array_equal(f1.data, f2.data)
    assert not np.array_equal(f1.data, f3.data)


def test_distill_without_dropout_equals_eval(tiny_mlp):
    model = tiny_mlp.with_dropout(0.0)
    x = np.random.default_rng(4).normal(size=(4, 1, 8))
    f_eval, l_eval = nn.forward(model, x, DropoutMode.EVAL)
    f_dist, l_dist = nn.forward(model, x, DropoutMode.DISTILL, RngStream(0), np.arange(4), pass_index=5)
    assert np.array_equal(f_eval.data, f_dist.data)
    assert np.array_equal(l_eval.data, l_dist.data)


def test_train_mode_needs_a_stream(tiny_mlp):
    with pytest.raises(ContractError, match="RngStream"):
        nn.forward(tiny_mlp, np.zeros((2, 1, 8)), DropoutMode.TRAIN)


def test_dropout_identity_cases():
    x = Tensor(np.ones((3, 4)))
    assert nn.dropout_apply(x, 0.0, DropoutMode.TRAIN, RngStream(0)) is x
    assert nn.dropout_apply(x, 0.9, DropoutMode.EVAL) is x


def test_dropout_rejects_rate_of_one():
    with pytest.raises(ConfigError, match="p must lie"):
        nn.dropout_apply(Tensor(np.ones((1, 2))), 1.0, DropoutMode.TRAIN, RngStream(0))


@pytest.mark.parametrize("p", [0.1, 0.2, 0.5])
def test_dropout_preserves_expectation(p):
    masks = 120_000
    values = np.array([1.0, -2.0, 0.5, 3.0])
    x = Tensor(np.tile(values, (masks, 1)), dtype=np.float64)
    out = nn.dropout_apply(x, p, DropoutMode.TRAIN, RngStream(17)).data
    assert np.allclose(out.mean(axis=0), values, rtol=0.01)
    kept = (out != 0).mean()
    assert kept == pytest.approx(1 - p, abs=0.005)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Losses
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_cross_entropy_of_uniform_logits():
    logits = Tensor(np.zeros((2, 6)), dtype=np.float64)
    assert nn.softmax_cross_entropy(logits, [0, 5]).item() == pytest.approx(math.log(6))


def test_cross_entropy_of_confident_logits():
    logits = np.zeros((1, 3))
    logits[0, 1] = 100.0
    assert nn.softmax_cross_entropy(Tensor(logits, dtype=np.float64), [1]).item() < 1e-8


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    direct = -np.mean([logits[i, labels[i]] - np.log(np.exp(logits[i]).sum()) for i in range(5)])
    assert nn.softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(direct, rel=1e-12)


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(DataError):
        nn.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_mse_examples():
    a = Tensor(np.array([[0.0, 0.0]]), dtype=np.float64)
    assert nn.mse(a, a).item() == 0.0
    assert nn.mse(a, np.array([[3.0, 4.0]])).item() == pytest.approx(12.5)
    with pytest.raises(DimensionError):
        nn.mse(a, np.zeros((1, 3)))


def test_kl_vanishes_when_target_matches_student():
    logits = np.random.default_rng(6).normal(size=(3, 4))
    target = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert nn.kl_divergence(target, Tensor(logits)).item() == pytest.approx(0.0, abs=1e-12)


def test_predict_proba_rows_sum_to_one(tiny_mlp):
    probs = nn.predict_proba(tiny_mlp, np.random.default_rng(7).normal(size=(10, 1, 8)), batch_size=4)
    assert probs.shape == (10, 3)
    assert np.allclose(probs.sum(axis=1), 1.0)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Model plumbing
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_with_dropout_shares_parameters(tiny_mlp):
    variant = tiny_mlp.with_dropout(0.5)
    assert variant.params["fc1.weight"] is tiny_mlp.params["fc1.weight"]
    assert variant.arch["p"] == 0.5
    assert tiny_mlp.arch["p"] == 0.2


def test_freeze_and_unfreeze(tiny_mlp):
    assert not tiny_mlp.is_frozen()
    assert tiny_mlp.freeze().is_frozen()
    assert not tiny_mlp.unfreeze().is_frozen()


def test_copy_is_independent(tiny_mlp):
    clone = tiny_mlp.copy()
    clone.params["out.bias"].data += 1.0
    assert not np.array_equal(clone.params["out.bias"].data, tiny_mlp.params["out.bias"].data)


def test_bind_and_load_reject_mismatched_parameters(tiny_mlp):
    state = tiny_mlp.state_dict()
    del state["out.bias"]
    with pytest.raises(CheckpointError):
        tiny_mlp.bind(state)
    with pytest.raises(CheckpointError):
        tiny_mlp.load_state_dict(state)
    bad = tiny_mlp.state_dict()
    bad["out.bias"] = np.zeros(7)
    with pytest.raises(CheckpointError, match="out.bias"):
        tiny_mlp.load_state_dict(bad)


def test_build_model_round_trips_the_arch(tiny_mlp):
    rebuilt = nn.build_model(tiny_mlp.arch, seed=0, dtype=np.float64)
    for name, arr in tiny_mlp.state_dict().items():
        assert np.array_equal(rebuilt.params[name].data, arr)


def test_build_mlp_needs_two_hidden_layers():
    with pytest.raises(ConfigError):
        nn.build_mlp((1, 8), hidden=(4,), classes=2)


def test_gradients_only_reach_trainable_parameters(tiny_mlp):
    tiny_mlp.params["out.weight"].requires_grad = False
    tu.reset_tape()
    _, logits = nn.forward(tiny_mlp, np.ones((2, 1, 8)))
    grads = tu.backward(nn.softmax_cross_entropy(logits, [0, 1]))
    assert "out.weight" not in grads
    assert "fc1.weight" in grads
