""" Layers, model builders and losses for the HAR 1D-CNN and the small MLPs used on synthetic data """

import copy
import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.special import softmax as np_softmax
from scipy.special import xlogy

import tensor_utils as tu
from tensor_utils import CheckpointError, ConfigError, ContractError, DataError, DimensionError, Tensor

logger = logging.getLogger(__name__)


class DropoutMode(Enum):
    TRAIN = "train"
    EVAL = "eval"
    # parameters behave as in evaluation, dropout layers keep sampling masks
    DISTILL = "distill"


def _check_rate(p, field="p"):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"{field} must lie in [0, 1), got {p}")


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Layers
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Shapes below are per sample (no batch axis).
@dataclass(frozen=True)
class Conv1d:
    name: str
    in_channels: int
    out_channels: int
    kernel: int

    def param_shapes(self):
        return {f"{self.name}.weight": (self.out_channels, self.in_channels, self.kernel),
                f"{self.name}.bias": (self.out_channels,)}

    def fan_in(self):
        return self.in_channels * self.kernel

    def output_shape(self, shape):
        channels, length = shape
        if channels != self.in_channels or length < self.kernel:
            raise DimensionError(f"{self.name} expects ({self.in_channels}, ≥{self.kernel}), got {shape}")
        return self.out_channels, length - self.kernel + 1

    def macs(self, shape):
        _, out_len = self.output_shape(shape)
        return self.out_channels * self.in_channels * self.kernel * out_len

    def apply(self, x, params, ctx):
        return tu.conv1d(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"])


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int

    def param_shapes(self):
        return {f"{self.name}.weight": (self.in_features, self.out_features),
                f"{self.name}.bias": (self.out_features,)}

    def fan_in(self):
        return self.in_features

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise DimensionError(f"{self.name} expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def macs(self, shape):
        return self.in_features * self.out_features

    def apply(self, x, params, ctx):
        return tu.add(tu.matmul(x, params[f"{self.name}.weight"]), params[f"{self.name}.bias"])


@dataclass(frozen=True)
class ReLU:
    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        return tuple(shape)

    def macs(self, shape):
        return 0

    def apply(self, x, params, ctx):
        return tu.relu(x)


@dataclass(frozen=True)
class MaxPool1d:
    kernel: int = 2
    stride: int = 2

    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        channels, length = shape
        return channels, (length - self.kernel) // self.stride + 1

    def macs(self, shape):
        return 0

    def apply(self, x, params, ctx):
        return tu.max_pool1d(x, self.kernel, self.stride)


@dataclass(frozen=True)
class Flatten:
    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def macs(self, shape):
        return 0

    def apply(self, x, params, ctx):
        return tu.reshape(x, (x.shape[0], -1))


@dataclass(frozen=True)
class Dropout:
    p: float

    def param_shapes(self):
        return {}

    def output_shape(self, shape):
        return tuple(shape)

    def macs(self, shape):
        return 0

    def apply(self, x, params, ctx):
        return dropout_apply(x, self.p, ctx.mode, ctx.sampler)


@dataclass
class _ForwardContext:
    mode: DropoutMode
    sampler: object = None


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Model
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
class Model:
    """ Ordered layers over a dict of named parameter tensors. The layers only hold parameter
        names, so bind() can swap in a different parameter set without touching the graph. """

    def __init__(self, layers, params, feature_tap, input_shape, arch):
        self.layers = list(layers)
        self.params = dict(params)
        self.feature_tap = feature_tap
        self.input_shape = tuple(input_shape)
        self.arch = dict(arch)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def dropout_sites(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Dropout)]

    @property
    def feature_dim(self):
        return self.layer_shapes()[self.feature_tap][1][0]

    @property
    def num_classes(self):
        return self.layer_shapes()[-1][1][0]

    def layer_shapes(self, input_shape=None):
        """ [(layer, per-sample output shape)] for every layer """
        shape = tuple(input_shape or self.input_shape)
        shapes = []
        for layer in self.layers:
            shape = tuple(layer.output_shape(shape))
            shapes.append((layer, shape))
        return shapes

    def num_parameters(self):
        return int(sum(t.size for t in self.params.values()))

    def is_frozen(self):
        return not any(t.requires_grad for t in self.params.values())

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
        return self

    def unfreeze(self):
        for t in self.params.values():
            t.requires_grad = True
        return self

    def bind(self, params):
        """ Same layers, different parameters (Tensors or arrays keyed by name) """
        bound = {}
        for name, value in params.items():
            bound[name] = value if isinstance(value, Tensor) else Tensor(value, name=name)
        if bound.keys() != self.params.keys():
            raise CheckpointError(f"parameter names differ: {sorted(set(bound) ^ set(self.params))}")
        return Model(self.layers, bound, self.feature_tap, self.input_shape, self.arch)

    def with_dropout(self, p):
        """ Same parameters, every dropout layer set to rate p """
        _check_rate(p)
        layers = [replace(layer, p=p) if isinstance(layer, Dropout) else layer for layer in self.layers]
        return Model(layers, self.params, self.feature_tap, self.input_shape, {**self.arch, "p": p})

    def copy(self):
        params = {name: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
                  for name, t in self.params.items()}
        return Model(self.layers, params, self.feature_tap, self.input_shape, copy.deepcopy(self.arch))

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state):
        if list(state.keys()) != list(self.params.keys()):
            raise CheckpointError(f"checkpoint parameters {list(state)[:4]}... do not match model "
                                  f"parameters {list(self.params)[:4]}...")
        for name, arr in state.items():
            if tuple(arr.shape) != self.params[name].shape:
                raise CheckpointError(f"{name}: checkpoint shape {tuple(arr.shape)} != model shape "
                                      f"{self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=self.params[name].dtype, copy=True)
        return self


def _init_params(layers, input_shape, seed, dtype):
    """ Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases """
    rng = np.random.default_rng(seed)
    params = {}
    shape = tuple(input_shape)
    for layer in layers:
        for name, pshape in layer.param_shapes().items():
            if name.endswith(".weight"):
                bound = np.sqrt(6.0 / layer.fan_in())
                data = rng.uniform(-bound, bound, size=pshape)
            else:
                data = np.zeros(pshape)
            params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
        shape = layer.output_shape(shape)
    return params


def build_har_cnn(p=0.2, classes=6, channels=9, length=128, seed=0, dtype=tu.DEFAULT_DTYPE):
    """ Two conv blocks and three fully connected layers; the single dropout sits after FC1's ReLU
        and the 500-d feature tap after FC2's ReLU """
    _check_rate(p)
    conv_layers = [Conv1d("conv1", channels, 32, 9), ReLU(), MaxPool1d(2, 2),
                   Conv1d("conv2", 32, 64, 9), ReLU(), MaxPool1d(2, 2), Flatten()]
    shape = (channels, length)
    for layer in conv_layers:
        shape = layer.output_shape(shape)
    flat = shape[0]
    layers = conv_layers + [Linear("fc1", flat, 1000), ReLU(), Dropout(p),
                            Linear("fc2", 1000, 500), ReLU(),
                            Linear("fc3", 500, classes)]
    arch = {"kind": "har_cnn", "p": p, "classes": classes, "channels": channels, "length": length}
    params = _init_params(layers, (channels, length), seed, dtype)
    return Model(layers, params, feature_tap=len(layers) - 2, input_shape=(channels, length), arch=arch)


def build_mlp(input_shape, hidden=(128, 64), classes=2, p=0.2, seed=0, dtype=tu.DEFAULT_DTYPE):
    """ Flatten → hidden Linear/ReLU blocks → classifier. Dropout follows the first hidden ReLU,
        the feature tap is the last hidden ReLU, so at least two hidden layers are needed. """
    _check_rate(p)
    hidden = list(hidden)
    if len(hidden) < 2:
        raise ConfigError(f"build_mlp needs at least two hidden layers, got {hidden}")
    in_features = int(np.prod(input_shape))
    layers = [Flatten()]
    widths = [in_features] + hidden
    for i in range(len(hidden)):
        layers += [Linear(f"fc{i + 1}", widths[i], widths[i + 1]), ReLU()]
        if i == 0:
            layers.append(Dropout(p))
    feature_tap = len(layers) - 1
    layers.append(Linear("out", hidden[-1], classes))
    arch = {"kind": "mlp", "p": p, "classes": classes, "input_shape": list(input_shape), "hidden": hidden}
    params = _init_params(layers, input_shape, seed, dtype)
    return Model(layers, params, feature_tap=feature_tap, input_shape=input_shape, arch=arch)


def build_model(arch, seed=0, dtype=tu.DEFAULT_DTYPE):
    """ Rebuilds a model from its arch description (as stored in manifests) """
    kind = arch.get("kind")
    if kind == "har_cnn":
        return build_har_cnn(arch["p"], arch["classes"], arch["channels"], arch["length"], seed, dtype)
    if kind == "mlp":
        return build_mlp(tuple(arch["input_shape"]), arch["hidden"], arch["classes"], arch["p"], seed, dtype)
    raise ConfigError(f"unknown model kind {kind!r}")


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Forward pass
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def _as_batch(model, batch):
    if isinstance(batch, Tensor):
        return batch
    return Tensor(np.asarray(batch, dtype=model.dtype))


def run_layers(model, x, mode, rng=None, sample_ids=None, pass_index=0, start=0, stop=None):
    """ Runs layers[start:stop] and returns (activation, features or None) """
    stop = len(model.layers) if stop is None else stop
    needs_masks = mode is not DropoutMode.EVAL and any(
        isinstance(layer, Dropout) and layer.p > 0 for layer in model.layers[start:stop])
    sampler = None
    if needs_masks:
        if rng is None:
            raise ContractError(f"{mode.value} mode samples dropout masks and needs an RngStream")
        if isinstance(rng, tu.MaskSampler):
            sampler = rng
        else:
            ids = np.arange(x.shape[0]) if sample_ids is None else sample_ids
            sampler = rng.bind(ids, pass_index)
    ctx = _ForwardContext(mode, sampler)

    features = None
    for i in range(start, stop):
        x = model.layers[i].apply(x, model.params, ctx)
        if i == model.feature_tap:
            features = x
    return x, features


def forward(model, batch, mode=DropoutMode.EVAL, rng=None, sample_ids=None, pass_index=0):
    """ Returns (features at the tap, logits) for a B×C×L batch """
    x = _as_batch(model, batch)
    if tuple(x.shape[1:]) != model.input_shape:
        raise DimensionError(f"model expects samples of shape {model.input_shape}, got batch {x.shape}")
    logits, features = run_layers(model, x, mode, rng, sample_ids, pass_index)
    return features, logits


def dropout_apply(x, p, mode, rng=None):
    """ Inverted dropout: x·mask/(1−p) with mask ~ Bernoulli(1−p); identity in Eval mode """
    _check_rate(p)
    if mode is DropoutMode.EVAL or p == 0:
        return x
    if rng is None:
        raise ContractError(f"{mode.value} mode samples dropout masks and needs an RngStream")
    sampler = rng if isinstance(rng, tu.MaskSampler) else rng.bind(np.arange(x.shape[0]), 0)
    mask = sampler.bernoulli(x.shape[1:], 1.0 - p, x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return tu.mul(x, Tensor(mask))


def predict_proba(model, samples, batch_size=512):
    """ Eval-mode softmax probabilities, batched, without recording anything """
    out = []
    with tu.no_grad():
        for start in range(0, len(samples), batch_size):
            _, logits = forward(model, samples[start:start + batch_size], DropoutMode.EVAL)
            out.append(np_softmax(logits.data.astype(np.float64), axis=1))
    if not out:
        return np.zeros((0, model.num_classes))
    return np.concatenate(out)


def predict(model, samples, batch_size=512):
    return predict_proba(model, samples, batch_size).argmax(axis=1)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Losses
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def softmax_cross_entropy(logits, labels):
    """ Mean negative log-softmax of the true class """
    labels = np.asarray(labels)
    classes = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels of shape {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    picked = tu.reduce_sum(tu.mul(tu.log_softmax(logits, axis=1), Tensor(onehot)), axis=1)
    return tu.neg(tu.reduce_mean(picked))


def mse(a, b):
    """ Mean of squared differences over every component """
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise DimensionError(f"mse needs equal shapes, got {a.shape} and {b.shape}")
    return tu.reduce_mean(tu.power(tu.sub(a, b), 2))


def kl_divergence(target_probs, logits):
    """ KL(target ‖ softmax(logits)) averaged over the batch, temperature 1 """
    target_probs = np.asarray(target_probs, dtype=logits.dtype)
    if target_probs.shape != logits.shape:
        raise DimensionError(f"target {target_probs.shape} does not match logits {logits.shape}")
    batch = logits.shape[0]
    entropy_term = float(xlogy(target_probs, target_probs).sum()) / batch
    cross = tu.reduce_sum(tu.mul(tu.log_softmax(logits, axis=1), Tensor(target_probs))) * (1.0 / batch)
    return tu.sub(Tensor(np.asarray(entropy_term, dtype=logits.dtype)), cross)
