""" Dense tensors recorded on a reverse-mode tape, the primitives the HAR models need, and the
    seeded random streams that make dropout masks reproducible per (sample, pass). """

import itertools
import logging
import threading
import zlib
from collections.abc import Mapping
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Errors
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
class SSDError(Exception):
    """ Base class of every error raised by this package """


class DimensionError(SSDError):
    pass


class ContractError(SSDError):
    pass


class EmptyGraphError(SSDError):
    pass


class ConfigError(SSDError):
    pass


class DataError(SSDError):
    pass


class CheckpointError(SSDError):
    pass


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Tensor and tape
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
_tensor_ids = itertools.count()
_state = threading.local()


def _as_array(data, dtype):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """ A dense array plus the bookkeeping the tape needs. Leaves carry an optional name,
        which is the key they get in the gradient map returned by backward(). """

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None
        self.tape_id = None
        self._tape = None
        self.id = next(_tensor_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._tape is None

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return detach(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """ Ordered record of primitive operations. One backward pass consumes it. """

    _ids = itertools.count(1)

    def __init__(self):
        self.id = next(Tape._ids)
        self.entries = []
        self.consumed = False

    def __len__(self):
        return len(self.entries)

    def record(self, op, inputs, output, backward_fn):
        if self.consumed:
            raise ContractError(f"tape {self.id} was already consumed by backward()")
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward_fn))
        output._tape = self
        output.tape_id = self.id


def current_tape():
    """ The tape of the calling thread; a fresh one is started once the previous one is consumed """
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def reset_tape():
    """ Drop whatever the calling thread recorded so far and start a new tape """
    _state.tape = Tape()
    return _state.tape


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _wrap(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(op, data, inputs, backward_fn):
    needs_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if needs_grad:
        current_tape().record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """ Sum a broadcast gradient back down to the operand's shape """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Elementwise primitives
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def add(a, b):
    a = _wrap(a, b) if not isinstance(a, Tensor) else a
    b = _wrap(b, a)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), _backward)


def sub(a, b):
    a = _wrap(a, b) if not isinstance(a, Tensor) else a
    b = _wrap(b, a)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), _backward)


def mul(a, b):
    a = _wrap(a, b) if not isinstance(a, Tensor) else a
    b = _wrap(b, a)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), _backward)


def div(a, b):
    a = _wrap(a, b) if not isinstance(a, Tensor) else a
    b = _wrap(b, a)

    def _backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result("div", a.data / b.data, (a, b), _backward)


def neg(a):
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    exponent = float(exponent)

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result("power", a.data ** exponent, (a,), _backward)


def exp(a):
    out_data = np.exp(a.data)
    return _result("exp", out_data, (a,), lambda g: (g * out_data,))


def log(a):
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def detach(a):
    return Tensor(a.data, requires_grad=False)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Reductions and reshaping
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def reduce_sum(a, axis=None, keepdims=False):
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _backward)


def reduce_mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a, shape):
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Linear algebra and convolution
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def matmul(a, b):
    """ Matrix product of an m×k and a k×n tensor """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul expects m×k and k×n operands, got {a.shape} and {b.shape}")

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), _backward)


def einsum(subscripts, a, b):
    """ Two-operand einsum. Every index of an operand must appear in the output or in the
        other operand, which is what makes the transposed contractions below valid. """
    inputs, out_spec = subscripts.replace(" ", "").split("->")
    a_spec, b_spec = inputs.split(",")
    for spec, other in ((a_spec, b_spec), (b_spec, a_spec)):
        if any(ch not in out_spec and ch not in other for ch in spec):
            raise DimensionError(f"einsum {subscripts!r}: summed-out index appears in only one operand")
    try:
        out_data = np.einsum(subscripts, a.data, b.data)
    except ValueError as err:
        raise DimensionError(f"einsum {subscripts!r} cannot combine {a.shape} and {b.shape}") from err

    def _backward(g):
        grad_a = np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.data) if a.requires_grad else None
        grad_b = np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, a.data) if b.requires_grad else None
        return grad_a, grad_b

    return _result("einsum", out_data, (a, b), _backward)


def conv1d(x, kernels, bias=None):
    """ Valid cross-correlation with stride 1 (no kernel flip, no padding).
        x is C_in×L or B×C_in×L, kernels C_out×C_in×K; output length is L−K+1. """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or kernels.ndim != 3 or xd.shape[1] != kernels.shape[1]:
        raise DimensionError(f"conv1d cannot apply kernels {kernels.shape} to input {x.shape}")
    length, width = xd.shape[2], kernels.shape[2]
    if length < width:
        raise DimensionError(f"conv1d input length {length} is shorter than kernel width {width} "
                             f"(input {x.shape}, kernels {kernels.shape})")

    windows = sliding_window_view(xd, width, axis=2)  # B, C_in, L_out, K
    out = np.tensordot(windows, kernels.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out[0] if unbatched else out)
    out_len = length - width + 1

    def _backward(g):
        gb = g[None] if unbatched else g
        grad_kernels = np.tensordot(gb, windows, axes=([0, 2], [0, 2])) if kernels.requires_grad else None
        grad_x = None
        if x.requires_grad:
            grad_windows = np.tensordot(gb, kernels.data, axes=([1], [0]))  # B, L_out, C_in, K
            grad_x = np.zeros_like(xd)
            for k in range(width):
                grad_x[:, :, k:k + out_len] += grad_windows[:, :, :, k].transpose(0, 2, 1)
            if unbatched:
                grad_x = grad_x[0]
        grads = (grad_x, grad_kernels)
        if bias is not None:
            grads += (gb.sum(axis=(0, 2)),)
        return grads

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _result("conv1d", out, inputs, _backward)


def max_pool1d(x, kernel=2, stride=None):
    """ Max pooling over the last axis; the gradient goes to the first maximal element of each window """
    stride = stride or kernel
    if x.shape[-1] < kernel:
        raise DimensionError(f"max_pool1d kernel {kernel} exceeds input length {x.shape[-1]}")
    windows = sliding_window_view(x.data, kernel, axis=-1)[..., ::stride, :]
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]
    out_len = out.shape[-1]

    def _backward(g):
        grad = np.zeros_like(x.data)
        for j in range(kernel):
            grad[..., j:j + stride * (out_len - 1) + 1:stride] += g * (winner == j)
        return (grad,)

    return _result("max_pool1d", np.ascontiguousarray(out), (x,), _backward)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Normalized exponentials
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (a,), _backward)


def log_softmax(a, axis=-1):
    out = (a.data - logsumexp(a.data, axis=axis, keepdims=True)).astype(a.dtype)

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (a,), _backward)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Backward pass
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def backward(loss):
    """ Replays the loss's tape in reverse recording order and returns {leaf name: gradient}.
        Every requires_grad leaf seen on the tape gets a .grad of its own shape (zeros when the
        loss does not depend on it). The tape is consumed. """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not loss.requires_grad:
        raise EmptyGraphError("loss is not connected to any recorded operation")
    if tape.consumed:
        raise ContractError(f"tape {tape.id} was already consumed by backward()")

    grads = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    for entry in reversed(tape.entries):
        for inp in entry.inputs:
            if inp.requires_grad and inp._tape is None:
                leaves[inp.id] = inp
        g = grads.pop(entry.output.id, None)
        if g is None:
            continue
        for inp, grad in zip(entry.inputs, entry.backward(g)):
            if grad is None or not inp.requires_grad:
                continue
            grads[inp.id] = grads[inp.id] + grad if inp.id in grads else grad
    tape.consumed = True

    named = {}
    for leaf_id, leaf in leaves.items():
        grad = grads.get(leaf_id)
        grad = np.zeros_like(leaf.data) if grad is None else np.ascontiguousarray(grad, dtype=leaf.dtype)
        leaf.grad = Tensor(grad.reshape(leaf.shape))
        if leaf.name is None:
            continue
        if leaf.name in named:
            raise ContractError(f"two trainable leaves share the name {leaf.name!r}")
        named[leaf.name] = leaf.grad
    return named


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Finite-difference gradient check
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: str

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def unit_directions(point, k, seed=0):
    """ k random directions over every coordinate of a {name: array} point, each of unit norm overall """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(k):
        direction = {name: rng.standard_normal(np.shape(arr)) for name, arr in point.items()}
        norm = np.sqrt(np.sum([np.sum(v * v) for v in direction.values()]))
        out.append({name: v / norm for name, v in direction.items()})
    return out


def grad_check(f, point, step=1e-4, tol=1e-6, coords=None, directions=None, seed=0, floor=1e-3):
    """ Compares backward() against central differences (f(x+h)−f(x−h))/2h.

        point is a Tensor or a {name: Tensor} mapping; f receives the same structure.
        coords=None checks every coordinate, an int samples that many; directions=k instead checks
        k random unit directions over all coordinates at once, which is what makes networks with
        millions of parameters checkable; a list from unit_directions (keyed "x" for a single Tensor)
        fixes the directions instead. Relative error is |a−n| / max(|a|, |n|, floor). """
    single = not isinstance(point, Mapping)
    base = {"x": point} if single else dict(point)
    base = {name: np.array(t.data, copy=True) for name, t in base.items()}

    def call(arrays, requires_grad):
        leaves = {name: Tensor(arr, requires_grad=requires_grad, name=name) for name, arr in arrays.items()}
        return f(leaves["x"] if single else leaves)

    reset_tape()
    grads = backward(call(base, True))
    analytic = {name: (grads[name].data if name in grads else np.zeros_like(arr)) for name, arr in base.items()}

    def numeric_value(arrays):
        with no_grad():
            return float(np.asarray(call(arrays, False).data).sum())

    rng = np.random.default_rng(seed)
    worst_err, worst_where, checked = 0.0, "", 0

    if directions:
        if isinstance(directions, int):
            directions = unit_directions(base, directions, seed)
        for k, direction in enumerate(directions):
            plus = {name: base[name] + step * direction[name] for name in base}
            minus = {name: base[name] - step * direction[name] for name in base}
            numeric = (numeric_value(plus) - numeric_value(minus)) / (2 * step)
            exact = float(np.sum([np.sum(analytic[name] * direction[name]) for name in base]))
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            checked += 1
            if err >= worst_err:
                worst_err, worst_where = err, f"direction {k}: analytic={exact:.6g} numeric={numeric:.6g}"
    else:
        locations = [(name, i) for name, arr in base.items() for i in range(arr.size)]
        if coords is not None and coords < len(locations):
            picks = rng.choice(len(locations), size=coords, replace=False)
            locations = [locations[i] for i in sorted(picks)]
        for name, i in locations:
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name].flat[i] += step
            minus[name].flat[i] -= step
            numeric = (numeric_value(plus) - numeric_value(minus)) / (2 * step)
            exact = float(analytic[name].flat[i])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            checked += 1
            if err >= worst_err:
                worst_err, worst_where = err, f"{name}[{i}]: analytic={exact:.6g} numeric={numeric:.6g}"

    report = GradCheckReport(worst_err, tol, checked, worst_where)
    logger.debug("grad_check: %d checks, max relative error %.3g (%s)", checked, worst_err, worst_where)
    return report


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Random streams
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass(frozen=True)
class RngStream:
    """ Masks and noise are a pure function of (base_seed, sample_index, pass_index), so the
        schedule in which passes run never changes the numbers they see. """

    base_seed: int

    def __post_init__(self):
        if not 0 <= int(self.base_seed) < 2 ** 64:
            raise ConfigError(f"base_seed must be a 64-bit unsigned integer, got {self.base_seed}")

    def generator(self, sample_index, pass_index):
        return np.random.default_rng(np.random.SeedSequence([int(self.base_seed), int(sample_index), int(pass_index)]))

    def derive(self, tag):
        """ An independent child stream, e.g. one for teacher passes and one for student dropout """
        if isinstance(tag, str):
            tag = zlib.crc32(tag.encode("utf-8"))
        words = np.random.SeedSequence([int(self.base_seed), 0x55D7, int(tag)]).generate_state(2, np.uint32)
        return RngStream((int(words[0]) << 32) | int(words[1]))

    def bind(self, sample_ids, pass_index):
        return MaskSampler(self, sample_ids, pass_index)


class MaskSampler:
    """ Per-sample generators for one forward pass; dropout sites draw from them in layer order """

    def __init__(self, stream, sample_ids, pass_index):
        self.pass_index = int(pass_index)
        self._generators = [stream.generator(s, pass_index) for s in np.asarray(sample_ids).ravel()]

    def __len__(self):
        return len(self._generators)

    def bernoulli(self, shape, keep_prob, dtype=DEFAULT_DTYPE):
        return np.stack([gen.random(shape) < keep_prob for gen in self._generators]).astype(dtype)
