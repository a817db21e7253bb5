""" Optimization loops, schedulers, the checkpoint archive and FLOP accounting """

import logging
import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

import baseline_utils as bu
import data_utils as du
import model_params as mp
import nn_utils as nn
import ssd_utils as ssd
import stats_utils as su
import tensor_utils as tu
from nn_utils import DropoutMode
from tensor_utils import CheckpointError, ConfigError, RngStream, SSDError

logger = logging.getLogger(__name__)

TEACHER_TRAIN_STREAM = "teacher-dropout"
SHUFFLE_STREAM = "shuffle"


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TrainingDivergedError(SSDError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"loss became {loss} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Optimizers
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class OptimizerConfig:
    kind: str = mp.OPTIMIZER
    lr: float = mp.TEACHER_LR
    weight_decay: float = mp.WEIGHT_DECAY
    momentum: float = mp.SGD_MOMENTUM
    betas: tuple = mp.ADAM_BETAS
    eps: float = mp.ADAM_EPS

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer.kind must be 'adam' or 'sgd', got {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"optimizer.lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"optimizer.weight_decay must be non-negative, got {self.weight_decay}")
        self.betas = tuple(self.betas)

    def scaled(self, factor):
        return OptimizerConfig(**{**asdict(self), "lr": self.lr * factor})


class Sgd:
    """ SGD with momentum: v ← μv + g, θ ← θ − lr·v """

    def __init__(self, params, cfg):
        self.params = params
        self.lr = cfg.lr
        self.momentum = cfg.momentum
        self.weight_decay = cfg.weight_decay
        self.velocity = {}

    def step(self, grads):
        for name, grad in grads.items():
            param = self.params[name]
            g = grad.data + self.weight_decay * param.data if self.weight_decay else grad.data
            if self.momentum:
                v = self.velocity.get(name)
                g = g if v is None else self.momentum * v + g
                self.velocity[name] = g
            param.data = (param.data - self.lr * g).astype(param.dtype)


class Adam:
    """ Bias-corrected Adam; weight decay is added to the gradient """

    def __init__(self, params, cfg):
        self.params = params
        self.lr = cfg.lr
        self.beta1, self.beta2 = cfg.betas
        self.eps = cfg.eps
        self.weight_decay = cfg.weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, grad in grads.items():
            param = self.params[name]
            g = grad.data + self.weight_decay * param.data if self.weight_decay else grad.data
            m = self.beta1 * self.m.get(name, 0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            param.data = (param.data - update).astype(param.dtype)


def make_optimizer(cfg, params):
    return Adam(params, cfg) if cfg.kind == "adam" else Sgd(params, cfg)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Schedulers and early stopping
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
_MAXIMIZED = {"val_accuracy"}
_MONITORS = {"train_loss", "val_loss", "val_accuracy"}


@dataclass
class SchedulerConfig:
    kind: str = "plateau"
    patience: int = mp.PLATEAU_PATIENCE
    factor: float = mp.PLATEAU_FACTOR
    monitor: str = mp.PLATEAU_MONITOR
    t_max: int = mp.TEACHER_EPOCHS
    min_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in ("plateau", "cosine", "none"):
            raise ConfigError(f"scheduler.kind must be plateau, cosine or none, got {self.kind!r}")
        if not 0 < self.factor < 1:
            raise ConfigError(f"scheduler.factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"scheduler.patience must be at least 1, got {self.patience}")
        if self.monitor not in _MONITORS:
            raise ConfigError(f"scheduler.monitor must be one of {sorted(_MONITORS)}, got {self.monitor!r}")
        if self.t_max < 1:
            raise ConfigError(f"scheduler.t_max must be at least 1, got {self.t_max}")


class _Improvement:
    """ Tracks the best value of a monitored metric and the epochs since it last improved """

    def __init__(self, monitor):
        self.monitor = monitor
        self.sign = -1.0 if monitor in _MAXIMIZED else 1.0
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, metrics):
        value = self.sign * metrics[self.monitor]
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False


class ReduceOnPlateau:
    def __init__(self, optimizer, cfg):
        self.optimizer = optimizer
        self.factor = cfg.factor
        self.patience = cfg.patience
        self.tracker = _Improvement(cfg.monitor)

    def step(self, epoch, metrics):
        self.tracker.update(metrics)
        if self.tracker.bad_epochs > self.patience:
            self.optimizer.lr *= self.factor
            self.tracker.bad_epochs = 0
            logger.info("epoch %d: %s plateaued, lr reduced to %.3g", epoch, self.tracker.monitor, self.optimizer.lr)


class CosineAnneal:
    def __init__(self, optimizer, cfg):
        self.optimizer = optimizer
        self.base_lr = optimizer.lr
        self.min_lr = cfg.min_lr
        self.t_max = cfg.t_max

    def step(self, epoch, metrics):
        t = min(epoch + 1, self.t_max)
        self.optimizer.lr = self.min_lr + (self.base_lr - self.min_lr) * (1 + math.cos(math.pi * t / self.t_max)) / 2


class ConstantLr:
    def __init__(self, optimizer, cfg):
        self.optimizer = optimizer

    def step(self, epoch, metrics):
        pass


def make_scheduler(cfg, optimizer):
    cfg = cfg or SchedulerConfig(kind="none")
    return {"plateau": ReduceOnPlateau, "cosine": CosineAnneal, "none": ConstantLr}[cfg.kind](optimizer, cfg)


@dataclass
class EarlyStopConfig:
    """ Stops after `patience` epochs without a `monitor` improvement. While enabled, the epoch restored
        at the end is the best by `monitor` too, not by validation accuracy. """

    enabled: bool = False
    patience: int = mp.EARLY_STOP_PATIENCE
    monitor: str = "val_loss"

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"early_stop.patience must be at least 1, got {self.patience}")
        if self.monitor not in _MONITORS:
            raise ConfigError(f"early_stop.monitor must be one of {sorted(_MONITORS)}, got {self.monitor!r}")


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Checkpoint archive
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
MAGIC = b"SSDT"
FORMAT_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def encode_checkpoint(state):
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: dtype {arr.dtype} cannot be archived")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<I", code))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, buf, source):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, size):
        if self.pos + size > len(self.buf):
            raise CheckpointError(f"{self.source}: archive truncated at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf, source="<bytes>"):
    reader = _Reader(buf, source)
    if len(buf) < len(MAGIC) or reader.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{source}: not a checkpoint archive (bad magic bytes)")
    version, count = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{source}: format version {version}, this build reads {FORMAT_VERSION}")
    state = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}Q")
        (code,) = reader.unpack("<I")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{source}: {name} has unknown dtype code {code}")
        dtype = DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(reader.take(size), dtype=dtype).reshape(dims)
        state[name] = data.astype(dtype.newbyteorder("="), copy=True)
    if reader.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - reader.pos} trailing bytes after {count} tensors")
    return state


def save_checkpoint(path, state):
    """ Writes the archive atomically (temp file in the same directory, then rename) """
    if isinstance(state, nn.Model):
        state = state.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(state)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("saved %d tensors to %s", len(state), path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


def load_model(path, arch):
    """ Builds the architecture and loads the archive into it (parameters left trainable) """
    state = load_checkpoint(path)
    dtype = next(iter(state.values())).dtype if state else tu.DEFAULT_DTYPE
    return nn.build_model(arch, dtype=dtype).load_state_dict(state)


def load_ensemble(manifest_path, arch):
    spec = bu.load_ensemble_manifest(manifest_path)
    members = [load_model(p, arch).freeze() for p in spec.members]
    return bu.Ensemble(members, spec.rule)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Evaluation
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def evaluate(model, dataset, batch_size=512):
    """ Accuracy, macro/weighted F1 and confusion matrix of a model or an ensemble (Eval mode) """
    if isinstance(model, bu.Ensemble):
        predictions = bu.ensemble_predict(model, dataset.samples, batch_size)
    else:
        predictions = nn.predict(model, dataset.samples, batch_size)
    return su.compute_metrics(dataset.labels, predictions, dataset.class_count)


def validation_metrics(model, dataset, batch_size=512):
    """ (mean cross-entropy, accuracy) in Eval mode; nan for an empty split """
    if len(dataset) == 0:
        return float("nan"), float("nan")
    probs = nn.predict_proba(model, dataset.samples, batch_size)
    picked = probs[np.arange(len(dataset)), dataset.labels]
    loss = float(-np.log(np.maximum(picked, np.finfo(np.float64).tiny)).mean())
    return loss, su.accuracy(dataset.labels, probs.argmax(axis=1))


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Training loop
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def _shuffle_seed(seed, epoch):
    return RngStream(seed).derive(SHUFFLE_STREAM).derive(epoch).base_seed


def _best_score(row, has_val, monitor=None):
    # the early-stopping monitor when its split exists, else best-by-validation, else lowest training loss
    if monitor is not None and (has_val or monitor == "train_loss"):
        return row[monitor] if monitor in _MAXIMIZED else -row[monitor]
    return row["val_accuracy"] if has_val else -row["train_loss"]


def run_epochs(model, splits, step_fn, opt, sched=None, epochs=mp.TEACHER_EPOCHS, early_stop=None,
               batch_size=mp.BATCH_SIZE, seed=0, swa=None, progress=False, label="train"):
    """ Shared loop: step_fn(x, y, ids, epoch) -> (loss, grads, extras dict). Restores the best
        epoch's parameters at the end and returns the per-epoch history. """
    optimizer = make_optimizer(opt, model.params)
    scheduler = make_scheduler(sched, optimizer)
    stopper = _Improvement(early_stop.monitor) if early_stop and early_stop.enabled else None
    monitor = early_stop.monitor if stopper is not None else None
    has_val = len(splits.val) > 0
    best_state, best_score = model.state_dict(), -math.inf
    rows, step = [], 0

    for epoch in tqdm(range(epochs), desc=label, disable=not progress):
        totals = {}
        seen = 0
        for ids, x, y in du.iterate_batches(splits.train, batch_size, _shuffle_seed(seed, epoch)):
            loss, grads, extras = step_fn(x, y, ids, epoch)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, step, value)
            optimizer.step(grads)
            for key, v in {"train_loss": value, **extras}.items():
                totals[key] = totals.get(key, 0.0) + v * len(ids)
            seen += len(ids)
            step += 1

        val_loss, val_accuracy = validation_metrics(model, splits.val)
        row = {"epoch": epoch, **{k: v / max(seen, 1) for k, v in totals.items()},
               "val_loss": val_loss, "val_accuracy": val_accuracy, "lr": optimizer.lr}
        rows.append(row)
        logger.info("%s epoch %d: loss %.4f val_loss %.4f val_acc %.4f lr %.3g", label, epoch,
                    row["train_loss"], val_loss, val_accuracy, optimizer.lr)
        score = _best_score(row, has_val, monitor)
        if score > best_score:
            best_state, best_score = model.state_dict(), score
        scheduler.step(epoch, row)
        if swa is not None:
            swa.update(model, epoch)
        if stopper is not None:
            stopper.update(row)
            if stopper.bad_epochs >= early_stop.patience:
                logger.info("%s: no %s improvement for %d epochs, stopping at epoch %d", label,
                            early_stop.monitor, early_stop.patience, epoch)
                break

    model.load_state_dict(best_state)
    columns = ["epoch", "train_loss", "val_loss", "val_accuracy", "lr"]
    history = pd.DataFrame.from_records(rows, columns=None if rows else columns)
    return best_state, history


def task_step(model, stream, pass_of_epoch=lambda epoch: epoch):
    """ Cross-entropy step with Train-mode dropout drawn from stream """

    def step_fn(x, y, ids, epoch):
        tu.reset_tape()
        _, logits = nn.forward(model, x, DropoutMode.TRAIN, stream, ids, pass_index=pass_of_epoch(epoch))
        loss = nn.softmax_cross_entropy(logits, y)
        return loss, tu.backward(loss), {}

    return step_fn


def train_teacher(model, splits, opt=None, sched=None, epochs=mp.TEACHER_EPOCHS, early_stop=None,
                  batch_size=mp.BATCH_SIZE, seed=0, swa=None, progress=False, checkpoint_path=None):
    """ Plain supervised training; returns (best state, history) and writes the best state
        to checkpoint_path when given """
    opt = opt or OptimizerConfig()
    model.unfreeze()
    stream = RngStream(seed).derive(TEACHER_TRAIN_STREAM)
    state, history = run_epochs(model, splits, task_step(model, stream), opt, sched, epochs, early_stop,
                                batch_size, seed, swa, progress, label="teacher")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state, history


def train_member(seed, arch, splits, opt=None, sched=None, epochs=mp.TEACHER_EPOCHS, batch_size=mp.BATCH_SIZE,
                 progress=False, checkpoint_path=None):
    """ From-scratch ensemble member: the seed drives both initialization and shuffling """
    model = nn.build_model(arch, seed=seed)
    state, history = train_teacher(model, splits, opt, sched, epochs, None, batch_size, seed,
                                   progress=progress, checkpoint_path=checkpoint_path)
    return model, history


def init_student_from_teacher(teacher, from_teacher=True, seed=0):
    """ A trainable copy of the teacher's parameters, or a fresh initialization of the same
        architecture when from_teacher is off. teacher may be a Model or (state dict, arch). """
    if isinstance(teacher, nn.Model):
        state, arch, dtype = teacher.state_dict(), teacher.arch, teacher.dtype
    else:
        state, arch = teacher
        dtype = next(iter(state.values())).dtype
    student = nn.build_model(arch, seed=seed, dtype=dtype)
    if from_teacher:
        student.load_state_dict(state)
    return student.unfreeze()


def fine_tune(model, splits, opt=None, sched=None, epochs=mp.SOUP_FINETUNE_EPOCHS, p=mp.STUDENT_DROPOUT,
              early_stop=None, batch_size=mp.BATCH_SIZE, seed=0, progress=False, checkpoint_path=None):
    """ Task-loss training with the student's dropout stream; identical to train_student at λ = 0 """
    opt = opt or OptimizerConfig()
    model.unfreeze()
    stream = RngStream(seed).derive(ssd.STUDENT_STREAM)
    state, history = run_epochs(model, splits, task_step(model.with_dropout(p), stream), opt, sched, epochs,
                                early_stop, batch_size, seed, progress=progress, label="fine-tune")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state, history


def train_student(student, teacher, splits, cfg=None, opt=None, sched=None, epochs=mp.STUDENT_EPOCHS,
                  early_stop=None, batch_size=mp.BATCH_SIZE, seed=0, progress=False, checkpoint_path=None):
    """ SGKD training of student against the frozen teacher.
        Returns (best state, history with train_dist_loss, per-step diagnostics). """
    cfg = cfg or ssd.SSDConfig()
    opt = opt or OptimizerConfig()
    teacher.freeze()
    student.unfreeze()
    rng = RngStream(seed)
    diagnostics = []

    def step_fn(x, y, ids, epoch):
        total, grads, diag = ssd.sgkd_step(student, teacher, x, y, cfg, rng, ids, epoch)
        diagnostics.append({"step": len(diagnostics), "epoch": epoch, **diag.as_row()})
        return total, grads, {"train_dist_loss": diag.dist}

    state, history = run_epochs(student, splits, step_fn, opt, sched, epochs, early_stop, batch_size, seed,
                                progress=progress, label="student")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    columns = ["step", "epoch", "L_task", "L_dist", "L_total", "mean_kept", "mean_alpha_max", "rep_variance"]
    return state, history, pd.DataFrame.from_records(diagnostics, columns=columns)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# FLOP accounting
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# 1 MAC = 2 FLOPs; a backward pass costs twice its forward pass
BACKWARD_FACTOR = 2


def layer_flops(layers, input_shape, batch=1):
    """ Forward FLOPs of a layer stack for `batch` samples """
    shape, macs = tuple(input_shape), 0
    for layer in layers:
        macs += layer.macs(shape)
        shape = tuple(layer.output_shape(shape))
    return 2 * macs * batch


def forward_flops(model, batch=1):
    return layer_flops(model.layers, model.input_shape, batch)


@dataclass
class FlopLedger:
    method: str
    phases: dict = field(default_factory=dict)
    # for soups: what the members would have cost trained from scratch
    full_training_equivalent: int = None

    def add(self, phase, flops):
        self.phases[phase] = self.phases.get(phase, 0) + int(flops)
        return self

    @property
    def total(self):
        return int(sum(self.phases.values()))

    def ratio_to(self, other, full_training=False):
        mine = self.full_training_equivalent if full_training and self.full_training_equivalent else self.total
        return mine / other.total

    def as_row(self):
        return {"method": self.method, "train_flops": self.total, **{f"flops_{k}": v for k, v in self.phases.items()}}


def count_flops(method, model, train_samples, epochs=mp.TEACHER_EPOCHS, n=mp.N_REPRESENTATIONS,
                members=mp.ENSEMBLE_MEMBERS, student_epochs=None, finetune_epochs=mp.SOUP_FINETUNE_EPOCHS):
    """ Analytic training cost of one method, from layer shapes and the schedule alone """
    forward = forward_flops(model, train_samples)
    step = forward * (1 + BACKWARD_FACTOR)
    student_epochs = epochs if student_epochs is None else student_epochs
    ledger = FlopLedger(method)
    if method == "baseline":
        ledger.add("teacher_training", step * epochs)
    elif method in ("ssd", "distill_all", "top_k"):
        ledger.add("teacher_training", step * epochs)
        ledger.add("student_training", step * student_epochs)
        ledger.add("teacher_passes", forward * n * student_epochs)
    elif method in ("ensemble_vote", "ensemble_average", "ensemble"):
        ledger.add("member_training", step * epochs * members)
    elif method in ("uniform_soup", "greedy_soup", "soup"):
        ledger.add("teacher_training", step * epochs)
        ledger.add("member_finetune", step * finetune_epochs * members)
        ledger.full_training_equivalent = step * epochs * members
    elif method == "swa":
        ledger.add("teacher_training", step * epochs)
    else:
        raise ConfigError(f"no FLOP model for method {method!r}")
    return ledger
