""" Student-guided distillation from a frozen teacher's dropout-perturbed representations.

    One step: run the teacher n times with distillation-time dropout, score each stochastic
    feature row against the student's feature, soften the scores with a temperature, zero the
    rows below a per-sample percentile of the weights, and regress the student feature onto the
    weighted sum of the surviving rows, next to the usual classification loss. """

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.special import softmax as np_softmax

import baseline_utils as bu
import model_params as mp
import nn_utils as nn
import tensor_utils as tu
from nn_utils import DropoutMode
from tensor_utils import ConfigError, ContractError, DimensionError, Tensor

logger = logging.getLogger(__name__)

# RngStream.derive tags; fine-tuning without distillation reuses STUDENT_STREAM
TEACHER_STREAM = "teacher-passes"
STUDENT_STREAM = "student-dropout"

HISTOGRAM_BINS = 10


class SelectionScheme(Enum):
    DYNAMIC = "dynamic"
    TOP_K = "top-k"
    DISTILL_ALL = "distill-all"


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Configuration
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class SSDConfig:
    n: int = mp.N_REPRESENTATIONS
    p_t: float = mp.TEACHER_DISTILL_DROPOUT
    p_s: float = mp.STUDENT_DROPOUT
    h: float = mp.ATTENTION_TEMPERATURE
    eps: float = mp.PERCENTILE_EPS
    lam: float = mp.DIST_WEIGHT
    renormalize_after_mask: bool = False
    detach_attention: bool = True
    selection_scheme: SelectionScheme = SelectionScheme.DYNAMIC
    top_k: int = mp.TOP_K
    logit_weight: float = 0.0
    init_from_teacher: bool = True
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.selection_scheme, str):
            try:
                self.selection_scheme = SelectionScheme(self.selection_scheme)
            except ValueError:
                choices = [s.value for s in SelectionScheme]
                raise ConfigError(f"selection_scheme must be one of {choices}, got {self.selection_scheme!r}")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError(f"n must be a positive integer, got {self.n}")
        self.n = int(self.n)
        for name in ("p_t", "p_s"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if not self.h > 0:
            raise ConfigError(f"h must be positive, got {self.h}")
        if not 0.0 <= self.eps <= 100.0:
            raise ConfigError(f"eps must lie in [0, 100], got {self.eps}")
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if self.logit_weight < 0:
            raise ConfigError(f"logit_weight must be non-negative, got {self.logit_weight}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.selection_scheme is SelectionScheme.TOP_K and not 1 <= self.top_k <= self.n:
            raise ConfigError(f"top_k must lie in [1, n={self.n}], got {self.top_k}")

    def to_dict(self):
        out = asdict(self)
        out["selection_scheme"] = self.selection_scheme.value
        return out


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Stochastic teacher representations
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class StochasticTeacherSet:
    """ features is B×n×d, logits B×n×K; row i of sample b came from pass pass_indices[i] """

    features: np.ndarray
    logits: np.ndarray
    sample_ids: np.ndarray
    pass_indices: np.ndarray

    @property
    def n(self):
        return self.features.shape[1]

    @property
    def d(self):
        return self.features.shape[2]

    def __len__(self):
        return self.features.shape[0]


def generate_stochastic_representations(teacher, x, cfg, rng, sample_ids=None, pass_offset=0):
    """ n Distill-mode passes of a frozen teacher over the batch x. The layers before the first
        dropout site are deterministic, so they run once and every pass resumes from there. """
    if not teacher.is_frozen():
        raise ContractError("the teacher must be frozen before generating stochastic representations")
    model = teacher.with_dropout(cfg.p_t)
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    if tuple(xt.shape[1:]) != model.input_shape:
        raise DimensionError(f"teacher expects samples of shape {model.input_shape}, got batch {xt.shape}")
    ids = np.arange(xt.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    sites = model.dropout_sites
    split = sites[0] if sites else len(model.layers)

    with tu.no_grad():
        prefix, prefix_features = nn.run_layers(model, xt, DropoutMode.EVAL, stop=split)

    def one_pass(i):
        with tu.no_grad():
            logits, features = nn.run_layers(model, prefix, DropoutMode.DISTILL, rng, ids,
                                             pass_offset + i, start=split)
        features = prefix_features if features is None else features
        return features.data, logits.data

    if cfg.workers > 1 and cfg.n > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            passes = list(pool.map(one_pass, range(cfg.n)))
    else:
        passes = [one_pass(i) for i in range(cfg.n)]

    return StochasticTeacherSet(features=np.stack([f for f, _ in passes], axis=1),
                                logits=np.stack([lg for _, lg in passes], axis=1),
                                sample_ids=ids,
                                pass_indices=pass_offset + np.arange(cfg.n))


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Attention over teacher rows
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class AttentionWeights:
    alpha: Tensor
    alpha_hat: Tensor
    kept_mask: np.ndarray

    @property
    def kept_counts(self):
        return self.kept_mask.sum(axis=-1)


def _teacher_rows(rows, dtype):
    if isinstance(rows, StochasticTeacherSet):
        rows = rows.features
    if isinstance(rows, Tensor):
        return rows
    return Tensor(np.asarray(rows, dtype=dtype))


def similarity_scores(f_s, rows, detach=True):
    """ φ_i = ⟨f_s, row_i⟩ for a d-vector and n×d rows, or per sample for B×d and B×n×d """
    rows = _teacher_rows(rows, f_s.dtype)
    if f_s.ndim + 1 != rows.ndim or f_s.shape[:-1] != rows.shape[:-2] or f_s.shape[-1] != rows.shape[-1]:
        raise DimensionError(f"student feature {f_s.shape} cannot be scored against teacher rows {rows.shape}")
    subscripts = "d,nd->n" if f_s.ndim == 1 else "bd,bnd->bn"
    if detach:
        return Tensor(np.einsum(subscripts, f_s.data, rows.data))
    return tu.einsum(subscripts, f_s, rows)


def attention_weights(phi, h):
    """ softmax(φ / h) along the last axis """
    if not h > 0:
        raise ConfigError(f"h must be positive, got {h}")
    phi = phi if isinstance(phi, Tensor) else Tensor(np.asarray(phi, dtype=np.float64))
    return tu.softmax(tu.mul(phi, 1.0 / h), axis=-1)


def percentile_rank(n, eps):
    """ 1-based nearest-rank position of the eps-th percentile among n values; 0 keeps everything """
    return int(np.ceil(round(eps * n / 100.0, 9)))


def percentile_mask(alpha, eps, renormalize=False):
    """ Keeps the weights at or above the nearest-rank eps-th percentile of each row.
        Returns (masked weights, kept mask); the maximum and anything tied with the threshold survive. """
    if not 0.0 <= eps <= 100.0:
        raise ConfigError(f"eps must lie in [0, 100], got {eps}")
    alpha = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha)
    rank = percentile_rank(alpha.shape[-1], eps)
    if rank == 0:
        kept = np.ones(alpha.shape, dtype=bool)
    else:
        threshold = np.sort(alpha, axis=-1)[..., rank - 1:rank]
        kept = alpha >= threshold
    alpha_hat = np.where(kept, alpha, 0).astype(alpha.dtype)
    if renormalize:
        alpha_hat = alpha_hat / alpha_hat.sum(axis=-1, keepdims=True)
    return alpha_hat, kept


def select_weights(alpha, cfg):
    """ Applies cfg.selection_scheme to the weights; the mask is a constant, so gradients
        through alpha survive on the kept rows """
    scheme = cfg.selection_scheme
    if scheme is SelectionScheme.DYNAMIC:
        _, kept = percentile_mask(alpha, cfg.eps)
    elif scheme is SelectionScheme.TOP_K:
        kept = bu.top_k_mask(alpha.data, cfg.top_k)
    else:
        kept = np.ones(alpha.shape, dtype=bool)
    alpha_hat = tu.mul(alpha, Tensor(kept.astype(alpha.dtype)))
    if cfg.renormalize_after_mask:
        alpha_hat = tu.div(alpha_hat, tu.reduce_sum(alpha_hat, axis=-1, keepdims=True))
    return AttentionWeights(alpha, alpha_hat, kept)


def attend(alpha_hat, rows):
    """ Σ_i α̂_i · row_i, with the masked weights used as they are """
    alpha_hat = alpha_hat if isinstance(alpha_hat, Tensor) else Tensor(np.asarray(alpha_hat))
    rows = _teacher_rows(rows, alpha_hat.dtype)
    if alpha_hat.shape != rows.shape[:-1]:
        raise DimensionError(f"weights {alpha_hat.shape} do not match teacher rows {rows.shape}")
    subscripts = "n,nd->d" if alpha_hat.ndim == 1 else "bn,bnd->bd"
    return tu.einsum(subscripts, alpha_hat, rows)


def total_loss(task, dist, lam):
    if lam == 0:
        return task
    if not isinstance(task, Tensor) and not isinstance(dist, Tensor):
        return task + lam * dist
    return tu.add(task, tu.mul(dist, float(lam)))


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Variance of the teacher rows
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def per_sample_variance(rows):
    """ Population variance across the n rows, averaged over feature dimensions, one value per sample """
    rows = rows.features if isinstance(rows, StochasticTeacherSet) else np.asarray(rows)
    if rows.ndim == 2:
        rows = rows[None]
    if rows.shape[-2] < 2:
        raise ContractError(f"variance across representations needs n >= 2, got n={rows.shape[-2]}")
    return rows.astype(np.float64).var(axis=-2).mean(axis=-1)


def representation_variance(rows):
    return float(per_sample_variance(rows).mean())


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# One optimization step
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class StepDiagnostics:
    task: float
    dist: float
    total: float
    mean_kept: float
    mean_alpha_max: float
    rep_variance: float
    sample_variance: np.ndarray = field(repr=False)
    alpha_histogram: np.ndarray = field(repr=False)

    def as_row(self):
        return {"L_task": self.task, "L_dist": self.dist, "L_total": self.total,
                "mean_kept": self.mean_kept, "mean_alpha_max": self.mean_alpha_max,
                "rep_variance": self.rep_variance}


def _teacher_probabilities(teacher_set, weights):
    """ Teacher class probabilities per sample, mixed with the normalized kept weights """
    w = weights.alpha_hat.data.astype(np.float64)
    w = w / w.sum(axis=-1, keepdims=True)
    probs = np_softmax(teacher_set.logits.astype(np.float64), axis=-1)
    return np.einsum("bn,bnk->bk", w, probs)


def sgkd_step(student, teacher, batch, labels, cfg, rng, sample_ids=None, epoch=0):
    """ Forward and backward of one distillation step; returns (total loss, {name: gradient}, diagnostics).
        Teacher passes use pass indices epoch·n … epoch·n + n − 1 of the teacher stream, the student's
        dropout uses pass index epoch of the student stream. Only student parameters get gradients. """
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=student.dtype)
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    teacher_set = generate_stochastic_representations(teacher, x, cfg, rng.derive(TEACHER_STREAM), ids,
                                                      pass_offset=epoch * cfg.n)

    tu.reset_tape()
    f_s, logits = nn.forward(student.with_dropout(cfg.p_s), x, DropoutMode.TRAIN,
                             rng.derive(STUDENT_STREAM), ids, pass_index=epoch)
    rows = Tensor(teacher_set.features.astype(student.dtype))

    if cfg.selection_scheme is SelectionScheme.DISTILL_ALL:
        alpha = Tensor(np.full(rows.shape[:-1], 1.0 / cfg.n, dtype=student.dtype))
        weights = AttentionWeights(alpha, alpha, np.ones(alpha.shape, dtype=bool))
        target = Tensor(bu.distill_all_target(rows.data))
    else:
        phi = similarity_scores(f_s, rows, detach=cfg.detach_attention)
        weights = select_weights(attention_weights(phi, cfg.h), cfg)
        target = attend(weights.alpha_hat, rows)

    task = nn.softmax_cross_entropy(logits, labels)
    dist = nn.mse(f_s, target)
    total = total_loss(task, dist, cfg.lam)
    if cfg.logit_weight > 0:
        kl = nn.kl_divergence(_teacher_probabilities(teacher_set, weights), logits)
        total = tu.add(total, tu.mul(kl, float(cfg.logit_weight)))
    grads = tu.backward(total)

    alpha = weights.alpha.data
    sample_variance = per_sample_variance(teacher_set) if cfg.n >= 2 else np.full(len(x), np.nan)
    diag = StepDiagnostics(task=task.item(), dist=dist.item(), total=total.item(),
                           mean_kept=float(weights.kept_counts.mean()),
                           mean_alpha_max=float(alpha.max(axis=-1).mean()),
                           rep_variance=float(sample_variance.mean()),
                           sample_variance=sample_variance,
                           alpha_histogram=np.histogram(alpha, bins=HISTOGRAM_BINS, range=(0.0, 1.0))[0])
    logger.debug("sgkd step: task %.4f dist %.4f kept %.2f", diag.task, diag.dist, diag.mean_kept)
    return total, grads, diag
