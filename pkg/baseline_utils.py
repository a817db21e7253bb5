""" Comparison methods: deep ensembles, model soups, stochastic weight averaging, and the
    unfiltered / top-k targets used when ablating the selection scheme. """

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

import nn_utils as nn
import stats_utils as su
from tensor_utils import CheckpointError, ConfigError

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1


class CombinationRule(Enum):
    MAJORITY_VOTE = "majority_vote"
    PROBABILITY_AVERAGE = "probability_average"


class SoupRule(Enum):
    UNIFORM = "uniform"
    GREEDY = "greedy"


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Shared architecture checks
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def check_compatible(members):
    """ All members must carry the same parameter names in the same order with the same shapes """
    if not members:
        raise ConfigError("at least one member model is required")
    reference = members[0]
    names = list(reference.params)
    for i, member in enumerate(members[1:], start=1):
        if list(member.params) != names:
            raise CheckpointError(f"member {i} has parameters {list(member.params)[:3]}..., "
                                  f"expected {names[:3]}...")
        for name in names:
            if member.params[name].shape != reference.params[name].shape:
                raise CheckpointError(f"member {i}: {name} has shape {member.params[name].shape}, "
                                      f"expected {reference.params[name].shape}")


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Ensembles
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class EnsembleSpec:
    """ What an ensemble manifest on disk describes: member checkpoint paths and a rule """

    members: list
    rule: CombinationRule = CombinationRule.MAJORITY_VOTE

    def __post_init__(self):
        self.rule = CombinationRule(self.rule)
        self.members = [Path(p) for p in self.members]
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")


@dataclass
class Ensemble:
    members: list
    rule: CombinationRule = CombinationRule.MAJORITY_VOTE

    def __post_init__(self):
        self.rule = CombinationRule(self.rule)
        check_compatible(self.members)

    def __len__(self):
        return len(self.members)

    def num_parameters(self):
        return inference_parameter_count(self)


def save_ensemble_manifest(spec, path):
    """ Member paths are stored relative to the manifest's directory """
    path = Path(path)
    base = path.parent.resolve()
    members = []
    for member in spec.members:
        member = Path(member).resolve()
        try:
            members.append(member.relative_to(base).as_posix())
        except ValueError:
            members.append(member.as_posix())
    payload = {"rule": spec.rule.value, "members": members, "format_version": MANIFEST_FORMAT_VERSION}
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_ensemble_manifest(path):
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not a valid ensemble manifest ({err})") from err
    if payload.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported ensemble manifest version {payload.get('format_version')}")
    try:
        rule = CombinationRule(payload["rule"])
    except (KeyError, ValueError) as err:
        raise ConfigError(f"{path}: invalid rule {payload.get('rule')!r}") from err
    return EnsembleSpec([path.parent / m for m in payload.get("members", [])], rule)


def member_probabilities(ensemble, samples, batch_size=512):
    """ M×B×K softmax probabilities of every member """
    return np.stack([nn.predict_proba(m, samples, batch_size) for m in ensemble.members])


def ensemble_predict(ensemble, samples, batch_size=512):
    """ Majority vote breaks ties towards the lowest class index; probability average takes
        the argmax of the mean softmax """
    if not ensemble.members:
        raise ConfigError("cannot predict with an empty ensemble")
    probs = member_probabilities(ensemble, samples, batch_size)
    if ensemble.rule is CombinationRule.PROBABILITY_AVERAGE:
        return probs.mean(axis=0).argmax(axis=1)
    votes = probs.argmax(axis=2)
    counts = np.zeros(probs.shape[1:], dtype=np.int64)
    rows = np.broadcast_to(np.arange(probs.shape[1]), votes.shape)
    np.add.at(counts, (rows, votes), 1)
    return counts.argmax(axis=1)


def inference_parameter_count(model_or_ensemble):
    if isinstance(model_or_ensemble, Ensemble):
        return sum(m.num_parameters() for m in model_or_ensemble.members)
    return model_or_ensemble.num_parameters()


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Model soups
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class SoupSpec:
    members: list
    rule: SoupRule = SoupRule.GREEDY
    # split the greedy rule scores candidates on
    val_split: str = "val"

    def __post_init__(self):
        self.rule = SoupRule(self.rule)
        if not self.members:
            raise ConfigError("a soup needs at least one member")


def average_parameters(members):
    check_compatible(members)
    averaged = {}
    for name, reference in members[0].params.items():
        stacked = np.stack([m.params[name].data.astype(np.float64) for m in members])
        averaged[name] = stacked.mean(axis=0).astype(reference.dtype)
    return averaged


def uniform_soup(members):
    """ Parameter-wise arithmetic mean of the members """
    if not members:
        raise ConfigError("uniform_soup needs at least one member")
    return members[0].bind(average_parameters(members))


def _val_accuracy(model, val_set, batch_size):
    return su.accuracy(val_set.labels, nn.predict(model, val_set.samples, batch_size))


def greedy_soup_ingredients(members, val_set, batch_size=512):
    """ Members sorted by validation accuracy (ties keep input order); starting from the best, a
        member joins when the averaged soup's validation accuracy does not drop.
        Returns (accepted member indices, soup validation accuracy). """
    if not members:
        raise ConfigError("greedy_soup needs at least one member")
    check_compatible(members)
    scores = [_val_accuracy(m, val_set, batch_size) for m in members]
    order = sorted(range(len(members)), key=lambda i: -scores[i])
    accepted = [order[0]]
    best = scores[order[0]]
    for i in order[1:]:
        candidate = uniform_soup([members[j] for j in accepted + [i]])
        acc = _val_accuracy(candidate, val_set, batch_size)
        if acc >= best:
            accepted.append(i)
            best = acc
        logger.debug("greedy soup: member %d (val %.4f) -> soup %.4f, %s", i, scores[i], acc,
                     "kept" if i in accepted else "skipped")
    logger.info("greedy soup kept %d of %d members, val accuracy %.4f", len(accepted), len(members), best)
    return accepted, best


def greedy_soup(members, val_set, batch_size=512):
    accepted, _ = greedy_soup_ingredients(members, val_set, batch_size)
    return uniform_soup([members[i] for i in accepted])


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Stochastic weight averaging
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class SwaAccumulator:
    """ Running mean of the parameters seen at the end of every epoch >= start_epoch """

    start_epoch: int
    count: int = 0
    mean: dict = field(default_factory=dict)

    def update(self, model, epoch):
        if epoch < self.start_epoch:
            return False
        self.count += 1
        for name, tensor in model.params.items():
            value = tensor.data.astype(np.float64)
            if name not in self.mean:
                self.mean[name] = value.copy()
            else:
                self.mean[name] += (value - self.mean[name]) / self.count
        return True

    def average(self, model):
        """ model with the averaged parameters bound in """
        if not self.count:
            raise ConfigError(f"no epoch reached swa start {self.start_epoch}; nothing was averaged")
        return model.bind({name: self.mean[name].astype(model.params[name].dtype) for name in model.params})


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Distillation targets without student guidance
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def distill_all_target(rows):
    """ Unweighted mean of the n teacher rows (axis −2) """
    rows = np.asarray(rows)
    if rows.shape[-2] < 1:
        raise ConfigError("distill_all_target needs at least one row")
    return rows.mean(axis=-2).astype(rows.dtype)


def top_k_mask(alpha, k):
    """ Boolean mask of the k largest weights per row, ties going to the lower index """
    alpha = np.asarray(alpha)
    n = alpha.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top_k must lie in [1, {n}], got {k}")
    order = np.argsort(-alpha, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(alpha.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def top_k_select(alpha, k):
    alpha = np.asarray(alpha)
    return np.where(top_k_mask(alpha, k), alpha, 0).astype(alpha.dtype)
