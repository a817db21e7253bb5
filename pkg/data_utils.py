""" Dataset ingestion (UCI HAR raw inertial signals, UCR archive files), a seeded synthetic
    corpus, and the standardize / split / batch plumbing shared by every experiment. """

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split
from tqdm import tqdm

import har_params as hp
import model_params as mp
from tensor_utils import ConfigError, DataError

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "SSD_DATA_DIR"


class IngestionError(DataError):
    pass


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Containers
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class TimeSeriesDataset:
    samples: np.ndarray  # m × C × L
    labels: np.ndarray  # m, 0-based
    class_count: int
    channel_names: list = field(default_factory=list)
    norm_stats: NormStats = None
    name: str = ""
    # original label value of each class index, when the file used other values
    label_values: tuple = ()

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 3:
            raise DataError(f"samples must be m×C×L, got shape {self.samples.shape}")
        if len(self.samples) != len(self.labels):
            raise DataError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count}), "
                            f"got range [{self.labels.min()}, {self.labels.max()}]")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.samples.shape[1])]

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.samples.shape[1:])

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, samples=self.samples[indices], labels=self.labels[indices],
                       name=self.name if name is None else name)


@dataclass
class SplitSpec:
    """ fractions of (train, val) or (train, val, test); they must sum to 1 """

    fractions: tuple = (1.0 - mp.VAL_FRACTION, mp.VAL_FRACTION)
    seed: int = mp.SPLIT_SEED
    stratified: bool = True

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) < 2 or any(f < 0 for f in self.fractions):
            raise ConfigError(f"split fractions must be two or more non-negative numbers, got {self.fractions}")
        if not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions must sum to 1, got {self.fractions}")


@dataclass
class DatasetSplits:
    train: TimeSeriesDataset
    val: TimeSeriesDataset
    test: TimeSeriesDataset


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# UCI HAR
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def _read_whitespace_table(path):
    if not path.is_file():
        raise IngestionError(f"missing file: {path}")
    return pd.read_csv(path, sep=r"\s+", header=None, dtype=np.float64).to_numpy()


def _load_har_split(root, split, progress):
    channels = []
    for signal in tqdm(hp.SIGNALS, desc=f"HAR {split}", disable=not progress, leave=False):
        path = hp.signal_path(root, split, signal)
        table = _read_whitespace_table(path)
        if table.shape[1] != hp.WINDOW_LENGTH:
            raise IngestionError(f"{path}: expected {hp.WINDOW_LENGTH} columns, got {table.shape[1]}")
        if channels and len(table) != len(channels[0]):
            raise IngestionError(f"{path}: {len(table)} rows, but {hp.SIGNALS[0]} has {len(channels[0])}")
        channels.append(table.astype(np.float32))

    label_file = hp.label_path(root, split)
    labels = _read_whitespace_table(label_file)[:, 0].astype(np.int64) - hp.LABEL_OFFSET
    if len(labels) != len(channels[0]):
        raise IngestionError(f"{label_file}: {len(labels)} labels for {len(channels[0])} signal rows")
    if labels.min() < 0 or labels.max() >= hp.N_CLASSES:
        raise IngestionError(f"{label_file}: labels outside 1..{hp.N_CLASSES}")
    return TimeSeriesDataset(np.stack(channels, axis=1), labels, hp.N_CLASSES, list(hp.SIGNALS),
                             name=f"uci_har_{split}", label_values=tuple(range(1, hp.N_CLASSES + 1)))


def har_root(root):
    """ Accepts either the archive folder itself or the directory it was unpacked into """
    root = Path(root)
    nested = root / hp.ARCHIVE_DIR
    return nested if nested.is_dir() else root


def load_uci_har(root, progress=False):
    """ Returns (train, test), each m×9×128 with 0-based labels """
    root = har_root(root)
    train, test = (_load_har_split(root, split, progress) for split in hp.SPLITS)
    logger.info("loaded UCI HAR from %s: %d train / %d test windows", root, len(train), len(test))
    return train, test


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# UCR archive
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def _split_row(line):
    fields = line.split("\t")
    if len(fields) == 1 and "," in line:
        fields = line.split(",")
    return [f.strip() for f in fields]


def load_ucr_tsv(path, label_values=None):
    """ One series per row, `label<TAB>v_1<TAB>…<TAB>v_L` (comma-separated files are accepted too).
        Labels map to 0-based indices in ascending order of their original values; pass
        label_values to reuse the mapping of another split. """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing file: {path}")
    raw_labels, rows = [], []
    width = None
    for row_number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = _split_row(line)
        if width is None:
            width = len(fields)
        if len(fields) != width:
            raise IngestionError(f"{path}: row {row_number} has {len(fields) - 1} values, expected {width - 1}")
        try:
            values = [float(v) for v in fields]
        except ValueError as err:
            raise IngestionError(f"{path}: row {row_number} is not numeric ({err})") from err
        if any(math.isnan(v) for v in values[1:]):
            raise IngestionError(f"{path}: row {row_number} contains missing values")
        raw_labels.append(values[0])
        rows.append(values[1:])
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    if width < 2:
        raise IngestionError(f"{path}: rows carry a label but no values")

    if label_values is None:
        label_values = tuple(sorted(set(raw_labels)))
    index = {value: i for i, value in enumerate(label_values)}
    unknown = sorted(set(raw_labels) - set(index))
    if unknown:
        raise IngestionError(f"{path}: labels {unknown} do not occur in the reference split")
    labels = np.array([index[v] for v in raw_labels], dtype=np.int64)
    samples = np.asarray(rows, dtype=np.float32)[:, None, :]
    return TimeSeriesDataset(samples, labels, len(label_values), ["value"], name=path.stem,
                             label_values=tuple(label_values))


def load_ucr_pair(root, name):
    """ <root>/<name>/<name>_TRAIN.tsv and _TEST.tsv, sharing the train label mapping """
    folder = Path(root) / name
    train = load_ucr_tsv(folder / f"{name}_TRAIN.tsv")
    test = load_ucr_tsv(folder / f"{name}_TEST.tsv", label_values=train.label_values)
    logger.info("loaded UCR %s: %d train / %d test series of length %d",
                name, len(train), len(test), train.samples.shape[2])
    return train, test


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Synthetic corpus
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class SynthSpec:
    classes: int = mp.SYNTH_CLASSES
    channels: int = mp.SYNTH_CHANNELS
    length: int = mp.SYNTH_LENGTH
    samples: int = mp.SYNTH_SAMPLES
    noise: float = mp.SYNTH_NOISE

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"classes must be at least 2, got {self.classes}")
        for name in ("channels", "length", "samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")


def synth_generate(spec, seed):
    """ Class k is a sinusoid with k+1 cycles per window and a random phase, plus N(0, noise²) """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(spec.samples) % spec.classes)
    t = np.arange(spec.length) / spec.length
    phase = rng.uniform(0.0, 2 * np.pi, size=(spec.samples, spec.channels, 1))
    freq = (labels + 1)[:, None, None]
    clean = np.sin(2 * np.pi * freq * t[None, None, :] + phase)
    noisy = clean + spec.noise * rng.standard_normal(clean.shape)
    return TimeSeriesDataset(noisy.astype(np.float32), labels, spec.classes, name=f"synthetic_{seed}")


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Standardization, splits and batches
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def fit_norm_stats(dataset):
    """ Per-channel mean and std over samples and time """
    x = dataset.samples.astype(np.float64)
    return NormStats(mean=x.mean(axis=(0, 2)), std=x.std(axis=(0, 2)))


def standardize(dataset, stats, floor=mp.NORM_STD_FLOOR):
    scale = np.maximum(stats.std, floor)
    x = (dataset.samples.astype(np.float64) - stats.mean[None, :, None]) / scale[None, :, None]
    return replace(dataset, samples=x.astype(dataset.samples.dtype), norm_stats=stats)


def _split_indices(labels, fraction, seed, stratified):
    indices = np.arange(len(labels))
    if fraction <= 0:
        return indices, indices[:0]
    if fraction >= 1:
        return indices[:0], indices
    try:
        return train_test_split(indices, test_size=fraction, random_state=seed,
                                stratify=labels if stratified else None)
    except ValueError as err:
        raise DataError(f"cannot split {len(labels)} samples with fraction {fraction}: {err}") from err


def split_dataset(dataset, spec=None):
    """ Splits in order of spec.fractions; every part keeps the source's class count """
    spec = spec or SplitSpec()
    parts = []
    remaining = np.arange(len(dataset))
    left = 1.0
    for fraction in spec.fractions[:-1]:
        held = 1.0 - fraction / left if left > 0 else 0.0
        keep, rest = _split_indices(dataset.labels[remaining], held, spec.seed, spec.stratified)
        parts.append(np.sort(remaining[keep]))
        remaining = remaining[rest]
        left -= fraction
    parts.append(np.sort(remaining))
    return [dataset.subset(idx) for idx in parts]


def iterate_batches(dataset, batch_size, shuffle_seed=None):
    """ Yields (sample ids, samples, labels); ids are row indices into the dataset """
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    for start in range(0, len(order), batch_size):
        ids = order[start:start + batch_size]
        yield ids, dataset.samples[ids], dataset.labels[ids]


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Config-driven loading
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str = None
    name: str = None  # UCR dataset name
    val_fraction: float = mp.VAL_FRACTION
    split_seed: int = mp.SPLIT_SEED
    stratified: bool = True
    # synthetic only
    synth_classes: int = mp.SYNTH_CLASSES
    synth_channels: int = mp.SYNTH_CHANNELS
    synth_length: int = mp.SYNTH_LENGTH
    synth_samples: int = mp.SYNTH_SAMPLES
    synth_noise: float = mp.SYNTH_NOISE
    synth_seed: int = 0
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in ("har", "ucr", "synthetic"):
            raise ConfigError(f"data.kind must be one of har, ucr, synthetic, got {self.kind!r}")
        if self.kind == "ucr" and not self.name:
            raise ConfigError("data.name is required for UCR datasets")
        for name in ("val_fraction", "test_fraction"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"data.{name} must lie in [0, 1), got {getattr(self, name)}")

    def resolved_path(self):
        path = self.path or os.environ.get(DATA_DIR_ENV)
        if not path:
            raise IngestionError(f"no dataset path: set data.path, --data-path or {DATA_DIR_ENV}")
        return Path(path)

    def synth_spec(self):
        return SynthSpec(self.synth_classes, self.synth_channels, self.synth_length,
                         self.synth_samples, self.synth_noise)


def load_dataset(cfg, progress=False):
    """ (train, val, test) standardized with statistics of the train part only """
    if cfg.kind == "har":
        train, test = load_uci_har(cfg.resolved_path(), progress)
    elif cfg.kind == "ucr":
        train, test = load_ucr_pair(cfg.resolved_path(), cfg.name)
    else:
        full = synth_generate(cfg.synth_spec(), cfg.synth_seed)
        train, test = split_dataset(full, SplitSpec((1 - cfg.test_fraction, cfg.test_fraction),
                                                    cfg.split_seed, cfg.stratified))
    train, val = split_dataset(train, SplitSpec((1 - cfg.val_fraction, cfg.val_fraction),
                                                cfg.split_seed, cfg.stratified))
    stats = fit_norm_stats(train)
    splits = DatasetSplits(*(standardize(part, stats) for part in (train, val, test)))
    logger.info("dataset %s: %d train / %d val / %d test", cfg.kind, len(splits.train), len(splits.val),
                len(splits.test))
    return splits
