""" Experiment configuration: TOML files mapped onto dataclasses, CLI overrides, run manifests """

import itertools
import json
import logging
import platform
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import metadata
from pathlib import Path

import model_params as mp
import nn_utils as nn
from data_utils import DataConfig
from ssd_utils import SSDConfig
from tensor_utils import ConfigError, SSDError
from train_utils import FORMAT_VERSION, EarlyStopConfig, OptimizerConfig, SchedulerConfig

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
REPORTED_PACKAGES = ("numpy", "pandas", "scipy", "scikit-learn", "tqdm")


class OutputExistsError(SSDError):
    pass


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Sections
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@dataclass
class ModelConfig:
    kind: str = "har_cnn"
    p: float = mp.TEACHER_DROPOUT
    hidden: list = field(default_factory=lambda: list(mp.SYNTH_HIDDEN))
    dtype: str = "float32"

    def __post_init__(self):
        if self.kind not in ("har_cnn", "mlp"):
            raise ConfigError(f"model.kind must be 'har_cnn' or 'mlp', got {self.kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"model.p must lie in [0, 1), got {self.p}")
        self.hidden = list(self.hidden)

    def build(self, input_shape, classes, seed=0):
        if self.kind == "har_cnn":
            channels, length = input_shape
            return nn.build_har_cnn(self.p, classes, channels, length, seed=seed, dtype=self.dtype)
        return nn.build_mlp(tuple(input_shape), self.hidden, classes, self.p, seed=seed, dtype=self.dtype)


@dataclass
class TrainingConfig:
    """ [teacher] and [student]; the student inherits the teacher's recipe unless it sets its own """

    epochs: int = mp.TEACHER_EPOCHS
    batch_size: int = mp.BATCH_SIZE
    seed: int = 0
    optimizer: str = mp.OPTIMIZER
    lr: float = mp.TEACHER_LR
    weight_decay: float = mp.WEIGHT_DECAY
    momentum: float = mp.SGD_MOMENTUM
    scheduler: str = "plateau"
    plateau_patience: int = mp.PLATEAU_PATIENCE
    plateau_factor: float = mp.PLATEAU_FACTOR
    plateau_monitor: str = mp.PLATEAU_MONITOR
    cosine_t_max: int = mp.TEACHER_EPOCHS
    early_stop: bool = False
    early_stop_patience: int = mp.EARLY_STOP_PATIENCE
    early_stop_monitor: str = "val_loss"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        # constructing the parts validates them
        self.optimizer_config()
        self.scheduler_config()
        self.early_stop_config()

    def optimizer_config(self):
        return OptimizerConfig(self.optimizer, self.lr, self.weight_decay, self.momentum)

    def scheduler_config(self):
        return SchedulerConfig(self.scheduler, self.plateau_patience, self.plateau_factor, self.plateau_monitor,
                               self.cosine_t_max)

    def early_stop_config(self):
        return EarlyStopConfig(self.early_stop, self.early_stop_patience, self.early_stop_monitor)


_ABLATION_AXES = ("p_t", "n", "eps", "h", "top_k", "init_from_teacher", "selection_scheme")


@dataclass
class AblationConfig:
    """ Each set axis is a list of values; the grid is their product in declaration order.
        Points that keep more top-k rows than they have teacher passes are left out. """

    p_t: list = None
    n: list = None
    eps: list = None
    h: list = None
    top_k: list = None
    init_from_teacher: list = None
    selection_scheme: list = None
    epochs: int = None  # student epochs per grid point; defaults to [student].epochs

    def axes(self):
        return {name: list(getattr(self, name)) for name in _ABLATION_AXES if getattr(self, name) is not None}

    def grid(self):
        axes = self.axes()
        if not axes or any(len(values) == 0 for values in axes.values()):
            raise ConfigError(f"ablation grid is empty; set at least one of {list(_ABLATION_AXES)} to a non-empty list")
        names = list(axes)
        points = [dict(zip(names, values)) for values in itertools.product(*axes.values())]
        points = [p for p in points if "top_k" not in p or "n" not in p or p["top_k"] <= p["n"]]
        if not points:
            raise ConfigError(f"ablation grid is empty: every top_k exceeds every n in {axes}")
        return points


@dataclass
class CompareConfig:
    members: int = mp.ENSEMBLE_MEMBERS
    finetune_epochs: int = mp.SOUP_FINETUNE_EPOCHS
    lr_scale: float = mp.SOUP_LR_SCALE
    soup_from_scratch: bool = False
    swa: bool = True
    swa_start_fraction: float = mp.SWA_START_FRACTION

    def __post_init__(self):
        if self.members < 1:
            raise ConfigError(f"compare.members must be at least 1, got {self.members}")
        if not 0 < self.lr_scale:
            raise ConfigError(f"compare.lr_scale must be positive, got {self.lr_scale}")
        if not 0.0 <= self.swa_start_fraction < 1.0:
            raise ConfigError(f"compare.swa_start_fraction must lie in [0, 1), got {self.swa_start_fraction}")


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    formats: list = field(default_factory=lambda: ["csv", "json"])

    def __post_init__(self):
        unknown = set(self.formats) - {"csv", "json"}
        if unknown:
            raise ConfigError(f"output.formats only knows csv and json, got {sorted(unknown)}")


SECTIONS = {"data": DataConfig, "model": ModelConfig, "teacher": TrainingConfig, "student": TrainingConfig,
            "ssd": SSDConfig, "ablation": AblationConfig, "compare": CompareConfig, "output": OutputConfig}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TrainingConfig = field(default_factory=TrainingConfig)
    student: TrainingConfig = field(default_factory=TrainingConfig)
    ssd: SSDConfig = field(default_factory=SSDConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source: str = None

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
        return out


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Loading
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def _build_section(name, values):
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key {name}.{unknown[0]}")
    try:
        return cls(**values)
    except ConfigError as err:
        raise ConfigError(f"[{name}] {err}") from err
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{name}] invalid value: {err}") from err


def config_from_dict(raw, source=None):
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section [{unknown[0]}]")
    sections = {name: _build_section(name, raw[name]) for name in SECTIONS if name in raw}
    # the student keeps the teacher's recipe for every key it does not set
    if "teacher" in raw:
        sections["student"] = _build_section("student", {**raw["teacher"], **raw.get("student", {})})
    return ExperimentConfig(**sections, source=source)


def load_config(path):
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    cfg = config_from_dict(raw, source=str(path))
    logger.debug("loaded config %s", path)
    return cfg


def apply_overrides(cfg, overrides):
    """ overrides maps 'section.key' to a value; None values are skipped """
    by_section = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or key not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown config key {dotted}")
        by_section.setdefault(section, {})[key] = value
    updated = {}
    for section, values in by_section.items():
        current = getattr(cfg, section)
        try:
            updated[section] = replace(current, **values)
        except ConfigError as err:
            raise ConfigError(f"[{section}] {err}") from err
    return replace(cfg, **updated)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Outputs
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def prepare_output_dir(directory, outputs, force=False):
    """ Creates the run directory; refuses to overwrite any of outputs unless force """
    directory = Path(directory)
    existing = [name for name in outputs if (directory / name).exists()]
    if existing and not force:
        raise OutputExistsError(f"{directory} already holds {', '.join(existing)}; pass --force to overwrite")
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def package_versions():
    versions = {"python": platform.python_version()}
    for name in REPORTED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_manifest(path, cfg, command, arch=None, extra=None):
    """ Everything needed to replay a command: resolved config, seeds, command, formats, versions """
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config_source": cfg.source,
        "config": cfg.to_dict(),
        "seeds": {"teacher": cfg.teacher.seed, "student": cfg.student.seed, "split": cfg.data.split_seed},
        "checkpoint_format_version": FORMAT_VERSION,
        "arch": arch,
        "packages": package_versions(),
    }
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, default=str))
    return manifest


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, default=_json_default))


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "item"):
        return value.item()
    return str(value)
