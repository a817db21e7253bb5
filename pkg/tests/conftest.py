import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import data_utils as du
import har_params as hp
import nn_utils as nn


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: HAR-scale reproduction runs (need SSD_DATA_DIR and SSD_RUN_SLOW=1)")


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Models
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
@pytest.fixture
def tiny_mlp():
    """ 1×8 inputs, hidden 6 → 5, three classes, float64 """
    return nn.build_mlp((1, 8), hidden=(6, 5), classes=3, p=0.2, seed=0, dtype=np.float64)


def constant_model(cls, classes=3, input_shape=(1, 4), margin=5.0):
    """ An MLP whose weights are all zero, so it always predicts `cls` """
    model = nn.build_mlp(input_shape, hidden=(4, 4), classes=classes, p=0.0, seed=0, dtype=np.float64)
    state = {name: np.zeros_like(arr) for name, arr in model.state_dict().items()}
    state["out.bias"][cls] = margin
    return model.load_state_dict(state).freeze()


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Datasets
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def synth_config(**overrides):
    values = dict(kind="synthetic", synth_classes=3, synth_samples=240, synth_length=16, synth_noise=0.3,
                  synth_seed=0)
    values.update(overrides)
    return du.DataConfig(**values)


@pytest.fixture
def synth_splits():
    return du.load_dataset(synth_config())


def write_fake_har(root, n_train=60, n_test=12, seed=0):
    """ UCI HAR layout with random signals and balanced labels 1..6 """
    rng = np.random.default_rng(seed)
    root = Path(root)
    for split, rows in (("train", n_train), ("test", n_test)):
        folder = root / split / hp.SIGNAL_DIR
        folder.mkdir(parents=True)
        for signal in hp.SIGNALS:
            table = rng.normal(size=(rows, hp.WINDOW_LENGTH))
            lines = ["  " + " ".join(f"{v: .7e}" for v in row) for row in table]
            hp.signal_path(root, split, signal).write_text("\n".join(lines) + "\n")
        labels = np.arange(rows) % hp.N_CLASSES + 1
        hp.label_path(root, split).write_text("\n".join(str(v) for v in labels) + "\n")
    return root


@pytest.fixture
def fake_har(tmp_path):
    return write_fake_har(tmp_path / hp.ARCHIVE_DIR)


def write_ucr(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join("\t".join(str(v) for v in row) for row in rows) + "\n")
    return path
