import numpy as np
import pytest

import data_utils as du
import har_params as hp
from conftest import synth_config, write_fake_har, write_ucr
from data_utils import IngestionError, SplitSpec, SynthSpec
from tensor_utils import ConfigError, DataError


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# UCI HAR
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_har_loader_shapes_and_labels(fake_har):
    train, test = du.load_uci_har(fake_har)
    assert train.samples.shape == (60, hp.N_CHANNELS, hp.WINDOW_LENGTH)
    assert test.samples.shape == (12, hp.N_CHANNELS, hp.WINDOW_LENGTH)
    assert train.class_count == 6
    assert train.labels.min() == 0 and train.labels.max() == 5
    assert train.channel_names == hp.SIGNALS


def test_har_loader_reads_channels_in_order(fake_har):
    train, _ = du.load_uci_har(fake_har)
    first_row = np.loadtxt(hp.signal_path(fake_har, "train", "body_gyro_y"))[0]
    assert np.allclose(train.samples[0, hp.SIGNALS.index("body_gyro_y")], first_row, atol=1e-6)


def test_har_loader_accepts_the_parent_directory(fake_har):
    train, _ = du.load_uci_har(fake_har.parent)
    assert len(train) == 60


def test_har_loader_names_a_missing_file(fake_har):
    missing = hp.signal_path(fake_har, "test", "total_acc_z")
    missing.unlink()
    with pytest.raises(IngestionError, match="total_acc_z_test.txt"):
        du.load_uci_har(fake_har)


def test_har_loader_rejects_row_count_mismatch(fake_har):
    path = hp.signal_path(fake_har, "train", "body_acc_y")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(IngestionError, match="59 rows"):
        du.load_uci_har(fake_har)


def test_har_loader_rejects_wrong_window_length(tmp_path):
    root = write_fake_har(tmp_path / "har", n_train=6, n_test=6)
    path = hp.signal_path(root, "train", "body_acc_x")
    path.write_text("1.0 2.0 3.0\n" * 6)
    with pytest.raises(IngestionError, match="128 columns"):
        du.load_uci_har(root)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# UCR archive
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_ucr_single_row(tmp_path):
    dataset = du.load_ucr_tsv(write_ucr(tmp_path / "one.tsv", [[2, 0.0, 1.0]]))
    assert dataset.samples.shape == (1, 1, 2)
    assert dataset.labels.tolist() == [0]
    assert np.array_equal(dataset.samples[0, 0], [0.0, 1.0])


def test_ucr_labels_map_in_ascending_order(tmp_path):
    dataset = du.load_ucr_tsv(write_ucr(tmp_path / "x.tsv", [[1, 0.5, 0.5], [-1, 0.1, 0.2], [1, 0.0, 0.0]]))
    assert dataset.labels.tolist() == [1, 0, 1]
    assert dataset.label_values == (-1.0, 1.0)
    assert dataset.class_count == 2


def test_ucr_ragged_row_is_reported_with_its_number(tmp_path):
    path = tmp_path / "ragged.tsv"
    path.write_text("1\t0.1\t0.2\n2\t0.3\n")
    with pytest.raises(IngestionError, match="row 2"):
        du.load_ucr_tsv(path)


def test_ucr_rejects_missing_values(tmp_path):
    path = tmp_path / "nan.tsv"
    path.write_text("1\t0.1\tNaN\n")
    with pytest.raises(IngestionError, match="missing values"):
        du.load_ucr_tsv(path)


def test_ucr_accepts_comma_separated_files(tmp_path):
    path = tmp_path / "old.csv"
    path.write_text("3,1.0,2.0,3.0\n4,4.0,5.0,6.0\n")
    dataset = du.load_ucr_tsv(path)
    assert dataset.samples.shape == (2, 1, 3)
    assert dataset.labels.tolist() == [0, 1]


def test_ucr_pair_shares_the_train_mapping(tmp_path):
    write_ucr(tmp_path / "Toy" / "Toy_TRAIN.tsv", [[5, 0.0, 1.0], [7, 1.0, 0.0]])
    write_ucr(tmp_path / "Toy" / "Toy_TEST.tsv", [[7, 0.5, 0.5]])
    train, test = du.load_ucr_pair(tmp_path, "Toy")
    assert test.labels.tolist() == [1]
    assert test.class_count == train.class_count == 2


def test_ucr_test_label_unknown_to_train(tmp_path):
    write_ucr(tmp_path / "Toy" / "Toy_TRAIN.tsv", [[5, 0.0, 1.0]])
    write_ucr(tmp_path / "Toy" / "Toy_TEST.tsv", [[9, 0.5, 0.5]])
    with pytest.raises(IngestionError, match="reference split"):
        du.load_ucr_pair(tmp_path, "Toy")


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Synthetic corpus
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_synthetic_is_reproducible():
    spec = SynthSpec(classes=4, channels=2, length=32, samples=100, noise=0.5)
    a, b = du.synth_generate(spec, 3), du.synth_generate(spec, 3)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.samples, du.synth_generate(spec, 4).samples)
    assert a.samples.shape == (100, 2, 32)
    assert np.bincount(a.labels).tolist() == [25, 25, 25, 25]


def test_noise_free_classes_are_separable_by_frequency():
    spec = SynthSpec(classes=3, channels=1, length=64, samples=30, noise=0.0)
    data = du.synth_generate(spec, 0)
    spectrum = np.abs(np.fft.rfft(data.samples[:, 0], axis=1))
    assert np.array_equal(spectrum.argmax(axis=1), data.labels + 1)


def test_synthetic_needs_two_classes():
    with pytest.raises(ConfigError, match="classes"):
        SynthSpec(classes=1)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Standardization, splits, batches
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_standardize_centres_each_channel():
    data = du.synth_generate(SynthSpec(channels=3, samples=200, noise=1.0), 0)
    data = du.TimeSeriesDataset(data.samples * np.array([1.0, 5.0, 0.1])[None, :, None] + 2.0, data.labels,
                                data.class_count)
    scaled = du.standardize(data, du.fit_norm_stats(data))
    assert np.allclose(scaled.samples.mean(axis=(0, 2)), 0.0, atol=1e-5)
    assert np.allclose(scaled.samples.std(axis=(0, 2)), 1.0, atol=1e-4)


def test_constant_channel_standardizes_to_zero():
    samples = np.ones((5, 1, 4), dtype=np.float32) * 7.0
    data = du.TimeSeriesDataset(samples, np.zeros(5), 1)
    scaled = du.standardize(data, du.fit_norm_stats(data))
    assert np.array_equal(scaled.samples, np.zeros_like(samples))


def test_standardize_is_idempotent_on_its_output():
    data = du.synth_generate(SynthSpec(samples=50), 1)
    once = du.standardize(data, du.fit_norm_stats(data))
    twice = du.standardize(once, du.fit_norm_stats(once))
    assert np.allclose(once.samples, twice.samples, atol=1e-5)


def test_split_is_stratified_and_deterministic():
    data = du.synth_generate(SynthSpec(classes=4, samples=400), 0)
    train, val = du.split_dataset(data, SplitSpec((0.9, 0.1), seed=3))
    assert (len(train), len(val)) == (360, 40)
    assert np.bincount(val.labels).tolist() == [10, 10, 10, 10]
    again, _ = du.split_dataset(data, SplitSpec((0.9, 0.1), seed=3))
    assert np.array_equal(train.samples, again.samples)


def test_three_way_split():
    data = du.synth_generate(SynthSpec(classes=2, samples=100), 0)
    parts = du.split_dataset(data, SplitSpec((0.6, 0.2, 0.2), seed=0))
    assert [len(p) for p in parts] == [60, 20, 20]
    ids = np.concatenate([np.flatnonzero((data.samples[:, None] == p.samples[None]).all(axis=(2, 3)).any(axis=1))
                          for p in parts])
    assert sorted(ids.tolist()) == list(range(100))


def test_split_spec_validation():
    with pytest.raises(ConfigError, match="sum to 1"):
        SplitSpec((0.5, 0.4))
    with pytest.raises(ConfigError):
        SplitSpec((1.0,))


def test_stratified_split_needs_enough_samples():
    data = du.synth_generate(SynthSpec(classes=4, samples=8), 0)
    with pytest.raises(DataError, match="cannot split"):
        du.split_dataset(data, SplitSpec((0.9, 0.1)))


def test_iterate_batches_covers_every_sample_once():
    data = du.synth_generate(SynthSpec(samples=23), 0)
    batches = list(du.iterate_batches(data, 5, shuffle_seed=7))
    ids = np.concatenate([b[0] for b in batches])
    assert sorted(ids.tolist()) == list(range(23))
    assert [len(b[0]) for b in batches] == [5, 5, 5, 5, 3]
    for batch_ids, x, y in batches:
        assert np.array_equal(x, data.samples[batch_ids])
        assert np.array_equal(y, data.labels[batch_ids])
    again = np.concatenate([b[0] for b in du.iterate_batches(data, 5, shuffle_seed=7)])
    assert np.array_equal(ids, again)


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(DataError):
        du.TimeSeriesDataset(np.zeros((2, 1, 3)), [0, 3], 3)


# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# Config-driven loading
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
def test_synthetic_splits_use_train_statistics_only():
    splits = du.load_dataset(synth_config())
    assert (len(splits.train), len(splits.val), len(splits.test)) == (162, 18, 60)
    stats = splits.train.norm_stats
    assert stats is splits.test.norm_stats
    assert np.allclose(splits.train.samples.mean(axis=(0, 2)), 0.0, atol=1e-5)
    # the held-out parts are scaled with the same statistics, so their mean is only near zero
    assert not np.allclose(splits.test.samples.mean(axis=(0, 2)), 0.0, atol=1e-7)


def test_har_via_config_and_environment(fake_har, monkeypatch):
    monkeypatch.setenv(du.DATA_DIR_ENV, str(fake_har.parent))
    splits = du.load_dataset(du.DataConfig(kind="har"))
    assert (len(splits.train), len(splits.val), len(splits.test)) == (54, 6, 12)
    assert np.bincount(splits.val.labels).tolist() == [1] * 6


def test_missing_dataset_path(monkeypatch):
    monkeypatch.delenv(du.DATA_DIR_ENV, raising=False)
    with pytest.raises(IngestionError, match=du.DATA_DIR_ENV):
        du.load_dataset(du.DataConfig(kind="har"))


def test_ucr_config_needs_a_name():
    with pytest.raises(ConfigError, match="data.name"):
        du.DataConfig(kind="ucr")
