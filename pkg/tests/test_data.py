import shutil

import numpy as np
import pytest

from cmlsnn.data import (DATA_DIR_ENV, DatasetFormatError, SynthSpec, cifar10_counts, gen_synthetic, load_cifar10,
                         nearest_template_accuracy, read_cifar_batch, synthetic_templates)

from conftest import write_cifar_batch


# --- synthetic --------------------------------------------------------------

def test_synth_deterministic():
    a = gen_synthetic(SynthSpec(noise=0.3, seed=5))
    b = gen_synthetic(SynthSpec(noise=0.3, seed=5))
    np.testing.assert_array_equal(a.x_train, b.x_train)
    np.testing.assert_array_equal(a.x_test, b.x_test)
    np.testing.assert_array_equal(a.y_train, b.y_train)
    c = gen_synthetic(SynthSpec(noise=0.3, seed=6))
    assert not np.array_equal(a.x_train, c.x_train)


def test_synth_shapes_and_balance():
    spec = SynthSpec(n_classes=5, image_size=12, samples_per_class=7, test_per_class=3, channels=2, block=3)
    ds = gen_synthetic(spec)
    assert ds.x_train.shape == (35, 2, 12, 12)
    assert ds.x_test.shape == (15, 2, 12, 12)
    assert np.bincount(ds.y_train).tolist() == [7] * 5
    assert ds.n_classes == 5 and ds.image_shape == (2, 12, 12)


def test_noise_free_is_perfectly_separable():
    spec = SynthSpec(noise=0.0)
    ds = gen_synthetic(spec)
    t = synthetic_templates(spec)
    assert nearest_template_accuracy(ds.x_train, ds.y_train, t) == 1.0
    assert nearest_template_accuracy(ds.x_test, ds.y_test, t) == 1.0


def test_noise_half_difficulty_recorded():
    spec = SynthSpec(n_classes=4, image_size=8, noise=0.5, samples_per_class=200, block=2)
    ds = gen_synthetic(spec)
    acc = nearest_template_accuracy(ds.x_train, ds.y_train, synthetic_templates(spec))
    # measured 1.0: unit-variance templates stay far apart relative to noise 0.5 at 64 pixels
    assert 0.9 <= acc <= 1.0
    loud = SynthSpec(n_classes=4, image_size=8, noise=4.0, samples_per_class=200, block=2)
    dsl = gen_synthetic(loud)
    assert nearest_template_accuracy(dsl.x_train, dsl.y_train, synthetic_templates(loud)) < acc


# --- CIFAR-10 binary format -------------------------------------------------

def test_full_counts(fake_cifar):
    assert cifar10_counts(fake_cifar) == {"train": 50_000, "test": 10_000}


def test_first_label_in_range(fake_cifar):
    _, labels = read_cifar_batch(fake_cifar / "cifar-10-batches-bin" / "data_batch_1.bin")
    assert 0 <= labels[0] <= 9
    raw = (fake_cifar / "cifar-10-batches-bin" / "data_batch_1.bin").read_bytes()
    assert raw[0] == labels[0]


def test_subset_balanced(fake_cifar):
    ds = load_cifar10(fake_cifar, per_class=100, test_per_class=20)
    assert ds.x_train.shape == (1000, 3, 32, 32)
    assert ds.x_test.shape == (200, 3, 32, 32)
    assert np.bincount(ds.y_train).tolist() == [100] * 10
    np.testing.assert_allclose(ds.x_train.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(ds.x_train.std(axis=(0, 2, 3)), 1, atol=1e-6)


def test_pixel_layout_is_chw(tmp_path, rng):
    labels = np.arange(10_000) % 10
    write_cifar_batch(tmp_path / "b.bin", labels, rng)
    x, y = read_cifar_batch(tmp_path / "b.bin")
    raw = np.fromfile(tmp_path / "b.bin", dtype=np.uint8).reshape(10_000, 3073)
    # red plane first, row-major within the plane
    assert x[3, 0, 0, 5] == raw[3, 1 + 5]
    assert x[3, 1, 0, 0] == raw[3, 1 + 1024]
    assert x[3, 2, 31, 31] == raw[3, 3072]
    np.testing.assert_array_equal(y, labels)


def test_env_var_default(fake_cifar, monkeypatch):
    monkeypatch.setenv(DATA_DIR_ENV, str(fake_cifar))
    assert cifar10_counts()["test"] == 10_000


def test_missing_dir_message(monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    with pytest.raises(FileNotFoundError, match=DATA_DIR_ENV):
        load_cifar10()


def test_missing_file_named(fake_cifar, tmp_path):
    broken = tmp_path / "c"
    shutil.copytree(fake_cifar / "cifar-10-batches-bin", broken)
    (broken / "data_batch_3.bin").unlink()
    with pytest.raises(FileNotFoundError, match="data_batch_3.bin"):
        load_cifar10(broken, per_class=1)


def test_truncated_file(tmp_path, rng):
    write_cifar_batch(tmp_path / "t.bin", np.arange(10_000) % 10, rng)
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-100])
    with pytest.raises(DatasetFormatError, match="t.bin.*truncated"):
        read_cifar_batch(tmp_path / "t.bin")


def test_wrong_record_count(tmp_path, rng):
    write_cifar_batch(tmp_path / "short.bin", np.arange(9_999) % 10, rng)
    with pytest.raises(DatasetFormatError, match="expected 10000 records, found 9999"):
        read_cifar_batch(tmp_path / "short.bin")


def test_bad_label_byte(tmp_path, rng):
    labels = np.arange(10_000) % 10
    labels[17] = 42
    write_cifar_batch(tmp_path / "l.bin", labels, rng)
    with pytest.raises(DatasetFormatError, match="label byte 42"):
        read_cifar_batch(tmp_path / "l.bin")


def test_subset_larger_than_class(fake_cifar):
    with pytest.raises(DatasetFormatError, match="requested"):
        load_cifar10(fake_cifar, per_class=5001)
