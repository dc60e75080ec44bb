import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amdistill.data import (CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, DataError, MixupConfig,
                            iterate_batches, load_cifar10, mixup_batch, one_hot, pad_crop,
                            read_cifar10_batch, synth_dataset, write_cifar10_batch)


@pytest.fixture
def two_records(rng):
    images = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    return images, np.array([3, 7])


def _fake_cifar(root, rng, per_file=4):
    root.mkdir(parents=True, exist_ok=True)
    for name in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]:
        imgs = rng.integers(0, 256, size=(per_file, 3, 32, 32), dtype=np.uint8)
        write_cifar10_batch(root / name, imgs, rng.integers(0, 10, per_file))
    return root


class TestCifarFormat:
    def test_round_trip(self, tmp_path, two_records):
        images, labels = two_records
        path = tmp_path / "batch.bin"
        write_cifar10_batch(path, images, labels)
        assert path.stat().st_size == 2 * CIFAR_RECORD
        got_x, got_y = read_cifar10_batch(path, expected_records=None)
        np.testing.assert_array_equal(got_x, images)
        np.testing.assert_array_equal(got_y, labels)

    def test_plane_layout(self, tmp_path):
        img = np.zeros((1, 3, 32, 32), dtype=np.uint8)
        img[0, 1, 0, 2] = 200
        path = tmp_path / "one.bin"
        write_cifar10_batch(path, img, [5])
        raw = path.read_bytes()
        assert raw[0] == 5
        assert raw[1 + 1024 + 2] == 200

    def test_truncated_file_names_path_and_size(self, tmp_path, two_records):
        path = tmp_path / "data_batch_1.bin"
        write_cifar10_batch(path, *two_records)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(DataError) as err:
            read_cifar10_batch(path, expected_records=2)
        assert str(path) in str(err.value) and str(2 * CIFAR_RECORD - 5) in str(err.value)

    def test_ragged_length(self, tmp_path):
        path = tmp_path / "b.bin"
        path.write_bytes(b"\x00" * (CIFAR_RECORD + 1))
        with pytest.raises(DataError):
            read_cifar10_batch(path, expected_records=None)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            read_cifar10_batch(tmp_path / "nope.bin")


class TestLoadCifar:
    def test_fake_directory(self, tmp_path, rng):
        root = _fake_cifar(tmp_path / "cifar", rng)
        train, test = load_cifar10(root, expected_records=4)
        assert train.images.shape == (20, 3, 32, 32) and test.images.shape == (4, 3, 32, 32)
        np.testing.assert_allclose(train.images.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(train.images.std(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_nested_directory_and_stats_cache(self, tmp_path, rng):
        _fake_cifar(tmp_path / "root" / "cifar-10-batches-bin", rng)
        cache = tmp_path / "cache"
        a, _ = load_cifar10(tmp_path / "root", cache_dir=cache, expected_records=4)
        assert (cache / "cifar10_norm_stats.json").exists()
        b, _ = load_cifar10(tmp_path / "root", cache_dir=cache, expected_records=4)
        np.testing.assert_allclose(a.images, b.images, rtol=1e-6)

    def test_missing_root_named(self, tmp_path):
        with pytest.raises(DataError, match=str(tmp_path / "absent")):
            load_cifar10(tmp_path / "absent")


class TestSynth:
    def test_deterministic(self):
        a = synth_dataset(num_classes=3, n_per_class=5, image_size=8, seed=4)
        b = synth_dataset(num_classes=3, n_per_class=5, image_size=8, seed=4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_splits_and_seeds_differ(self):
        kw = dict(num_classes=3, n_per_class=5, image_size=8)
        train = synth_dataset(split="train", **kw)
        assert not np.array_equal(train.images, synth_dataset(split="test", **kw).images)
        assert not np.array_equal(train.images, synth_dataset(seed=1, **kw).images)

    def test_balanced_labels(self):
        ds = synth_dataset(num_classes=6, n_per_class=7, image_size=8)
        assert np.bincount(ds.labels).tolist() == [7] * 6
        assert ds.image_shape == (3, 8, 8)

    def test_noise_free_classes_are_constant(self):
        ds = synth_dataset(num_classes=3, n_per_class=4, image_size=8, noise=0, distractors=0, jitter=False)
        for c in range(3):
            imgs = ds.images[ds.labels == c]
            assert np.all(imgs == imgs[0])

    def test_two_class_linear_probe_separates(self):
        ds = synth_dataset(num_classes=2, n_per_class=40, image_size=8, noise=0.2, distractors=0,
                           jitter=False, dtype=np.float64)
        x = np.c_[ds.images.reshape(len(ds), -1), np.ones(len(ds))]
        w, *_ = np.linalg.lstsq(x, 2.0 * ds.labels - 1, rcond=None)
        assert np.mean((x @ w > 0) == ds.labels) == 1.0

    @pytest.mark.parametrize("kw", [{"num_classes": 1}, {"patch": 20}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            synth_dataset(image_size=8, **kw)


class TestBatching:
    def test_sequential_order(self, tiny_data):
        train = tiny_data[0]
        ys = np.concatenate([y for _, y in iterate_batches(train, 5)])
        np.testing.assert_array_equal(ys, train.labels)

    def test_shuffle_is_seeded_permutation(self, tiny_data):
        train = tiny_data[0]
        run = lambda s: np.concatenate([i for _, _, i in iterate_batches(
            train, 7, shuffle=True, rng=np.random.default_rng(s), with_index=True)])
        assert sorted(run(0)) == list(range(len(train)))
        np.testing.assert_array_equal(run(0), run(0))
        assert not np.array_equal(run(0), run(1))

    def test_shuffle_needs_rng(self, tiny_data):
        with pytest.raises(ValueError):
            next(iterate_batches(tiny_data[0], 4, shuffle=True))

    def test_last_batch_partial(self, tiny_data):
        sizes = [len(y) for _, y in iterate_batches(tiny_data[0], 20)]
        assert sizes == [20, 20, 8]

    def test_pad_crop_zero_offset_possible(self, rng):
        x = rng.normal(size=(50, 1, 4, 4))
        out = pad_crop(x, 2, rng)
        assert out.shape == x.shape
        assert any(np.array_equal(o, i) for o, i in zip(out, x))


class TestMixup:
    def test_lambda_one_is_identity(self, rng):
        x, y = rng.normal(size=(6, 3, 4, 4)), one_hot(rng.integers(0, 5, 6), 5)
        xm, ym, meta = mixup_batch(x, y, MixupConfig(), rng, lam=1.0)
        np.testing.assert_array_equal(xm, x)
        np.testing.assert_array_equal(ym, y)

    def test_lambda_half_averages_pairs(self, rng):
        x, y = rng.normal(size=(6, 3, 4, 4)), one_hot(np.arange(6) % 3, 3, np.float64)
        xm, ym, meta = mixup_batch(x, y, MixupConfig(), rng, lam=0.5)
        p = meta["perm"]
        np.testing.assert_allclose(xm, 0.5 * (x + x[p]))
        np.testing.assert_allclose(ym, 0.5 * (y + y[p]))

    def test_beta_draws_mean(self):
        rng = np.random.default_rng(0)
        x, y = np.zeros((2, 1, 1, 1)), np.zeros((2, 2))
        lams = [mixup_batch(x, y, MixupConfig(alpha=0.2), rng)[2]["lam"] for _ in range(10_000)]
        assert abs(np.mean(lams) - 0.5) < 0.02

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.0, 1.0), st.integers(0, 2**16))
    def test_stays_in_range(self, lam, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 2, size=(5, 2, 3, 3))
        y = one_hot(rng.integers(0, 4, 5), 4, np.float64)
        xm, ym, _ = mixup_batch(x, y, MixupConfig(), rng, lam=lam)
        assert xm.min() >= x.min() - 1e-12 and xm.max() <= x.max() + 1e-12
        np.testing.assert_allclose(ym.sum(axis=1), 1.0)

    def test_needs_two_samples(self, rng):
        with pytest.raises(ValueError):
            mixup_batch(np.zeros((1, 1, 2, 2)), np.zeros((1, 2)), MixupConfig(), rng)

    def test_alpha_validated(self):
        with pytest.raises(ValueError):
            MixupConfig(alpha=0).validate()
