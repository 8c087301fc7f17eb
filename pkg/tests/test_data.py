import numpy as np
import pytest

from dfl import data as D


def _fake_cifar10(root, rng):
    base = root / "cifar-10-batches-bin"
    base.mkdir()
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        labels = np.tile(np.arange(10, dtype=np.uint8), 1000)
        pix = rng.integers(0, 256, size=(10000, D.CIFAR_PIXELS), dtype=np.uint8)
        (base / name).write_bytes(np.concatenate([labels[:, None], pix], axis=1).tobytes())
    return base


def _fake_cifar100(root, rng):
    base = root / "cifar-100-binary"
    base.mkdir()
    for name, n in (("train.bin", 50000), ("test.bin", 10000)):
        fine = np.tile(np.arange(100, dtype=np.uint8), n // 100)
        coarse = fine // 5
        pix = rng.integers(0, 256, size=(n, D.CIFAR_PIXELS), dtype=np.uint8)
        (base / name).write_bytes(np.concatenate([coarse[:, None], fine[:, None], pix], axis=1).tobytes())
    return base


def test_cifar10_sizes(tmp_path, rng):
    _fake_cifar10(tmp_path, rng)
    train, test = D.load_cifar(tmp_path, "cifar10")
    assert len(train) == 50000 and len(test) == 10000 and train.classes == 10
    assert np.bincount(train.labels).tolist() == [5000] * 10
    assert np.bincount(test.labels).tolist() == [1000] * 10
    assert train.images.shape == (50000, 3, 32, 32)
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0


def test_cifar100_uses_fine_labels(tmp_path, rng):
    _fake_cifar100(tmp_path, rng)
    train, test = D.load_cifar(tmp_path, "cifar100")
    assert train.classes == 100 and len(train) == 50000 and len(test) == 10000
    assert np.bincount(train.labels).tolist() == [500] * 100
    assert train.labels.max() == 99


def test_cifar_pixel_layout(tmp_path):
    rec = np.zeros(1 + D.CIFAR_PIXELS, dtype=np.uint8)
    rec[0] = 7
    rec[1] = 255                 # R plane, row 0 col 0
    rec[1 + 1024 + 33] = 51      # G plane, row 1 col 1
    p = tmp_path / "one.bin"
    p.write_bytes(rec.tobytes())
    ds = D.read_cifar_records(p)
    assert ds.labels.tolist() == [7]
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 1, 1, 1] == 51 / 255


def test_truncated_file_names_sizes(tmp_path, rng):
    base = _fake_cifar10(tmp_path, rng)
    f = base / "data_batch_3.bin"
    f.write_bytes(f.read_bytes()[:-100])
    with pytest.raises(D.CorruptFileError, match=f"expected {10000 * 3073} bytes, got {10000 * 3073 - 100}"):
        D.load_cifar(tmp_path, "cifar10")


def test_bad_label_reports_offset(tmp_path):
    recs = np.zeros((3, 1 + D.CIFAR_PIXELS), dtype=np.uint8)
    recs[2, 0] = 12
    p = tmp_path / "bad.bin"
    p.write_bytes(recs.tobytes())
    with pytest.raises(D.CorruptFileError, match=f"byte offset {2 * 3073}"):
        D.read_cifar_records(p)


@pytest.mark.parametrize("variant", ["cifar10", "cifar100"])
def test_synthetic_round_trip(tmp_path, variant):
    ds = D.synthetic_blobs(20, 4, image_shape=(3, 32, 32), spread=0.3, seed=2)
    path = tmp_path / "syn.bin"
    D.write_cifar_records(ds, path, variant)
    back = D.read_cifar_records(path, variant)
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels)


# ---------------------------------------------------------------- synthetic


def test_synthetic_size():
    assert len(D.synthetic_blobs(200, 3, dims=2, seed=0)) == 600


def test_synthetic_deterministic():
    a = D.synthetic_blobs(10, 3, image_shape=(3, 8, 8), seed=4)
    b = D.synthetic_blobs(10, 3, image_shape=(3, 8, 8), seed=4)
    assert a.images.tobytes() == b.images.tobytes()


@pytest.mark.parametrize("kw", [dict(dims=5), dict(image_shape=(3, 8, 8))])
def test_zero_spread_nearest_centroid_is_perfect(kw):
    ds = D.synthetic_blobs(30, 4, spread=0.0, seed=9, **kw)
    flat = ds.images.reshape(len(ds), -1)
    centroids = np.stack([flat[ds.labels == k].mean(axis=0) for k in range(4)])
    pred = np.argmin(((flat[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == ds.labels).all()


def test_train_test_share_centers():
    tr = D.synthetic_blobs(5, 3, dims=4, spread=0.0, seed=1)
    te = D.synthetic_blobs(5, 3, dims=4, spread=0.0, seed=1, split="test")
    np.testing.assert_array_equal(tr.images, te.images)
    noisy_tr = D.synthetic_blobs(5, 3, dims=4, spread=0.1, seed=1)
    noisy_te = D.synthetic_blobs(5, 3, dims=4, spread=0.1, seed=1, split="test")
    assert not np.array_equal(noisy_tr.images, noisy_te.images)


def test_need_two_classes():
    with pytest.raises(ValueError):
        D.synthetic_blobs(5, 1, dims=2)


# ---------------------------------------------------------------- batching


@pytest.fixture
def blobs():
    return D.synthetic_blobs(200, 3, dims=2, seed=0)


def test_batch_sizes(blobs):
    sizes = [len(y) for _, y in D.iterate_epoch(blobs, D.BatchPlan(128, seed=1), 0)]
    assert sizes == [128, 128, 128, 128, 88]


def test_every_sample_once(blobs):
    plan = D.BatchPlan(128, seed=1)
    xs = np.concatenate([x for x, _ in D.iterate_epoch(blobs, plan, 3)])
    assert sorted(map(tuple, xs)) == sorted(map(tuple, blobs.images))


def test_shuffle_determinism_and_reshuffle(blobs):
    plan = D.BatchPlan(64, seed=5)
    a = [y.tolist() for _, y in D.iterate_epoch(blobs, plan, 0)]
    b = [y.tolist() for _, y in D.iterate_epoch(blobs, plan, 0)]
    c = [y.tolist() for _, y in D.iterate_epoch(blobs, plan, 1)]
    assert a == b and a != c


def test_augmented_stream_deterministic():
    ds = D.synthetic_blobs(20, 3, image_shape=(3, 8, 8), seed=0)
    plan = D.BatchPlan(16, seed=3, crop_pad4=True, hflip=True)
    a = [x.tobytes() for x, _ in D.iterate_epoch(ds, plan, 2)]
    b = [x.tobytes() for x, _ in D.iterate_epoch(ds, plan, 2)]
    assert a == b


def test_test_split_not_augmented():
    ds = D.synthetic_blobs(10, 3, image_shape=(3, 8, 8), seed=0, split="test")
    plan = D.BatchPlan(64, seed=3, crop_pad4=True, hflip=True)
    (x, _), = list(D.iterate_epoch(ds, plan, 0, shuffle=False))
    np.testing.assert_array_equal(x, ds.images)


def test_normalization_statistics():
    ds = D.synthetic_blobs(50, 3, image_shape=(3, 8, 8), spread=0.2, seed=0)
    mean, std = D.channel_stats(ds)
    z = D.normalize(ds.images, mean, std)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1.0, atol=1e-6)


# ---------------------------------------------------------------- augmentation


def test_augment_off_is_identity(rng):
    x = rng.random((4, 3, 8, 8))
    np.testing.assert_array_equal(D.augment(x, rng=np.random.default_rng(0)), x)


def test_hflip_twice_is_identity(rng):
    x = rng.random((6, 3, 8, 8))
    once = D.augment(x, hflip=True, rng=np.random.default_rng(7))
    twice = D.augment(once, hflip=True, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(twice, x)


def test_crop_offsets_in_range(rng):
    x = rng.random((200, 3, 8, 8))
    out, offsets, _ = D.augment(x, crop_pad4=True, rng=np.random.default_rng(1), return_params=True)
    assert out.shape == x.shape
    assert offsets.min() >= 0 and offsets.max() <= 8


def test_crop_center_offset_is_identity(rng):
    x = rng.random((1, 3, 8, 8))
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)), mode="reflect")
    np.testing.assert_array_equal(padded[:, :, 4:12, 4:12], x)
