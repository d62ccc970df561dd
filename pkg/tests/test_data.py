import numpy as np
import pytest
from hypothesis import given, strategies as st

from relmap import data
from relmap.errors import ConfigError, FormatError


def toy_corpus(n_train=200, n_test=50, seed=0):
    r = np.random.default_rng(seed)
    mk = lambda n: data.LabeledDataset(r.integers(0, 256, size=(n, 784)), np.arange(n) % 10)
    return mk(n_train), mk(n_test)


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_idx_round_trip(tmp_path, suffix):
    a = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    p = tmp_path / f"x-idx3-ubyte{suffix}"
    data.write_idx(p, a)
    b = data.read_idx(p)
    assert b.shape == (2, 3, 4) and b.dtype == np.uint8
    assert np.array_equal(a, b)


def test_idx_header_bytes(tmp_path):
    p = tmp_path / "labels"
    data.write_idx(p, np.array([7, 2, 1], dtype=np.uint8))
    raw = p.read_bytes()
    assert raw[:4] == bytes([0, 0, 8, 1])
    assert int.from_bytes(raw[4:8], "big") == 3
    assert raw[8:] == bytes([7, 2, 1])


def test_truncated_idx_names_lengths(tmp_path):
    p = tmp_path / "img"
    data.write_idx(p, np.zeros((4, 2, 2), dtype=np.uint8))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError) as err:
        data.read_idx(p)
    assert "expected 32" in str(err.value) and "got 29" in str(err.value)


def test_bad_magic_and_short_file(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"\x01\x02\x08\x01" + bytes(8))
    with pytest.raises(FormatError, match="magic"):
        data.read_idx(p)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError, match="too short"):
        data.read_idx(p)
    p.write_bytes(b"\x00\x00\x08\x03\x00\x00")
    with pytest.raises(FormatError, match="header"):
        data.read_idx(p)


def test_load_idx_pairs_images_and_labels(tmp_path):
    img = tmp_path / "train-images-idx3-ubyte.gz"
    lab = tmp_path / "train-labels-idx1-ubyte.gz"
    data.write_idx(img, np.full((3, 28, 28), 255, dtype=np.uint8))
    data.write_idx(lab, np.array([0, 5, 9], dtype=np.uint8))
    ds = data.load_idx(img)
    assert len(ds) == 3 and ds.pixels.shape == (3, 784)
    x, y = ds.take(np.arange(3))
    assert np.all(x == 1.0) and list(y) == [0, 5, 9]


def test_mismatched_label_count():
    with pytest.raises(FormatError, match="3 images but 2 labels"):
        data.LabeledDataset(np.zeros((3, 784)), np.zeros(2))


def test_missing_files_point_at_data_dir(tmp_path):
    with pytest.raises(FileNotFoundError, match="RELMAP_DATA_DIR"):
        data.load_mnist(tmp_path)


def test_split_tasks_hold_their_digit_pairs():
    train, test = toy_corpus()
    s = data.make_split(train, test, seed=3)
    assert len(s) == 5
    for k, t in enumerate(s.tasks):
        pair = set(data.SPLIT_PAIRS[k])
        for part in (t.train, t.val, t.test):
            assert set(np.unique(part.labels)) <= pair
        assert len(t.train) + len(t.val) == 40


def test_permuted_tasks_are_pixel_permutations():
    train, test = toy_corpus()
    s = data.make_permuted(train, test, tasks=3, seed=7)
    x0, _ = s.tasks[0].test.take(np.arange(5))
    for k in (1, 2):
        xk, _ = s.tasks[k].test.take(np.arange(5))
        perm = data.task_permutation(7, k)
        assert np.array_equal(xk, x0[:, perm])
        assert not np.array_equal(perm, np.arange(784))
    assert not np.array_equal(data.task_permutation(7, 1), data.task_permutation(7, 2))


def test_streams_are_deterministic():
    train, test = toy_corpus()
    a = list(data.make_split(train, test, seed=1, batch_size=16).stream(2))
    b = list(data.make_split(train, test, seed=1, batch_size=16).stream(2))
    assert len(a) == len(b)
    for p, q in zip(a, b):
        assert np.array_equal(p.x, q.x) and np.array_equal(p.y, q.y)


def test_epoch_batches_cover_each_sample_once():
    train, test = toy_corpus()
    s = data.make_split(train, test, seed=0, batch_size=7)
    ys = np.concatenate([y for _, y in s.epoch_batches(2, 0)])
    assert len(ys) == len(s.tasks[2].train)
    assert sorted(ys) == sorted(s.tasks[2].train.labels)


def test_clean_stream_boundaries():
    train, test = toy_corpus()
    s = data.make_split(train, test, seed=0, batch_size=8)
    prov = s.provenance(1)
    bounds = s.boundaries(1)
    assert len(bounds) == 4
    for t, b in enumerate(bounds, 1):
        assert np.all(prov[b] == t) and np.all(prov[b - 1] == t - 1)


@given(ramp=st.integers(1, 6), batch=st.integers(4, 16))
def test_fuzzy_ramp_preserves_samples_and_mixes_monotonically(ramp, batch):
    # every task spans more than two ramps, so consecutive ramps never overlap
    train, test = toy_corpus(n_train=1200)
    clean = data.make_split(train, test, seed=2, batch_size=batch)
    fuzzy = data.fuzzy_schedule(clean, ramp)
    a, b = clean.provenance(1), fuzzy.provenance(1)
    assert sum(map(len, a)) == sum(map(len, b))
    assert np.array_equal(np.bincount(np.concatenate(a)), np.bincount(np.concatenate(b)))
    # inside each ramp the share of the incoming task never decreases
    for t in range(1, 5):
        shares = [np.mean(p == t) for p in b if t in p and (t - 1) in p]
        assert len(shares) >= 1
        assert all(x <= y for x, y in zip(shares, shares[1:]))


def test_fuzzy_rejects_zero_ramp():
    train, test = toy_corpus()
    with pytest.raises(ConfigError):
        data.fuzzy_schedule(data.make_split(train, test), 0)


def test_limits_subsample():
    train, test = toy_corpus(n_train=500, n_test=100)
    s = data.make_permuted(train, test, tasks=2, train_limit=100, test_limit=30)
    assert len(s.tasks[0].train) + len(s.tasks[0].val) == 100
    assert len(s.tasks[1].test) == 30


def test_real_mnist_shapes(mnist):
    train, test = mnist
    assert len(train) == 60000 and len(test) == 10000
    assert train.pixels.shape == (60000, 784)
    assert np.array_equal(np.unique(train.labels), np.arange(10))
