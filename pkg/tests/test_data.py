import numpy as np
import pytest

from openset.data import (
    DataFormatError,
    Dataset,
    SyntheticConfig,
    generate_synthetic,
    load_cache,
    load_idx,
    load_image_dir,
    preprocess,
    sample_split,
    save_cache,
    write_idx,
    write_pgm,
)


def make_byte_dataset(rng, m=12, h=8, w=8, classes=3):
    images = rng.integers(0, 256, size=(m, 1, h, w)).astype(float)
    labels = np.arange(m) % classes
    return Dataset(images, labels)


class TestIdx:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        d = make_byte_dataset(rng)
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        write_idx(d, ip, lp)
        loaded = load_idx(ip, lp)
        assert loaded.images.shape == (12, 1, 8, 8)
        assert np.array_equal(loaded.images, d.images)
        assert np.array_equal(loaded.labels, d.labels)

    def test_header_fields(self, tmp_path):
        rng = np.random.default_rng(1)
        d = make_byte_dataset(rng, m=5, h=28, w=28)
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        write_idx(d, ip, lp)
        raw = ip.read_bytes()
        # big-endian magic 0x00000803, then count/rows/cols
        assert raw[:4] == b"\x00\x00\x08\x03"
        assert int.from_bytes(raw[4:8], "big") == 5
        assert int.from_bytes(raw[8:12], "big") == 28

    def test_wrong_magic(self, tmp_path):
        ip = tmp_path / "bad.idx"
        ip.write_bytes(b"\x00\x00\x08\x04" + b"\x00" * 12)
        lp = tmp_path / "lab.idx"
        lp.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x00")
        with pytest.raises(DataFormatError) as e:
            load_idx(ip, lp)
        assert "0x00000803" in str(e.value)

    def test_truncated_payload(self, tmp_path):
        import struct

        ip = tmp_path / "img.idx"
        ip.write_bytes(struct.pack(">IIII", 0x803, 10, 8, 8) + b"\x00" * 17)
        lp = tmp_path / "lab.idx"
        lp.write_bytes(struct.pack(">II", 0x801, 10) + b"\x00" * 10)
        with pytest.raises(DataFormatError) as e:
            load_idx(ip, lp)
        assert "truncated" in str(e.value)

    def test_count_mismatch(self, tmp_path):
        import struct

        ip = tmp_path / "img.idx"
        ip.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 8)
        lp = tmp_path / "lab.idx"
        lp.write_bytes(struct.pack(">II", 0x801, 3) + b"\x00" * 3)
        with pytest.raises(DataFormatError):
            load_idx(ip, lp)


class TestImageDir:
    def _write_tree(self, root, classes=3, per_class=2, color=False):
        for c in range(classes):
            d = root / f"class{c}"
            d.mkdir()
            for i in range(per_class):
                img = np.full((4, 4), 40 * c + i, dtype=float)
                if color:
                    path = d / f"{i}.ppm"
                    data = np.stack([img, img, img]).astype(np.uint8)
                    with open(path, "wb") as f:
                        f.write(b"P6\n4 4\n255\n")
                        f.write(np.transpose(data, (1, 2, 0)).tobytes())
                else:
                    write_pgm(d / f"{i}.pgm", img)

    def test_basic_layout(self, tmp_path):
        self._write_tree(tmp_path)
        d = load_image_dir(tmp_path)
        assert len(d) == 6
        assert sorted(np.unique(d.labels)) == [0, 1, 2]
        assert d.class_names == ["class0", "class1", "class2"]

    def test_p6_color(self, tmp_path):
        self._write_tree(tmp_path, color=True)
        d = load_image_dir(tmp_path)
        assert d.images.shape == (6, 3, 4, 4)

    def test_empty_class_dir(self, tmp_path):
        (tmp_path / "classA").mkdir()
        with pytest.raises(DataFormatError) as e:
            load_image_dir(tmp_path)
        assert "classA" in str(e.value)

    def test_pgm_round_trip(self, tmp_path):
        from openset.data import _read_netpbm

        img = np.arange(12, dtype=float).reshape(3, 4) * 20
        write_pgm(tmp_path / "x.pgm", img)
        back = _read_netpbm(tmp_path / "x.pgm")
        assert np.array_equal(back[0], img)


class TestPreprocess:
    def test_linear_map_endpoints(self):
        d = Dataset(np.array([0.0, 255.0, 127.5]).reshape(3, 1, 1, 1), [0, 1, 2])
        out = preprocess(d, target_size=1, grayscale=False)
        assert np.allclose(out.images.reshape(-1), [-1.0, 1.0, 0.0])

    def test_resize_128_to_64(self):
        rng = np.random.default_rng(2)
        d = Dataset(rng.integers(0, 256, size=(2, 3, 128, 128)).astype(float), [0, 1])
        out = preprocess(d, target_size=64, grayscale=True)
        assert out.images.shape == (2, 1, 64, 64)

    def test_gray_input_luminance_identity(self):
        v = 99.0
        d = Dataset(np.full((1, 3, 4, 4), v), [0])
        out = preprocess(d, target_size=4, grayscale=True)
        assert np.allclose(out.images, v / 127.5 - 1.0)

    def test_range_invariant(self):
        rng = np.random.default_rng(3)
        d = Dataset(rng.integers(0, 256, size=(5, 1, 9, 9)).astype(float), np.zeros(5))
        out = preprocess(d, target_size=6)
        assert out.images.min() >= -1.0 and out.images.max() <= 1.0

    def test_zero_target_rejected(self):
        d = Dataset(np.zeros((1, 1, 4, 4)), [0])
        with pytest.raises(ValueError):
            preprocess(d, target_size=0)


@pytest.fixture(scope="module")
def dataset():
    cfg = SyntheticConfig(num_classes=100, samples_per_class=4, image_size=8, seed=5)
    return generate_synthetic(cfg)


class TestSplit:

    def test_coil_style_counts(self, dataset):
        split, train_k, test_k, test_u = sample_split(dataset, n_known=15, seed=0)
        assert len(split.known_classes) == 15
        assert len(split.unknown_classes) == 85
        assert not set(split.known_classes) & set(split.unknown_classes)

    def test_relabel_bijection(self, dataset):
        split, train_k, test_k, _ = sample_split(dataset, n_known=15, seed=1)
        assert sorted(split.relabel.values()) == list(range(15))
        assert set(train_k.labels) <= set(range(15))

    def test_determinism(self, dataset):
        a = sample_split(dataset, n_known=15, seed=7)
        b = sample_split(dataset, n_known=15, seed=7)
        assert a[0] == b[0]
        assert np.array_equal(a[1].images, b[1].images)

    def test_no_unknown_leakage(self, dataset):
        split, train_k, test_k, test_u = sample_split(dataset, n_known=10, seed=2)
        # all unknown-class samples are in test_unknown and none elsewhere
        unknown_total = np.isin(dataset.labels, split.unknown_classes).sum()
        assert len(test_u) == unknown_total
        assert len(train_k) + len(test_k) + len(test_u) == len(dataset)

    def test_n_known_too_large(self, dataset):
        with pytest.raises(ValueError):
            sample_split(dataset, n_known=100, seed=0)


class TestSynthetic:
    def test_shape_contract(self):
        d = generate_synthetic(SyntheticConfig(num_classes=10, samples_per_class=100, image_size=32))
        assert d.images.shape == (1000, 1, 32, 32)
        assert d.num_classes == 10

    def test_zero_noise_identical_within_class(self):
        d = generate_synthetic(SyntheticConfig(num_classes=3, samples_per_class=4, noise=0.0))
        for c in range(3):
            imgs = d.images[d.labels == c]
            assert np.array_equal(imgs[0], imgs[1])

    def test_range(self):
        d = generate_synthetic(SyntheticConfig(num_classes=5, samples_per_class=5, noise=0.5))
        assert d.images.min() >= -1.0 and d.images.max() <= 1.0

    def test_deterministic_per_seed(self):
        a = generate_synthetic(SyntheticConfig(seed=9))
        b = generate_synthetic(SyntheticConfig(seed=9))
        assert np.array_equal(a.images, b.images)


def test_cache_round_trip_byte_identical(tmp_path):
    d = generate_synthetic(SyntheticConfig(num_classes=4, samples_per_class=3, image_size=8))
    p1, p2 = tmp_path / "a.cache", tmp_path / "b.cache"
    save_cache(d, p1)
    loaded = load_cache(p1)
    save_cache(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(loaded.images, d.images)
    assert np.array_equal(loaded.labels, d.labels)
