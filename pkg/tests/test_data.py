import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from galnet.data import (
    Dataset,
    SyntheticConfig,
    generate_synthetic,
    load_attribute_dataset,
    load_dataset,
    random_flip,
    read_annotations,
    read_image_container,
    read_pgm,
    save_dataset,
    write_annotations,
    write_image_container,
    write_pgm,
)
from galnet.errors import ConfigError, ParseError


def agreement(labels, i, j):
    return float(np.mean(labels[:, i] == labels[:, j]))


class TestSynthetic:
    def test_same_seed_bitwise(self):
        cfg = SyntheticConfig(n_train=50, n_eval=20, seed=5)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_splits_differ(self):
        cfg = SyntheticConfig(n_train=50, n_eval=50)
        assert generate_synthetic(cfg).labels.tobytes() != generate_synthetic(cfg, "eval").labels.tobytes()

    def test_default_layout(self):
        cfg = SyntheticConfig(n_train=10, n_eval=10)
        ds = generate_synthetic(cfg)
        assert ds.images.shape == (10, 32, 32, 1) and ds.labels.shape == (10, 8)
        assert cfg.factor_map == [0, 0, 1, 1, 2, 2, 3, 3]
        assert ds.ground_truth_pairs == [(0, 1), (2, 3), (4, 5), (6, 7)]
        assert ds.factor_groups() == [("group0", [0, 1]), ("group1", [2, 3]), ("group2", [4, 5]), ("group3", [6, 7])]

    def test_noise_free_agreement(self):
        ds = generate_synthetic(SyntheticConfig(flip_prob=0.0, n_train=500))
        for i, j in ds.ground_truth_pairs:
            assert agreement(ds.labels, i, j) == 1.0

    def test_noisy_agreement_matches_channel(self):
        eps = 0.25
        ds = generate_synthetic(SyntheticConfig(flip_prob=eps, n_train=10000, height=4, width=1))
        expected = (1 - eps) ** 2 + eps**2
        for i, j in ds.ground_truth_pairs:
            assert abs(agreement(ds.labels, i, j) - expected) < 0.02

    def test_marginals_and_cross_factor_independence(self):
        n = 10000
        ds = generate_synthetic(SyntheticConfig(n_train=n, height=4, width=1, seed=1))
        assert np.all(np.abs(ds.labels.mean(axis=0) - 0.5) < 3 / np.sqrt(n))
        fm = [0, 0, 1, 1, 2, 2, 3, 3]
        corr = np.corrcoef(ds.labels.T)
        for i in range(8):
            for j in range(i + 1, 8):
                if fm[i] != fm[j]:
                    assert abs(corr[i, j]) < 4 / np.sqrt(n)

    def test_bands_encode_factors(self):
        # with no pixel noise each band is exactly +-contrast
        cfg = SyntheticConfig(n_train=20, height=8, width=3, num_factors=4, flip_prob=0.0, render_contrast=2.0, noise_scale=0.0)
        ds = generate_synthetic(cfg)
        for k in range(4):
            band = ds.images[:, 2 * k : 2 * k + 2, :, 0]
            expected = np.where(ds.labels[:, 2 * k] == 1, 2.0, -2.0)
            assert np.all(band == expected[:, None, None])

    def test_custom_factor_map(self):
        cfg = SyntheticConfig(num_attributes=4, num_factors=2, factor_map=[1, 0, 1, 0], flip_prob=0.0, n_train=200)
        ds = generate_synthetic(cfg)
        assert ds.ground_truth_pairs == [(0, 2), (1, 3)]
        assert np.array_equal(ds.labels[:, 0], ds.labels[:, 2])

    @pytest.mark.parametrize(
        "kw,field",
        [
            (dict(num_factors=9), "num_factors"),
            (dict(num_attributes=4, num_factors=2, factor_map=[0, 0, 0, 0]), "factor_map"),
            (dict(num_attributes=2, num_factors=1, factor_map=[0]), "factor_map"),
            (dict(flip_prob=0.5), "flip_prob"),
            (dict(render_contrast=0.0), "render_contrast"),
            (dict(height=3), "height"),
        ],
    )
    def test_invalid(self, kw, field):
        with pytest.raises(ConfigError, match=field):
            SyntheticConfig(**kw)


class TestDatasetType:
    def test_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2, 2, 1)), np.array([[0, 2], [1, 0]]), ["a", "b"])
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2, 2, 1)), np.zeros((2, 2)), ["a", "a"])
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 2, 2, 1)), np.zeros((0, 2)), ["a", "b"])

    def test_singleton_groups(self):
        ds = Dataset(np.zeros((1, 1, 1, 1)), np.zeros((1, 3)), ["a", "b", "c"], [(0, 2)])
        assert ds.factor_groups() == [("group0", [0, 2]), ("group1", [1])]


class TestFlip:
    class Forced:
        def random(self):
            return 0.0

    def test_involution(self, rng):
        img = rng.standard_normal((4, 5, 2))
        assert random_flip(random_flip(img, self.Forced()), self.Forced()).tobytes() == img.tobytes()
        assert np.array_equal(random_flip(img, self.Forced()), img[:, ::-1])

    def test_symmetric_unchanged(self, rng):
        half = rng.standard_normal((3, 2, 1))
        img = np.concatenate([half, half[:, ::-1]], axis=1)
        assert np.array_equal(random_flip(img, self.Forced()), img)

    def test_rate(self):
        rng = np.random.default_rng(0)
        img = np.arange(2.0).reshape(1, 2, 1)
        flips = sum(random_flip(img, rng)[0, 0, 0] == 1.0 for _ in range(10000))
        assert abs(flips / 10000 - 0.5) < 0.02


def _write_fixture(tmp_path, values):
    write_pgm(tmp_path / "a.pgm", np.array([[0, 255], [51, 102]]))
    write_pgm(tmp_path / "b.pgm", np.array([[255, 255], [0, 0]]))
    lines = ["2", "Smiling Young", f"a.pgm {values[0]}", f"b.pgm {values[1]}"]
    (tmp_path / "list.txt").write_text("\n".join(lines) + "\n")
    return tmp_path / "list.txt"


class TestLoader:
    def test_two_image_fixture(self, tmp_path):
        ann = _write_fixture(tmp_path, ["1 -1", "-1  1"])
        ds = load_attribute_dataset(tmp_path, ann)
        assert ds.attribute_names == ["Smiling", "Young"]
        assert np.array_equal(ds.labels, [[1, 0], [0, 1]])
        np.testing.assert_allclose(ds.images[0, :, :, 0], [[0, 1], [0.2, 0.4]], atol=1e-15)
        assert np.all((ds.images >= 0) & (ds.images <= 1))

    def test_resize(self, tmp_path):
        ann = _write_fixture(tmp_path, ["1 1", "1 1"])
        ds = load_attribute_dataset(tmp_path, ann, size=(4, 4))
        assert ds.images.shape == (2, 4, 4, 1)
        assert ds.images[1, 0, 3, 0] == 1.0 and ds.images[1, 3, 0, 0] == 0.0

    def test_column_count_error_names_line(self, tmp_path):
        ann = _write_fixture(tmp_path, ["1 -1", "-1"])
        with pytest.raises(ParseError, match=r":4:"):
            load_attribute_dataset(tmp_path, ann)

    def test_bad_value_error(self, tmp_path):
        ann = _write_fixture(tmp_path, ["1 0", "1 1"])
        with pytest.raises(ParseError, match=r":3:"):
            read_annotations(ann)

    def test_missing_image(self, tmp_path):
        ann = _write_fixture(tmp_path, ["1 1", "1 1"])
        (tmp_path / "b.pgm").unlink()
        with pytest.raises(ParseError, match="missing image"):
            load_attribute_dataset(tmp_path, ann)

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "l.txt").write_text("3\nA B\nx 1 1\n")
        with pytest.raises(ParseError, match=r":1:"):
            read_annotations(tmp_path / "l.txt")

    def test_annotation_roundtrip(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(n_train=40))
        write_annotations(tmp_path / "l.txt", [f"{i}.pgm" for i in range(40)], ds.attribute_names, ds.labels)
        files, names, labels = read_annotations(tmp_path / "l.txt")
        assert names == ds.attribute_names and np.array_equal(labels, ds.labels) and len(files) == 40

    def test_pgm_p5(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P5\n# note\n3 1\n255\n" + bytes([0, 128, 255]))
        np.testing.assert_allclose(read_pgm(tmp_path / "x.pgm"), [[0, 128 / 255, 1]])


class TestContainer:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        imgs = rng.standard_normal((3, 4, 5, 2))
        write_image_container(tmp_path / "i.bin", imgs)
        raw = (tmp_path / "i.bin").read_bytes()
        assert raw[:4] == b"GALI" and len(raw) == 16 + imgs.size * 8
        assert read_image_container(tmp_path / "i.bin").tobytes() == imgs.tobytes()

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "i.bin").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(ParseError):
            read_image_container(tmp_path / "i.bin")

    def test_truncated(self, tmp_path, rng):
        write_image_container(tmp_path / "i.bin", rng.standard_normal((1, 2, 2, 1)))
        (tmp_path / "i.bin").write_bytes((tmp_path / "i.bin").read_bytes()[:-8])
        with pytest.raises(ParseError):
            read_image_container(tmp_path / "i.bin")

    def test_dataset_directory_roundtrip(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(n_train=30, height=8, width=8))
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert back.images.tobytes() == ds.images.tobytes()
        assert np.array_equal(back.labels, ds.labels)
        assert back.attribute_names == ds.attribute_names
        assert back.ground_truth_pairs == ds.ground_truth_pairs


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(1, 3))
def test_container_roundtrip_shapes(n, h, w, c):
    import tempfile
    from pathlib import Path

    imgs = np.random.default_rng(n * h * w * c).standard_normal((n, h, w, c))
    with tempfile.TemporaryDirectory() as d:
        write_image_container(Path(d) / "x.bin", imgs)
        assert read_image_container(Path(d) / "x.bin").tobytes() == imgs.tobytes()
