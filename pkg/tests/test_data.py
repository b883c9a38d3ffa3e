import numpy as np
import pytest

from fmbff import data
from fmbff.errors import ConfigurationError, ParseError, ValidationError


class TestGenerateSynthetic:
    def test_deterministic(self):
        a = data.generate_synthetic(6, size=(32, 32), seed=5)
        b = data.generate_synthetic(6, size=(32, 32), seed=5)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.mask, sb.mask)
            assert sa.id == sb.id

    def test_masks_binary_nonempty(self):
        for s in data.generate_synthetic(10, size=(32, 32), seed=1):
            assert set(np.unique(s.mask)) <= {0.0, 1.0}
            assert s.mask.sum() > 0

    def test_foreground_fraction_bounds(self):
        samples = data.generate_synthetic(200, size=(32, 32), seed=7)
        for s in samples:
            frac = s.mask.mean()
            assert 0.02 <= frac <= 0.6, f"{s.id}: fraction {frac}"

    def test_image_range(self):
        for s in data.generate_synthetic(5, size=(16, 16), seed=2):
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert s.image.shape == (3, 16, 16)


class TestAugment:
    def test_identity(self):
        s = data.generate_synthetic(1, size=(32, 32), seed=3)[0]
        out = data.augment(s, 0, 1.0)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.mask, s.mask)
        assert out.id == s.id

    def test_four_quarter_turns(self):
        s = data.generate_synthetic(1, size=(32, 32), seed=4)[0]
        out = s
        for _ in range(4):
            out = data.augment(out, 90, 1.0)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.mask, s.mask)

    def test_quarter_turn_preserves_mask_count(self):
        s = data.generate_synthetic(1, size=(32, 32), seed=5)[0]
        for deg in (90, 180, 270):
            out = data.augment(s, deg, 1.0)
            assert out.mask.sum() == s.mask.sum()

    def test_brightness(self):
        s = data.generate_synthetic(1, size=(16, 16), seed=6)[0]
        s.image[:] = 0.5
        out = data.augment(s, 0, 0.8)
        np.testing.assert_allclose(out.image, 0.4, atol=1e-6)

    def test_brightness_clamps(self):
        s = data.generate_synthetic(1, size=(16, 16), seed=6)[0]
        s.image[:] = 0.9
        out = data.augment(s, 0, 1.2)
        assert out.image.max() <= 1.0

    def test_masks_stay_binary(self):
        s = data.generate_synthetic(1, size=(32, 32), seed=8)[0]
        for deg in range(0, 360, 30):
            out = data.augment(s, deg, 1.0)
            assert set(np.unique(out.mask)) <= {0.0, 1.0}

    def test_invalid_args(self):
        s = data.generate_synthetic(1, size=(16, 16), seed=9)[0]
        with pytest.raises(ConfigurationError):
            data.augment(s, 45, 1.0)
        with pytest.raises(ConfigurationError):
            data.augment(s, 0, 0.5)

    def test_expansion_count(self):
        s = data.generate_synthetic(1, size=(16, 16), seed=10)[0]
        expanded = data.expand_augmentations(s)
        assert len(expanded) == 36
        assert len({e.id for e in expanded}) == 36


class TestSplits:
    def test_80_20(self):
        ids = [f"s{i}" for i in range(100)]
        plan = data.split(ids, ratio=0.8, seed=0)
        assert len(plan.train_ids) == 80 and len(plan.val_ids) == 20
        assert set(plan.train_ids) | set(plan.val_ids) == set(ids)
        assert not set(plan.train_ids) & set(plan.val_ids)

    def test_kfold_103(self):
        ids = [f"s{i}" for i in range(103)]
        plan = data.kfold(ids, k=5, seed=0)
        sizes = sorted(len(f) for f in plan.folds)
        assert sizes == [20, 20, 21, 21, 21]
        combined = [i for f in plan.folds for i in f]
        assert sorted(combined) == sorted(ids)

    def test_same_seed_same_plan(self):
        ids = [f"s{i}" for i in range(37)]
        a = data.split(ids, seed=3)
        b = data.split(ids, seed=3)
        assert a.train_ids == b.train_ids and a.val_ids == b.val_ids

    def test_k_too_large(self):
        with pytest.raises(ConfigurationError):
            data.kfold(["a", "b"], k=5)


class TestNetpbmIO:
    def test_image_roundtrip_quantization(self, tmp_path):
        rng = np.random.default_rng(11)
        image = rng.random((3, 7, 9)).astype(np.float32)
        path = tmp_path / "img.ppm"
        data.write_image(path, image)
        back = data.read_image(path)
        assert np.abs(back - image).max() <= 1 / 255 + 1e-6

    def test_roundtrip_idempotent(self, tmp_path):
        rng = np.random.default_rng(12)
        image = rng.random((3, 5, 5)).astype(np.float32)
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        data.write_image(p1, image)
        data.write_image(p2, data.read_image(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_zero_mask_roundtrip(self, tmp_path):
        mask = np.zeros((1, 4, 4), dtype=np.float32)
        path = tmp_path / "m.pgm"
        data.write_mask(path, mask)
        np.testing.assert_array_equal(data.read_mask(path), mask)

    def test_threshold_rule(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0]))
        np.testing.assert_array_equal(data.read_mask(path)[0], [[0, 1], [1, 0]])

    def test_threshold_at_127(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n2 1\n255\n" + bytes([127, 128]))
        np.testing.assert_array_equal(data.read_mask(path)[0], [[0, 1]])

    def test_malformed_header_offset(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\n2 x\n255\n\x00\x00")
        with pytest.raises(ParseError, match="byte offset"):
            data.read_mask(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(ParseError):
            data.read_image(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(ParseError):
            data.read_mask(path)


class TestDatasetDir:
    def test_write_load_roundtrip(self, tmp_path):
        samples = data.generate_synthetic(4, size=(16, 16), seed=13)
        data.write_dataset(tmp_path, samples)
        loaded = data.load_dataset(tmp_path)
        assert [s.id for s in loaded] == [s.id for s in samples]
        for a, b in zip(loaded, samples):
            np.testing.assert_array_equal(a.mask, b.mask)
            assert np.abs(a.image - b.image).max() <= 1 / 255 + 1e-6

    def test_sample_validation(self):
        s = data.Sample(
            image=np.zeros((3, 4, 4), dtype=np.float32),
            mask=np.zeros((1, 5, 4), dtype=np.float32),
            id="bad",
        )
        with pytest.raises(ValidationError):
            s.validate()
