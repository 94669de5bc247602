"""Tests for the synthetic dataset, disk round-trip, and injections."""

import numpy as np
import pytest

from incmad.data import (
    AccessAudit,
    Dataset,
    IngestionError,
    ObjectData,
    corrupt_dataset,
    generate_synthetic_dataset,
    inject_redundant,
    inject_spurious,
    load_dataset,
    perlin_noise,
    save_dataset,
)
from incmad.data import _foreground


def _perlin_ref(h, w, octaves, seed, res=4):
    """Literal per-pixel reference: same rng draws, scalar corner loops."""
    rng = np.random.default_rng(seed)
    total = np.zeros((h, w))
    amp, norm, cells = 1.0, 0.0, res
    for _ in range(octaves):
        ang = rng.uniform(0.0, 2.0 * np.pi, (cells + 1, cells + 1))
        for y in range(h):
            for x in range(w):
                ys, xs = y * cells / h, x * cells / w
                yi, xi = int(ys), int(xs)
                fy, fx = ys - yi, xs - xi
                c = {}
                for dy in (0, 1):
                    for dx in (0, 1):
                        gx = np.cos(ang[yi + dy, xi + dx])
                        gy = np.sin(ang[yi + dy, xi + dx])
                        c[dy, dx] = gx * (fx - dx) + gy * (fy - dy)
                uy = fy**3 * (fy * (fy * 6 - 15) + 10)
                ux = fx**3 * (fx * (fx * 6 - 15) + 10)
                top = c[0, 0] * (1 - ux) + c[0, 1] * ux
                bot = c[1, 0] * (1 - ux) + c[1, 1] * ux
                total[y, x] += amp * (top * (1 - uy) + bot * uy) * np.sqrt(2.0)
        norm += amp
        amp *= 0.5
        cells *= 2
    return total / norm


class TestPerlin:
    def test_matches_scalar_reference(self):
        got = perlin_noise(12, 20, octaves=2, seed=7)
        want = _perlin_ref(12, 20, octaves=2, seed=7)
        assert np.allclose(got, want, atol=1e-12)

    def test_same_seed_identical(self):
        a = perlin_noise(32, 32, octaves=3, seed=5)
        b = perlin_noise(32, 32, octaves=3, seed=5)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = perlin_noise(32, 32, seed=1)
        b = perlin_noise(32, 32, seed=2)
        assert not np.allclose(a, b)

    def test_bounded_sweep(self):
        for seed in range(30):
            f = perlin_noise(33, 47, octaves=3, seed=seed)
            assert f.min() >= -1.0 and f.max() <= 1.0

    def test_zero_at_lattice_points_single_octave(self):
        f = perlin_noise(64, 64, octaves=1, seed=9, res=4)
        for y in (0, 16, 32, 48):
            for x in (0, 16, 32, 48):
                assert f[y, x] == 0.0

    def test_nonconstant(self):
        f = perlin_noise(64, 64, seed=3)
        assert f.std() > 0.05

    def test_bad_args(self):
        with pytest.raises(ValueError):
            perlin_noise(8, 8, octaves=0)
        with pytest.raises(ValueError):
            perlin_noise(0, 8)


class TestSyntheticDataset:
    def test_structure(self):
        ds = generate_synthetic_dataset(3, 4, 4, 32, seed=0)
        assert ds.names == ["object00", "object01", "object02"]
        for name in ds.names:
            obj = ds.objects[name]
            assert len(obj.train) == 4
            assert len(obj.test) == 4
            assert all(not s.is_anomalous for s in obj.train)
            assert any(s.is_anomalous for s in obj.test)
            assert any(not s.is_anomalous for s in obj.test)

    def test_masks_align_with_defects(self):
        ds = generate_synthetic_dataset(2, 2, 4, 32, seed=1)
        for obj in ds.objects.values():
            for s in obj.test:
                if s.is_anomalous:
                    assert s.anomaly_mask.max() == 1.0
                    assert s.anomaly_mask.shape == (1, 32, 32)
                else:
                    assert s.anomaly_mask.max() == 0.0

    def test_goods_carry_empty_masks(self):
        ds = generate_synthetic_dataset(2, 2, 2, 32, seed=2)
        for obj in ds.objects.values():
            for s in obj.train:
                assert s.anomaly_mask is not None
                assert s.anomaly_mask.max() == 0.0

    def test_value_ranges_and_quantization(self):
        ds = generate_synthetic_dataset(2, 2, 2, 32, seed=3)
        s = ds.objects["object00"].train[0]
        assert s.rgb.min() >= 0.0 and s.rgb.max() <= 1.0
        assert s.depth.min() >= 0.0 and s.depth.max() <= 1.0
        assert np.allclose(s.rgb * 255.0, np.round(s.rgb * 255.0), atol=1e-9)
        assert np.allclose(s.depth * 65535.0, np.round(s.depth * 65535.0), atol=1e-6)

    def test_deterministic(self):
        a = generate_synthetic_dataset(2, 3, 2, 32, seed=4)
        b = generate_synthetic_dataset(2, 3, 2, 32, seed=4)
        sa = a.objects["object01"].train[2]
        sb = b.objects["object01"].train[2]
        assert np.array_equal(sa.rgb, sb.rgb)
        assert np.array_equal(sa.depth, sb.depth)

    def test_linear_probe_separates_objects(self):
        # two objects must be linearly separable on raw pixels
        ds = generate_synthetic_dataset(2, 12, 2, 32, seed=5)
        xs, ys = [], []
        for label, name in enumerate(ds.names):
            for s in ds.objects[name].train:
                xs.append(s.rgb.ravel())
                ys.append(2.0 * label - 1.0)
        x = np.stack(xs)
        x = np.concatenate([x, np.ones((len(x), 1))], axis=1)
        y = np.asarray(ys)
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        acc = np.mean(np.sign(x @ w) == y)
        assert acc > 0.9

    def test_bad_args(self):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(0, 2, 2, 32)
        with pytest.raises(ValueError):
            generate_synthetic_dataset(2, 0, 2, 32)
        with pytest.raises(ValueError):
            generate_synthetic_dataset(2, 2, 1, 32)


class TestDiskRoundTrip:
    def test_lossless(self, tmp_path):
        ds = generate_synthetic_dataset(2, 2, 3, 32, seed=6)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.names == ds.names
        assert back.image_size == 32
        for name in ds.names:
            for split in ("train", "test"):
                orig = getattr(ds.objects[name], split)
                # loader reads class dirs alphabetically: defect before good
                loaded = getattr(back.objects[name], split)
                orig_sorted = sorted(orig, key=lambda s: not s.is_anomalous)
                assert len(loaded) == len(orig)
                for a, b in zip(orig_sorted, loaded):
                    assert np.array_equal(a.rgb, b.rgb)
                    assert np.array_equal(a.depth, b.depth)
                    assert np.array_equal(a.anomaly_mask, b.anomaly_mask)
                    assert a.is_anomalous == b.is_anomalous
                    assert a.object_name == b.object_name

    def test_missing_depth_named(self, tmp_path):
        ds = generate_synthetic_dataset(1, 2, 2, 32, seed=7)
        save_dataset(ds, tmp_path)
        victim = tmp_path / "object00" / "train" / "good" / "depth_0001.png"
        victim.unlink()
        with pytest.raises(IngestionError, match="depth_0001"):
            load_dataset(tmp_path)

    def test_orphan_file_named(self, tmp_path):
        ds = generate_synthetic_dataset(1, 2, 2, 32, seed=8)
        save_dataset(ds, tmp_path)
        stray = tmp_path / "object00" / "train" / "good" / "notes.txt"
        stray.write_text("stray")
        with pytest.raises(IngestionError, match="notes.txt"):
            load_dataset(tmp_path)

    def test_size_mismatch_named(self, tmp_path):
        from PIL import Image

        ds = generate_synthetic_dataset(2, 2, 2, 32, seed=9)
        save_dataset(ds, tmp_path)
        victim = tmp_path / "object01" / "train" / "good" / "depth_0000.png"
        Image.fromarray(np.zeros((16, 16), dtype=np.uint16)).save(victim)
        with pytest.raises(IngestionError, match="object01"):
            load_dataset(tmp_path)

    def test_empty_root(self, tmp_path):
        with pytest.raises(IngestionError, match="no objects"):
            load_dataset(tmp_path)

    def test_missing_root(self, tmp_path):
        with pytest.raises(IngestionError, match="not a directory"):
            load_dataset(tmp_path / "nope")


def _two_samples(size=32):
    ds = generate_synthetic_dataset(2, 2, 2, size, seed=10)
    return ds.objects["object00"].train[0], ds.objects["object01"].train[0]


class TestInjectSpurious:
    def test_strength_zero_identity(self):
        a, b = _two_samples()
        out = inject_spurious(a, b, 0.0)
        assert np.array_equal(out.rgb, a.rgb)
        assert np.array_equal(out.depth, a.depth)

    def test_strength_one_matches_source_in_blend(self):
        a, b = _two_samples()
        out = inject_spurious(a, b, 1.0)
        blend = ~_foreground(a.depth) & ~_foreground(b.depth)
        assert blend.any()
        assert np.array_equal(out.rgb[:, blend], b.rgb[:, blend])
        assert np.array_equal(out.depth[:, blend], b.depth[:, blend])

    def test_foreground_bit_identical(self):
        a, b = _two_samples()
        fg = _foreground(a.depth)
        for strength in (0.3, 0.7, 1.0):
            out = inject_spurious(a, b, strength)
            assert np.array_equal(out.rgb[:, fg], a.rgb[:, fg])
            assert np.array_equal(out.depth[:, fg], a.depth[:, fg])

    def test_label_and_mask_unchanged(self):
        a, b = _two_samples()
        out = inject_spurious(a, b, 0.5)
        assert out.object_id == a.object_id
        assert out.is_anomalous == a.is_anomalous
        assert np.array_equal(out.anomaly_mask, a.anomaly_mask)

    def test_changes_background(self):
        a, b = _two_samples()
        out = inject_spurious(a, b, 1.0)
        assert not np.array_equal(out.rgb, a.rgb)

    def test_bad_strength(self):
        a, b = _two_samples()
        with pytest.raises(ValueError):
            inject_spurious(a, b, -0.1)
        with pytest.raises(ValueError):
            inject_spurious(a, b, 1.5)


class TestInjectRedundant:
    def test_intensity_zero_identity(self):
        a, _ = _two_samples()
        out = inject_redundant(a, 0.0, seed=1)
        assert np.array_equal(out.rgb, a.rgb)
        assert np.array_equal(out.depth, a.depth)

    def test_bounded(self):
        a, _ = _two_samples()
        out = inject_redundant(a, 3.0, seed=2)
        assert out.rgb.min() >= 0.0 and out.rgb.max() <= 1.0
        assert out.depth.min() >= 0.0 and out.depth.max() <= 1.0

    def test_mean_delta_monotone_in_intensity(self):
        a, _ = _two_samples()
        deltas = []
        for intensity in (0.1, 0.3, 0.6):
            acc = 0.0
            for seed in range(20):
                out = inject_redundant(a, intensity, seed=seed)
                acc += np.abs(out.rgb - a.rgb).mean()
            deltas.append(acc / 20.0)
        assert deltas[0] < deltas[1] < deltas[2]

    def test_seed_reproducible(self):
        a, _ = _two_samples()
        x = inject_redundant(a, 0.4, seed=11)
        y = inject_redundant(a, 0.4, seed=11)
        assert np.array_equal(x.rgb, y.rgb)

    def test_negative_intensity(self):
        a, _ = _two_samples()
        with pytest.raises(ValueError):
            inject_redundant(a, -1.0)


class TestCorruptDataset:
    def test_test_split_untouched(self):
        ds = generate_synthetic_dataset(3, 2, 2, 32, seed=12)
        out = corrupt_dataset(ds, redundant_intensity=0.5, spurious_strength=0.5, seed=0)
        for name in ds.names:
            for a, b in zip(ds.objects[name].test, out.objects[name].test):
                assert np.array_equal(a.rgb, b.rgb)

    def test_train_corrupted(self):
        ds = generate_synthetic_dataset(3, 2, 2, 32, seed=13)
        out = corrupt_dataset(ds, redundant_intensity=0.5, seed=0)
        changed = any(
            not np.array_equal(a.rgb, b.rgb)
            for name in ds.names
            for a, b in zip(ds.objects[name].train, out.objects[name].train)
        )
        assert changed

    def test_noop_when_zero(self):
        ds = generate_synthetic_dataset(2, 2, 2, 32, seed=14)
        out = corrupt_dataset(ds, 0.0, 0.0, seed=0)
        for name in ds.names:
            for a, b in zip(ds.objects[name].train, out.objects[name].train):
                assert np.array_equal(a.rgb, b.rgb)

    def test_deterministic(self):
        ds = generate_synthetic_dataset(2, 2, 2, 32, seed=15)
        x = corrupt_dataset(ds, 0.3, 0.4, seed=5)
        y = corrupt_dataset(ds, 0.3, 0.4, seed=5)
        for name in ds.names:
            for a, b in zip(x.objects[name].train, y.objects[name].train):
                assert np.array_equal(a.rgb, b.rgb)


class TestAudit:
    def test_counts_reads(self):
        ds = generate_synthetic_dataset(2, 3, 2, 32, seed=16)
        ds.train_samples(["object00"])
        ds.train_samples(["object00"])
        ds.test_samples(["object01"])
        assert ds.audit.count("object00", "train") == 6
        assert ds.audit.count("object01", "train") == 0
        assert ds.audit.count("object01", "test") == 2

    def test_snapshot_is_copy(self):
        audit = AccessAudit()
        audit.record("a", "train", 2)
        snap = audit.snapshot()
        audit.record("a", "train", 1)
        assert snap[("a", "train")] == 2
        assert audit.count("a", "train") == 3

    def test_empty_dataset_rejected(self):
        with pytest.raises(IngestionError):
            Dataset([], 32)

    def test_object_ids_follow_name_order(self):
        ds = generate_synthetic_dataset(3, 2, 2, 32, seed=17)
        assert [ds.object_id(n) for n in ds.names] == [0, 1, 2]
