import json
import os

import numpy as np
import pytest

from udafeat import synthdata as S
from udafeat.synthdata import (DomainShift, Sample, SceneSpec, augment,
                               default_shift, generate_split, load_split,
                               read_pgm, read_ppm, render, render_scene,
                               write_pgm, write_ppm)


def small_spec(**kw):
    base = dict(height=32, width=32, box_count=(1, 2), disc_count=(1, 2),
                stripe_count=(1, 1), size_range=(4, 10), seed=5)
    base.update(kw)
    return SceneSpec(**base)


class TestRender:
    def test_negative_index_raises(self):
        with pytest.raises(ValueError):
            render(small_spec(), DomainShift(), -1)

    def test_pure_function_of_inputs(self):
        a = render(small_spec(), default_shift(), 3)
        b = render(small_spec(), default_shift(), 3)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.labels, b.labels)

    def test_empty_object_ranges_ground_only(self):
        spec = small_spec(box_count=(0, 0), disc_count=(0, 0),
                          stripe_count=(0, 0))
        s = render(spec, DomainShift(), 0)
        assert set(np.unique(s.labels)) <= {0, 1}

    def test_label_range(self):
        s = render(small_spec(), default_shift(), 2)
        assert s.labels.min() >= 0 and s.labels.max() < S.NUM_CLASSES

    def test_image_range_and_quantization(self):
        s = render(small_spec(), default_shift(), 4)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        np.testing.assert_array_equal(
            s.image, np.round(s.image * 255.0) / 255.0)

    def test_seed7_double_render_oracle(self):
        spec = SceneSpec(seed=7)
        img1, lab1 = render_scene(spec, 0)
        img2, lab2 = render_scene(spec, 0)
        h1 = np.bincount(lab1.ravel(), minlength=S.NUM_CLASSES)
        h2 = np.bincount(lab2.ravel(), minlength=S.NUM_CLASSES)
        np.testing.assert_array_equal(h1, h2)
        np.testing.assert_array_equal(img1, img2)

    def test_label_histogram_matches_masks(self):
        s = render(small_spec(), DomainShift(), 1)
        hist = np.bincount(s.labels.ravel(), minlength=S.NUM_CLASSES)
        for cls in range(S.NUM_CLASSES):
            assert hist[cls] == int((s.labels == cls).sum())
        assert hist.sum() == s.labels.size

    def test_identity_shift_matches_source(self):
        src = render(small_spec(), DomainShift(), 6, "source")
        tgt = render(small_spec(), DomainShift(), 6, "target")
        np.testing.assert_array_equal(src.image, tgt.image)
        np.testing.assert_array_equal(src.labels, tgt.labels)

    def test_shift_changes_pixels_not_labels(self):
        src = render(small_spec(), DomainShift(), 6)
        tgt = render(small_spec(), default_shift(), 6)
        assert not np.array_equal(src.image, tgt.image)
        np.testing.assert_array_equal(src.labels, tgt.labels)


class TestDomainGap:
    def test_default_shift_mean_color_gap(self):
        spec = SceneSpec(seed=3)
        shifts = [DomainShift(), default_shift()]
        sums = np.zeros((2, S.NUM_CLASSES, 3))
        counts = np.zeros((2, S.NUM_CLASSES))
        for i in range(100):
            for d, sh in enumerate(shifts):
                s = render(spec, sh, i)
                for cls in range(S.NUM_CLASSES):
                    mask = s.labels == cls
                    if mask.any():
                        sums[d, cls] += s.image[:, mask].mean(axis=1)
                        counts[d, cls] += 1
        means = sums / counts[..., None]
        gap = np.linalg.norm(means[0] - means[1], axis=1)
        assert np.all(gap > 0.1)

    def test_domain_class_frequencies_match(self):
        # independent draws from the same scene distribution: frequencies
        # agree within 2% absolute over 200 images per domain
        spec = SceneSpec(seed=11)
        hist_a = np.zeros(S.NUM_CLASSES)
        hist_b = np.zeros(S.NUM_CLASSES)
        for i in range(200):
            hist_a += np.bincount(
                render_scene(spec, i)[1].ravel(), minlength=S.NUM_CLASSES)
            hist_b += np.bincount(
                render_scene(spec, 1_000_000 + i)[1].ravel(),
                minlength=S.NUM_CLASSES)
        freq_a = hist_a / hist_a.sum()
        freq_b = hist_b / hist_b.sum()
        assert np.all(np.abs(freq_a - freq_b) < 0.02)

    def test_occupancy_guarantee(self):
        spec = small_spec(seed=2)
        present = np.zeros(S.NUM_CLASSES)
        n = 200
        for i in range(n):
            _, labels = render_scene(spec, i)
            present += np.bincount(labels.ravel(),
                                   minlength=S.NUM_CLASSES) > 0
        assert np.all(present[2:] / n >= 0.6)


class _AlwaysFlip:
    def random(self):
        return 0.0


class _NeverFlip:
    def random(self):
        return 1.0


class TestAugment:
    def test_forced_flip_involution(self):
        s = render(small_spec(), DomainShift(), 0)
        rng = _AlwaysFlip()
        twice = augment(augment(s, rng), rng)
        np.testing.assert_array_equal(twice.image, s.image)
        np.testing.assert_array_equal(twice.labels, s.labels)

    def test_no_flip_identity(self):
        s = render(small_spec(), DomainShift(), 0)
        out = augment(s, _NeverFlip())
        np.testing.assert_array_equal(out.image, s.image)

    def test_labels_and_image_flip_together(self):
        s = render(small_spec(), DomainShift(), 1)
        out = augment(s, _AlwaysFlip())
        np.testing.assert_array_equal(out.image, s.image[:, :, ::-1])
        np.testing.assert_array_equal(out.labels, s.labels[:, ::-1])

    def test_unlabeled_sample_keeps_none(self):
        s = Sample(np.zeros((3, 4, 4)), None, "target")
        out = augment(s, _AlwaysFlip())
        assert out.labels is None

    def test_flip_rate(self):
        rng = np.random.default_rng(123)
        s = render(small_spec(), DomainShift(), 0)
        flips = sum(
            not np.array_equal(augment(s, rng).image, s.image)
            for _ in range(1000))
        assert abs(flips / 1000 - 0.5) < 0.05


class TestFileIO:
    def test_ppm_roundtrip(self, tmp_path):
        s = render(small_spec(), default_shift(), 0)
        path = tmp_path / "img.ppm"
        write_ppm(path, s.image)
        np.testing.assert_array_equal(read_ppm(path), s.image)

    def test_pgm_roundtrip(self, tmp_path):
        s = render(small_spec(), DomainShift(), 0)
        path = tmp_path / "lab.pgm"
        write_pgm(path, s.labels)
        np.testing.assert_array_equal(read_pgm(path), s.labels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n2 2\n255\n" + b"\0" * 12)
        with pytest.raises(ValueError):
            read_ppm(path)


class TestGenerateSplit:
    def test_counts_must_be_positive(self, tmp_path):
        with pytest.raises(ValueError):
            generate_split(small_spec(), DomainShift(), 0, 1, 1, tmp_path)

    def test_same_seed_byte_identical(self, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            generate_split(small_spec(), default_shift(), 3, 3, 2, d)
        for root, _, files in os.walk(dirs[0]):
            rel = os.path.relpath(root, dirs[0])
            for name in files:
                p0 = os.path.join(root, name)
                p1 = os.path.join(dirs[1], rel, name)
                assert open(p0, "rb").read() == open(p1, "rb").read(), p0

    def test_layout_and_manifest(self, tmp_path):
        manifest_path = generate_split(small_spec(), default_shift(),
                                       3, 2, 2, tmp_path)
        manifest = json.load(open(manifest_path))
        assert manifest["counts"] == {"source": 3, "target": 2, "val": 2}
        assert manifest["classes"] == list(S.CLASS_NAMES)
        assert os.path.isdir(tmp_path / "source" / "labels")
        assert os.path.isdir(tmp_path / "val" / "labels")
        assert not os.path.isdir(tmp_path / "target" / "labels")

    def test_load_split_roundtrip(self, tmp_path):
        generate_split(small_spec(), default_shift(), 3, 2, 2, tmp_path)
        src = load_split(tmp_path, "source")
        tgt = load_split(tmp_path, "target")
        val = load_split(tmp_path, "val")
        assert len(src) == 3 and len(tgt) == 2 and len(val) == 2
        assert all(s.labels is not None for s in src)
        assert all(t.labels is None for t in tgt)
        assert all(v.labels is not None for v in val)
        expected = render(small_spec(), DomainShift(), 1)
        np.testing.assert_array_equal(src[1].image, expected.image)
        np.testing.assert_array_equal(src[1].labels, expected.labels)

    def test_identity_shift_source_equals_target(self, tmp_path):
        generate_split(small_spec(), DomainShift(), 2, 2, 1, tmp_path)
        src = load_split(tmp_path, "source")
        tgt = load_split(tmp_path, "target")
        for s, t in zip(src, tgt):
            np.testing.assert_array_equal(s.image, t.image)

    def test_seed_override(self, tmp_path):
        generate_split(small_spec(seed=1), DomainShift(), 1, 1, 1,
                       tmp_path / "a", seed=9)
        generate_split(small_spec(seed=9), DomainShift(), 1, 1, 1,
                       tmp_path / "b")
        a = load_split(tmp_path / "a", "source")[0]
        b = load_split(tmp_path / "b", "source")[0]
        np.testing.assert_array_equal(a.image, b.image)

    def test_missing_split_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_split(tmp_path, "source")
