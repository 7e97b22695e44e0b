"""Dataset generator: styles, geometry, appearance, on-disk format, loading."""

import json

import numpy as np
import pytest

from stylerand.synthdata import (
    MANIFEST_NAME,
    NUM_STRATA,
    STYLE_RANGES,
    DomainStyle,
    apply_appearance,
    dataset_fingerprint,
    draw_geometry,
    generate_dataset,
    generate_sample,
    load_dataset,
    make_domain_style,
)
from stylerand.tensor_core import RandomSource


def clean_style(domain_id=0, **overrides):
    params = dict(
        gamma=1.0,
        brightness=0.0,
        contrast=1.0,
        noise_std=0.0,
        bias_amplitude=0.0,
        texture_scale=0.0,
    )
    params.update(overrides)
    return DomainStyle(domain_id=domain_id, **params)


class TestDomainStyle:
    def test_ranges_enforced(self):
        with pytest.raises(ValueError, match="gamma"):
            clean_style(gamma=3.0)
        with pytest.raises(ValueError, match="noise_std"):
            clean_style(noise_std=0.2)
        with pytest.raises(ValueError, match="domain_id"):
            DomainStyle(
                domain_id=-1,
                gamma=1.0,
                brightness=0.0,
                contrast=1.0,
                noise_std=0.0,
                bias_amplitude=0.0,
                texture_scale=0.0,
            )

    def test_make_style_deterministic(self):
        a = make_domain_style(7, 2)
        b = make_domain_style(7, 2)
        c = make_domain_style(8, 2)
        assert a == b
        assert a != c

    def test_first_four_domains_have_distinct_gamma_strata(self):
        styles = [make_domain_style(3, d) for d in range(4)]
        lo, hi = STYLE_RANGES["gamma"]
        width = (hi - lo) / NUM_STRATA
        strata = {int((s.gamma - lo) / width) for s in styles}
        assert len(strata) == 4

    def test_all_parameters_within_ranges(self):
        for seed in (0, 9):
            for d in range(8):
                style = make_domain_style(seed, d)
                for field, (lo, hi) in STYLE_RANGES.items():
                    assert lo <= getattr(style, field) <= hi


class TestGeometry:
    def test_nesting_invariant(self):
        for seed in range(20):
            geom = draw_geometry(RandomSource(seed), 64)
            mask = geom.mask
            assert set(np.unique(mask)) <= {0, 1, 2}
            assert (mask == 2).any() and (mask == 1).any()
            # the inner region never touches background directly: every label-2
            # pixel came from a point inside the outer ellipse
            inner = mask == 2
            outer_or_inner = mask >= 1
            assert not np.any(inner & ~outer_or_inner)

    def test_outer_size_within_declared_fraction(self):
        for seed in range(10):
            mask = draw_geometry(RandomSource(seed), 128).mask
            area = (mask >= 1).sum()
            # semi-axes between 0.15 and 0.30 of the image bound the area
            low = np.pi * (0.15 * 128) ** 2 * 0.9
            high = np.pi * (0.30 * 128) ** 2 * 1.1
            assert low <= area <= high

    def test_determinism(self):
        a = draw_geometry(RandomSource(11), 64).mask
        b = draw_geometry(RandomSource(11), 64).mask
        assert np.array_equal(a, b)

    def test_small_image_rejected(self):
        with pytest.raises(ValueError, match="64"):
            draw_geometry(RandomSource(0), 32)


class TestAppearance:
    def test_clean_style_orders_region_means(self):
        geom = draw_geometry(RandomSource(21), 64)
        img = apply_appearance(geom.mask, clean_style(), RandomSource(22))
        bg = img[geom.mask == 0].mean()
        outer = img[geom.mask == 1].mean()
        inner = img[geom.mask == 2].mean()
        assert inner > outer > bg

    def test_output_range_and_dtype(self):
        geom = draw_geometry(RandomSource(23), 64)
        style = make_domain_style(5, 1)
        img = apply_appearance(geom.mask, style, RandomSource(24))
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_sample_determinism(self):
        style = make_domain_style(6, 0)
        a = generate_sample(style, RandomSource(25), RandomSource(26), 64)
        b = generate_sample(style, RandomSource(25), RandomSource(26), 64)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_styles_change_image_not_mask(self):
        s0 = make_domain_style(4, 0)
        s1 = make_domain_style(4, 1)
        a = generate_sample(s0, RandomSource(27), RandomSource(28), 64)
        b = generate_sample(s1, RandomSource(27), RandomSource(29), 64)
        assert np.array_equal(a.mask, b.mask)
        assert not np.array_equal(a.image, b.image)


class TestGenerateDataset:
    def test_counts_and_split(self, tmp_path):
        manifest = generate_dataset(4, 10, seed=31, out_path=tmp_path / "ds", image_size=64)
        assert manifest["K"] == 4
        for domain in manifest["domains"]:
            assert len(domain["train"]) == 8
            assert len(domain["test"]) == 2
        pngs = list((tmp_path / "ds").glob("*.png"))
        assert len(pngs) == 4 * 10 * 2

    def test_regeneration_is_byte_identical(self, tmp_path):
        generate_dataset(2, 4, seed=32, out_path=tmp_path / "a", image_size=64)
        generate_dataset(2, 4, seed=32, out_path=tmp_path / "b", image_size=64)
        files_a = sorted((tmp_path / "a").iterdir())
        files_b = sorted((tmp_path / "b").iterdir())
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            assert fa.read_bytes() == fb.read_bytes(), fa.name

    def test_single_domain_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="two domains"):
            generate_dataset(1, 4, seed=33, out_path=tmp_path / "ds")

    def test_existing_nonempty_dir_rejected_without_overwrite(self, tmp_path):
        target = tmp_path / "ds"
        generate_dataset(2, 4, seed=34, out_path=target, image_size=64)
        with pytest.raises(ValueError, match="not empty"):
            generate_dataset(2, 4, seed=34, out_path=target, image_size=64)
        generate_dataset(2, 4, seed=35, out_path=target, image_size=64, overwrite=True)
        assert load_dataset(target).manifest["seed"] == 35

    def test_manifest_written_last(self, tmp_path):
        target = tmp_path / "ds"
        generate_dataset(2, 4, seed=36, out_path=target, image_size=64)
        names = [p.name for p in target.iterdir()]
        assert MANIFEST_NAME in names

    def test_masks_identical_across_domains(self, tmp_path):
        target = tmp_path / "ds"
        generate_dataset(3, 4, seed=37, out_path=target, image_size=64)
        ds = load_dataset(target)
        for index in range(4):
            masks = []
            for d in range(3):
                part = "train" if index < 3 else "test"
                pool = ds.split(d, part)
                match = [s for s in pool if s.sample_id.endswith(f"_s{index}")]
                assert len(match) == 1
                masks.append(match[0].mask)
            assert np.array_equal(masks[0], masks[1])
            assert np.array_equal(masks[0], masks[2])

    def test_single_class_mode(self, tmp_path):
        target = tmp_path / "ds"
        generate_dataset(2, 4, seed=38, out_path=target, image_size=64, single_class=True)
        ds = load_dataset(target)
        assert ds.num_classes == 2
        for d in range(2):
            for part in ("train", "test"):
                for sample in ds.split(d, part):
                    assert set(np.unique(sample.mask)) <= {0, 1}
                    assert (sample.mask == 1).any()


class TestLoadDataset:
    def test_round_trip_bitwise(self, tmp_path):
        target = tmp_path / "ds"
        generate_dataset(2, 4, seed=41, out_path=target, image_size=64)
        first = load_dataset(target)
        second = load_dataset(target)
        for d in range(2):
            for part in ("train", "test"):
                for sa, sb in zip(first.split(d, part), second.split(d, part)):
                    assert np.array_equal(sa.image, sb.image)
                    assert np.array_equal(sa.mask, sb.mask)
        assert first.dataset_hash == second.dataset_hash
        assert first.dataset_hash == dataset_fingerprint(target)

    def test_images_are_uint8_quantized(self, tmp_path):
        target = tmp_path / "ds"
        generate_dataset(2, 4, seed=42, out_path=target, image_size=64)
        ds = load_dataset(target)
        sample = ds.split(0, "train")[0]
        scaled = sample.image * 255.0
        assert np.allclose(scaled, np.round(scaled), atol=1e-4)
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0

    def test_missing_file_named(self, tmp_path):
        target = tmp_path / "ds"
        generate_dataset(2, 4, seed=43, out_path=target, image_size=64)
        victim = "d0_s1_img.png"
        (target / victim).unlink()
        with pytest.raises(ValueError, match=victim):
            load_dataset(target)

    def test_checksum_mismatch_named(self, tmp_path):
        target = tmp_path / "ds"
        generate_dataset(2, 4, seed=44, out_path=target, image_size=64)
        victim = "d1_s0_mask.png"
        data = bytearray((target / victim).read_bytes())
        data[-1] ^= 0xFF
        (target / victim).write_bytes(bytes(data))
        with pytest.raises(ValueError, match=victim):
            load_dataset(target)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="manifest"):
            load_dataset(tmp_path)

    def test_tampered_manifest_changes_fingerprint(self, tmp_path):
        target = tmp_path / "ds"
        generate_dataset(2, 4, seed=45, out_path=target, image_size=64)
        before = dataset_fingerprint(target)
        manifest = json.loads((target / MANIFEST_NAME).read_text())
        manifest["seed"] = 999
        (target / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2))
        assert dataset_fingerprint(target) != before


def test_domain_shift_exceeds_within_domain_variation(tmp_path):
    """Histogram gap between domains must beat the gap between halves of one."""
    target = tmp_path / "ds"
    generate_dataset(3, 30, seed=51, out_path=target, image_size=64)
    ds = load_dataset(target)

    def histogram(images):
        data = np.concatenate([img.flatten() for img in images])
        hist, _ = np.histogram(data, bins=32, range=(0.0, 1.0))
        return hist / hist.sum()

    domain_hists = []
    intra_gaps = []
    for d in range(3):
        pool = [s.image for s in ds.split(d, "train")] + [s.image for s in ds.split(d, "test")]
        domain_hists.append(histogram(pool))
        half = len(pool) // 2
        intra_gaps.append(np.abs(histogram(pool[:half]) - histogram(pool[half:])).mean())
    inter_gaps = [
        np.abs(domain_hists[i] - domain_hists[j]).mean()
        for i in range(3)
        for j in range(i + 1, 3)
    ]
    assert min(inter_gaps) > max(intra_gaps), (inter_gaps, intra_gaps)
