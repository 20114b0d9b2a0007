"""Synthetic pair generation: sources, transforms, triplets, sets, ingestion."""

import json
import os

import numpy as np
import pytest

from splicematch import datagen
from splicematch.datagen import (PairDataset, TransformSpec, apply_transform,
                                 classify_difficulty, dataset_from_manifest,
                                 downsample_mask, generate_set,
                                 ingest_annotations, load_manifest,
                                 make_triplet, sample_transform,
                                 synth_base_image)
from splicematch.errors import (GenerationError, ParameterError,
                                TransformRejected, ValidationError)


class TestSourceSynthesis:
    def test_deterministic(self):
        a = synth_base_image(11, size=128)
        b = synth_base_image(11, size=128)
        assert np.array_equal(a.pixels, b.pixels)
        assert len(a.regions) == len(b.regions)
        for ra, rb in zip(a.regions, b.regions):
            assert np.array_equal(ra, rb)

    def test_region_area_bounds_many_seeds(self):
        for seed in range(60):
            src = synth_base_image(seed, size=128)
            assert src.regions, f"seed {seed} produced no regions"
            for region in src.regions:
                frac = region.mean()
                assert 0.01 < frac <= 0.5
                assert region.any()

    def test_pixels_are_uint8_rgb(self):
        src = synth_base_image(0, size=64)
        assert src.pixels.dtype == np.uint8
        assert src.pixels.shape == (64, 64, 3)


class TestTransforms:
    def _region(self, size=64):
        src = synth_base_image(5, size=size)
        return src.pixels, src.regions[0]

    def test_identity_exact(self):
        pixels, mask = self._region()
        out_pixels, out_mask = apply_transform(pixels, mask, TransformSpec())
        assert np.array_equal(out_pixels, pixels)
        assert np.array_equal(out_mask, mask)

    def test_pure_shift_exact_copy(self):
        pixels, mask = self._region()
        spec = TransformSpec(shift=(5, -3))
        out_pixels, out_mask = apply_transform(pixels, mask, spec)
        ys, xs = np.nonzero(mask)
        keep = (ys - 3 >= 0) & (xs + 5 < 64)
        assert out_mask.sum() == keep.sum()
        assert np.array_equal(out_pixels[ys[keep] - 3, xs[keep] + 5],
                              pixels[ys[keep], xs[keep]])

    def test_scale_doubles_bounding_box(self):
        pixels, mask = self._region(size=128)
        spec = TransformSpec(scale=2.0)
        try:
            _, out_mask = apply_transform(pixels, mask, spec)
        except TransformRejected:
            pytest.skip("region left canvas under 2x scale")
        ys, xs = np.nonzero(mask)
        oy, ox = np.nonzero(out_mask)
        in_w = xs.max() - xs.min() + 1
        out_w = ox.max() - ox.min() + 1
        if (xs.max() - xs.mean()) * 2 + xs.mean() < 126:   # fully on canvas
            assert abs(out_w - 2 * in_w) <= 3

    def test_luminance_clamps(self):
        pixels = np.full((16, 16, 3), 250, dtype=np.uint8)
        mask = np.zeros((16, 16), dtype=bool)
        mask[4:12, 4:12] = True
        out_pixels, _ = apply_transform(pixels, mask, TransformSpec(luminance=32.0))
        assert out_pixels.max() == 255

    def test_off_canvas_rejected(self):
        pixels, mask = self._region()
        with pytest.raises(TransformRejected):
            apply_transform(pixels, mask, TransformSpec(shift=(200, 200)))

    def test_rotation_preserves_area_roughly(self):
        pixels, mask = self._region(size=128)
        spec = TransformSpec(rotation_deg=25.0)
        _, out_mask = apply_transform(pixels, mask, spec)
        assert abs(out_mask.sum() - mask.sum()) / mask.sum() < 0.15

    def test_sampled_parameters_inside_declared_intervals(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            spec = sample_transform(rng, "combination", 256)
            assert -127 <= spec.shift[0] <= 127 and -127 <= spec.shift[1] <= 127
            if spec.rotation_deg is not None:
                assert -30 <= spec.rotation_deg <= 30
            if spec.scale is not None:
                assert 0.5 <= spec.scale <= 4.0
            if spec.luminance is not None:
                assert -32 <= spec.luminance <= 32
            if spec.deform_width is not None:
                assert 0.5 <= spec.deform_width <= 2.0

    def test_single_transform_kinds_isolate_one_field(self):
        rng = np.random.default_rng(1)
        for kind, field in (("rotation", "rotation_deg"), ("scale", "scale"),
                            ("luminance", "luminance"),
                            ("deformation", "deform_width")):
            spec = sample_transform(rng, kind, 256)
            assert getattr(spec, field) is not None
            assert spec.shift == (0, 0)
            others = {"rotation_deg", "scale", "luminance", "deform_width"} - {field}
            assert all(getattr(spec, o) is None for o in others)
        assert sample_transform(rng, "raw", 256).is_identity()
        shift_spec = sample_transform(rng, "shift", 256)
        assert not shift_spec.geometric() and shift_spec.luminance is None


class TestDifficulty:
    def test_bucket_fixtures(self):
        assert classify_difficulty(0.05) == "difficult"
        assert classify_difficulty(0.15) == "normal"
        assert classify_difficulty(0.30) == "easy"

    def test_boundaries_right_closed(self):
        assert classify_difficulty(0.10) == "difficult"
        assert classify_difficulty(0.25) == "normal"

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            classify_difficulty(0.005)
        with pytest.raises(ValidationError):
            classify_difficulty(0.6)


class TestTriplets:
    def _triplet(self, seed=0):
        donor = synth_base_image([seed, 1], size=64)
        host = synth_base_image([seed, 2], size=64)
        return make_triplet(donor, 0, host, TransformSpec(shift=(4, 4)))

    def test_foreground_mask_equals_pasted_region(self):
        fg, bg, neg = self._triplet()
        # probe pixels inside the mask are exactly the shifted donor pixels
        assert fg.mask_p.sum() > 0
        assert np.array_equal(fg.probe[fg.mask_p],
                              np.broadcast_to(fg.probe[fg.mask_p],
                                              fg.probe[fg.mask_p].shape))
        assert fg.kind == "foreground" and fg.label == "correlated"

    def test_background_mask_is_complement(self):
        fg, bg, neg = self._triplet()
        assert np.array_equal(bg.mask_p, ~fg.mask_p)
        assert np.array_equal(bg.mask_d, ~fg.mask_p)
        assert bg.label == "correlated"

    def test_negative_pair_zero_masks(self):
        fg, bg, neg = self._triplet()
        assert not neg.mask_p.any() and not neg.mask_d.any()
        assert neg.label == "uncorrelated"

    def test_geometric_self_consistency_raw(self):
        donor = synth_base_image(7, size=64)
        host = synth_base_image(8, size=64)
        fg, _, _ = make_triplet(donor, 0, host, TransformSpec())
        # raw paste: probe's masked pixels match the donor's exactly
        assert np.array_equal(fg.probe[fg.mask_p], donor.pixels[fg.mask_p])

    def test_geometric_self_consistency_transformed(self):
        donor = synth_base_image(9, size=64)
        host = synth_base_image(10, size=64)
        spec = TransformSpec(shift=(2, 1), luminance=8.0)
        fg, _, _ = make_triplet(donor, 0, host, spec)
        pixels_t, mask_t = apply_transform(donor.pixels, donor.regions[0], spec)
        diff = (fg.probe[fg.mask_p].astype(int)
                - pixels_t[mask_t].astype(int))
        assert np.abs(diff).max() <= 2

    def test_area_bounds_enforced(self):
        donor = synth_base_image(12, size=64)
        host = synth_base_image(13, size=64)
        big = max(donor.regions, key=lambda m: m.mean())
        donor.regions[0] = big
        with pytest.raises(TransformRejected):
            make_triplet(donor, 0, host, TransformSpec(scale=3.9))


class TestGenerateSet:
    @pytest.fixture(scope="class")
    def small_set(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("set")
        manifest = generate_set("combination", (2, 2, 2), seed=3, out_dir=out,
                                size=64, pool_size=8)
        return out, manifest

    def test_counts_and_kinds(self, small_set):
        _, manifest = small_set
        by_kind = {}
        for row in manifest.rows:
            by_kind.setdefault(row["kind"], []).append(row)
        assert len(by_kind["foreground"]) == 6
        assert len(by_kind["background"]) == 6
        assert len(by_kind["negative"]) == 6
        buckets = [r["difficulty"] for r in by_kind["foreground"]]
        assert sorted(buckets).count("difficult") == 2
        assert sorted(buckets).count("normal") == 2
        assert sorted(buckets).count("easy") == 2

    def test_files_exist_and_digests_match(self, small_set):
        out, manifest = small_set
        import hashlib
        for row in manifest.rows:
            for rel, digest in row["digests"].items():
                path = os.path.join(out, rel)
                assert os.path.exists(path)
                got = hashlib.sha256(open(path, "rb").read()).hexdigest()
                assert got == digest

    def test_manifest_loads_into_dataset(self, small_set):
        out, manifest = small_set
        ds = dataset_from_manifest(manifest.path)
        assert len(ds) == 18
        info, rows = load_manifest(manifest.path)
        assert info["kind"] == "combination"
        assert len(rows) == 18

    def test_regeneration_byte_identical(self, small_set, tmp_path):
        out, manifest = small_set
        again = generate_set("combination", (2, 2, 2), seed=3,
                             out_dir=tmp_path, size=64, pool_size=8)
        assert open(manifest.path, "rb").read().replace(
            str(out).encode(), b"") == open(again.path, "rb").read().replace(
            str(tmp_path).encode(), b"")
        for row in again.rows:
            for rel, digest in row["digests"].items():
                import hashlib
                got = hashlib.sha256(
                    open(os.path.join(tmp_path, rel), "rb").read()).hexdigest()
                assert got == digest

    def test_raw_set_identity_transforms(self, tmp_path):
        manifest = generate_set("raw", (1, 1, 1), seed=5, out_dir=tmp_path,
                                size=64, pool_size=6)
        for row in manifest.rows:
            spec = TransformSpec.from_json(row["transform"])
            assert spec.is_identity()

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ParameterError):
            generate_set("blur", (1, 1, 1), seed=0, out_dir=tmp_path)

    def test_unreachable_budget_raises(self, tmp_path):
        with pytest.raises(GenerationError):
            generate_set("raw", (50, 0, 0), seed=0, out_dir=tmp_path,
                         size=64, pool_size=4, attempt_budget_factor=1)


class TestMaskHelpers:
    def test_downsample_majority(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[:8, :8] = True                  # one full block
        mask[0, 8:12] = True                 # 4 of 64 pixels: stays pristine
        small = downsample_mask(mask, 2)
        assert small.tolist() == [[True, False], [False, False]]

    def test_exact_half_is_pristine(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[:2, :2] = True
        mask[2:, :2] = True                  # left half of every 2x2 block
        small = downsample_mask(mask, 2)
        assert not small.any()               # 0.5 is not strictly above 0.5

    def test_one_hot(self):
        binary = np.array([[[True, False]]])
        hot = datagen.one_hot_mask(binary)
        assert hot.shape == (1, 2, 1, 2)
        assert hot[0, 1].tolist() == [[1.0, 0.0]]
        assert hot[0, 0].tolist() == [[0.0, 1.0]]


class TestPairDataset:
    def test_stratified_sampling(self):
        ds = datagen.make_toy_dataset(3, size=64, seed=1)
        rng = np.random.default_rng(0)
        idx = ds.sample_indices(rng, 6)
        kinds = [ds.pairs[i].kind for i in idx]
        assert kinds.count("foreground") == 2
        assert kinds.count("background") == 2
        assert kinds.count("negative") == 2

    def test_uneven_batch_split(self):
        ds = datagen.make_toy_dataset(2, size=64, seed=2)
        rng = np.random.default_rng(0)
        kinds = [ds.pairs[i].kind for i in ds.sample_indices(rng, 8)]
        assert len(kinds) == 8
        assert {kinds.count("foreground"), kinds.count("background"),
                kinds.count("negative")} == {3, 3, 2}

    def test_batch_tensors(self):
        ds = datagen.make_toy_dataset(2, size=64, seed=3)
        batch = ds.batch([0, 1, 2], 8)
        assert batch["probe"].shape == (3, 3, 64, 64)
        assert batch["gt_a"].shape == (3, 2, 8, 8)
        assert np.allclose(batch["gt_a"].sum(axis=1), 1.0)
        assert batch["labels"].shape == (3, 2)
        assert np.all(batch["labels"].sum(axis=1) == 1.0)

    def test_overfit_pairs_grid_aligned(self):
        ds = datagen.make_overfit_pairs(8, size=64, seed=0)
        assert len(ds) == 8
        for pair in ds.pairs:
            assert pair.kind == "foreground"
            assert 0.01 < pair.mask_p.mean() < 0.5
            # 8-pixel alignment: downsample then upsample loses nothing
            small = downsample_mask(pair.mask_p, 8)
            restored = np.repeat(np.repeat(small, 8, axis=0), 8, axis=1)
            assert np.array_equal(restored, pair.mask_p)


class TestIngestAnnotations:
    def _write_image(self, path, size=40):
        from PIL import Image
        rng = np.random.default_rng(0)
        Image.fromarray(rng.integers(0, 255, (size, size, 3), dtype=np.uint8),
                        "RGB").save(path)

    def test_polygon_square_quarter_area(self, tmp_path):
        self._write_image(tmp_path / "img.png", 40)
        meta = {"regions": [{"type": "polygon",
                             "points": [[0, 0], [20, 0], [20, 20], [0, 20]]}]}
        (tmp_path / "img.regions.json").write_text(json.dumps(meta))
        sources, issues = ingest_annotations(tmp_path)
        assert len(sources) == 1 and not issues
        frac = sources[0].regions[0].mean()
        assert abs(frac - 0.25) <= 0.01
        assert sources[0].pixels.shape == (256, 256, 3)

    def test_rle_region(self, tmp_path):
        self._write_image(tmp_path / "img.png", 8)
        # 8x8 canvas: 16 zeros, 32 ones, 16 zeros = middle half rows
        meta = {"regions": [{"type": "rle", "size": [8, 8],
                             "counts": [16, 32, 16]}]}
        (tmp_path / "img.regions.json").write_text(json.dumps(meta))
        sources, issues = ingest_annotations(tmp_path)
        assert len(sources) == 1 and not issues
        assert abs(sources[0].regions[0].mean() - 0.5) < 0.01

    def test_empty_directory(self, tmp_path):
        sources, issues = ingest_annotations(tmp_path / "missing")
        assert sources == [] and issues

    def test_undersized_region_dropped_with_reason(self, tmp_path):
        self._write_image(tmp_path / "img.png", 100)
        meta = {"regions": [{"type": "polygon",
                             "points": [[0, 0], [7, 0], [7, 7], [0, 7]]}]}
        (tmp_path / "img.regions.json").write_text(json.dumps(meta))
        sources, issues = ingest_annotations(tmp_path)
        assert not sources
        assert any("below 1% floor" in issue for issue in issues)

    def test_unparseable_sidecar_skipped(self, tmp_path):
        self._write_image(tmp_path / "a.png", 32)
        (tmp_path / "a.regions.json").write_text("{not json")
        self._write_image(tmp_path / "b.png", 32)
        meta = {"regions": [{"type": "polygon",
                             "points": [[0, 0], [16, 0], [16, 16], [0, 16]]}]}
        (tmp_path / "b.regions.json").write_text(json.dumps(meta))
        sources, issues = ingest_annotations(tmp_path)
        assert len(sources) == 1
        assert any("unparseable" in issue for issue in issues)
