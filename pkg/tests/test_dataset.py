import logging

import numpy as np
import pytest

from clusiam.augment import to_grayscale
from clusiam.dataset import (
    ImageSample,
    ReidDataset,
    SyntheticSpec,
    generate,
    grayscale_distance_contrast,
    load_manifest,
    load_ppm_dir,
    read_ppm,
    save_ppm_dir,
    split,
    write_manifest,
    write_ppm,
)


class TestGenerate:
    def test_counts_and_id_ranges(self):
        ds = generate(SyntheticSpec(n_identities=20, images_per_identity=10, n_cameras=3, seed=5))
        assert len(ds) == 200
        assert {s.identity for s in ds.samples} == set(range(20))
        assert {s.camera for s in ds.samples} == {0, 1, 2}

    def test_zero_noise_same_id_cam_identical(self):
        ds = generate(SyntheticSpec(noise_sigma=0.0, seed=1))
        groups = {}
        for s in ds.samples:
            groups.setdefault((s.identity, s.camera), []).append(s.image)
        for images in groups.values():
            for img in images[1:]:
                assert np.array_equal(img, images[0])

    def test_pixels_in_unit_interval(self):
        ds = generate(SyntheticSpec(seed=2))
        for s in ds.samples:
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_deterministic_under_seed(self):
        a = generate(SyntheticSpec(seed=3))
        b = generate(SyntheticSpec(seed=3))
        for sa, sb in zip(a.samples, b.samples):
            assert np.array_equal(sa.image, sb.image)

    def test_grayscale_contrast_at_least_two(self):
        # intra-identity grayscale distance must be much smaller than
        # inter-identity distance: the texture signal survives grayscale
        ds = generate(SyntheticSpec(seed=4))
        assert grayscale_distance_contrast(ds) >= 2.0

    def test_color_histogram_groups_by_camera(self):
        # the confound: nearest neighbor in raw color-histogram space picks a
        # same-camera image more often than a same-identity image
        ds = generate(SyntheticSpec(seed=6))

        def hist_feat(img):
            return np.concatenate(
                [np.histogram(img[..., c], bins=8, range=(0, 1))[0] for c in range(3)]
            ).astype(float)

        feats = np.array([hist_feat(s.image) for s in ds.samples])
        ids = np.array([s.identity for s in ds.samples])
        cams = np.array([s.camera for s in ds.samples])
        d = np.sqrt(((feats[:, None] - feats[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        nn = d.argmin(axis=1)
        same_cam = float((cams[nn] == cams).mean())
        same_id = float((ids[nn] == ids).mean())
        assert same_cam > same_id

    def test_grayscale_distance_groups_by_identity(self):
        ds = generate(SyntheticSpec(seed=7))
        gray = np.array([to_grayscale(s.image).ravel() for s in ds.samples])
        ids = np.array([s.identity for s in ds.samples])
        d = np.sqrt(((gray[:, None] - gray[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        nn = d.argmin(axis=1)
        assert float((ids[nn] == ids).mean()) > 0.9

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            generate(SyntheticSpec(n_cameras=1))


class TestSplit:
    def test_half_identities_to_train(self):
        ds = generate(SyntheticSpec(seed=8))
        tagged = split(ds, np.random.default_rng(0))
        train_ids = {ds.samples[i].identity for i in tagged.train_indices}
        eval_ids = {ds.samples[i].identity for i in tagged.query_indices}
        assert len(train_ids) == 10
        assert len(eval_ids) == 10
        assert train_ids.isdisjoint(eval_ids)

    def test_every_query_has_cross_camera_match(self):
        ds = generate(SyntheticSpec(seed=9))
        tagged = split(ds, np.random.default_rng(1))
        gallery = [(ds.samples[i].identity, ds.samples[i].camera) for i in tagged.gallery_indices]
        for qi in tagged.query_indices:
            q = ds.samples[qi]
            assert any(gid == q.identity and gcam != q.camera for gid, gcam in gallery)

    def test_same_seed_same_split(self):
        ds = generate(SyntheticSpec(seed=10))
        a = split(ds, np.random.default_rng(2))
        b = split(ds, np.random.default_rng(2))
        assert a.train_indices == b.train_indices
        assert a.query_indices == b.query_indices
        assert a.gallery_indices == b.gallery_indices

    def test_single_camera_identity_excluded(self, caplog):
        samples = [
            ImageSample(np.full((4, 2, 3), 0.5), identity=0, camera=0),
            ImageSample(np.full((4, 2, 3), 0.5), identity=0, camera=0),
            ImageSample(np.full((4, 2, 3), 0.4), identity=1, camera=0),
            ImageSample(np.full((4, 2, 3), 0.4), identity=1, camera=1),
            ImageSample(np.full((4, 2, 3), 0.3), identity=1, camera=1),
        ]
        ds = ReidDataset(samples=samples)
        with caplog.at_level(logging.WARNING):
            tagged = split(ds, np.random.default_rng(4), train_fraction=0.0)
        eval_ids = {ds.samples[i].identity for i in tagged.query_indices + tagged.gallery_indices}
        assert 0 not in eval_ids
        assert "single camera" in caplog.text

    def test_query_gallery_disjoint(self):
        ds = generate(SyntheticSpec(seed=11))
        tagged = split(ds, np.random.default_rng(5))
        assert set(tagged.query_indices).isdisjoint(tagged.gallery_indices)
        assert set(tagged.query_indices).isdisjoint(tagged.train_indices)


class TestPpmIo:
    def test_round_trip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(12)
        img = rng.random((8, 4, 3))
        path = tmp_path / "0001_c0_000.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12

    def test_extreme_values(self, tmp_path):
        img = np.zeros((2, 2, 3))
        img[0, 0] = 1.0
        path = tmp_path / "0001_c0_000.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back[0, 0, 0] == 1.0
        assert back[1, 1, 1] == 0.0

    def test_filename_parse(self, tmp_path):
        write_ppm(tmp_path / "0007_c2_001.ppm", np.full((2, 2, 3), 0.5))
        ds = load_ppm_dir(tmp_path)
        assert len(ds) == 1
        assert ds.samples[0].identity == 7
        assert ds.samples[0].camera == 2

    def test_malformed_names_skipped_with_warning(self, tmp_path, caplog):
        write_ppm(tmp_path / "0001_c0_000.ppm", np.full((2, 2, 3), 0.5))
        write_ppm(tmp_path / "not_a_reid_name.ppm", np.full((2, 2, 3), 0.5))
        with caplog.at_level(logging.WARNING):
            ds = load_ppm_dir(tmp_path)
        assert len(ds) == 1
        assert "skipping" in caplog.text

    def test_non_p6_rejected(self, tmp_path):
        bad = tmp_path / "0001_c0_000.ppm"
        bad.write_bytes(b"P3\n2 2\n255\n" + b"0 " * 12)
        with pytest.raises(ValueError, match="P6"):
            read_ppm(bad)

    def test_missing_dir_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_ppm_dir(tmp_path / "nope")

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1 255\n" + bytes(6))
        img = read_ppm(path)
        assert img.shape == (1, 2, 3)

    def test_manifest_round_trip(self, tmp_path):
        ds = generate(SyntheticSpec(n_identities=4, images_per_identity=4, seed=13))
        ds = split(ds, np.random.default_rng(6))
        paths = save_ppm_dir(ds, tmp_path)
        write_manifest(tmp_path / "manifest.json", ds, paths, SyntheticSpec(seed=13))
        loaded = load_manifest(tmp_path / "manifest.json")
        assert len(loaded) == len(ds)
        assert loaded.train_indices == ds.train_indices
        assert loaded.query_indices == ds.query_indices
        assert loaded.gallery_indices == ds.gallery_indices
        for a, b in zip(loaded.samples, ds.samples):
            assert a.identity == b.identity and a.camera == b.camera
            assert np.abs(a.image - b.image).max() <= 0.5 / 255.0 + 1e-12
