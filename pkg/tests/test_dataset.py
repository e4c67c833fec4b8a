import shutil

import numpy as np
import pytest

from relight_lab import dataset as ds
from relight_lab import envmap as em
from relight_lab.errors import EmptyRealSet, EmptySplit, IoFailure


class TestBuildAndSplits:
    def test_ten_by_ten_holdout(self, tmp_path):
        man = ds.build_dataset(10, 10, 1, seed=1, out_dir=tmp_path / "d",
                               resolution=16, env_height=16)
        assert len(man.subjects("test")) == 1
        assert len(man.envs("test")) == 1
        assert set(man.subjects("train")) | set(man.subjects("test")) == set(range(10))
        assert not set(man.subjects("train")) & set(man.subjects("test"))

    def test_degenerate_minimum_forced_to_train(self, tmp_path):
        man = ds.build_dataset(1, 1, 1, seed=2, out_dir=tmp_path / "d",
                               resolution=16, env_height=16)
        assert man.subjects("train") == [0]
        assert man.envs("train") == [0]
        assert any("forcing train" in w for w in man.data["warnings"])
        assert man.image_path(0, 0, 0).exists()

    def test_build_deterministic(self, tmp_path):
        a = ds.build_dataset(2, 2, 1, seed=3, out_dir=tmp_path / "a",
                             resolution=16, env_height=16)
        b = ds.build_dataset(2, 2, 1, seed=3, out_dir=tmp_path / "b",
                             resolution=16, env_height=16)
        assert a.data == b.data
        for si in range(2):
            for ei in range(2):
                pa = a.image_path(si, ei, 0).read_bytes()
                pb = b.image_path(si, ei, 0).read_bytes()
                assert pa == pb
        ea = a.env_path(0).read_bytes()
        eb = b.env_path(0).read_bytes()
        assert ea == eb

    def test_manifest_round_trip(self, tiny_manifest):
        loaded = ds.load_manifest(tiny_manifest.root)
        assert ds.manifest_bytes(loaded) == ds.manifest_bytes(tiny_manifest)

    def test_missing_file_detected(self, tiny_manifest, tmp_path):
        clone = tmp_path / "clone"
        shutil.copytree(tiny_manifest.root, clone)
        (clone / "images" / "s0_e0_r0.png").unlink()
        with pytest.raises(IoFailure):
            ds.load_manifest(clone)


class TestSampleTuple:
    def test_single_variant_identity_pair(self, tmp_path):
        man = ds.build_dataset(1, 1, 1, seed=4, out_dir=tmp_path / "d",
                               resolution=16, env_height=16)
        rng = np.random.default_rng(0)
        tup = ds.sample_tuple(man, rng, "train")
        assert np.array_equal(tup.input_image, tup.target_image)
        assert tup.task_flag == "relight"

    def test_seeded_determinism(self, tiny_manifest):
        a = ds.sample_tuple(tiny_manifest, np.random.default_rng(5), "train")
        b = ds.sample_tuple(tiny_manifest, np.random.default_rng(5), "train")
        assert a.provenance == b.provenance
        assert np.array_equal(a.input_image, b.input_image)

    def test_identity_fraction_two_variants(self, tmp_path):
        # one env, two rotations -> 2 lighting variants; P(i == j) = 1/2
        man = ds.build_dataset(2, 1, 2, seed=6, out_dir=tmp_path / "d",
                               resolution=16, env_height=16)
        rng = np.random.default_rng(7)
        hits = 0
        n = 10_000
        for _ in range(n):
            tup = ds.sample_tuple(man, rng, "train")
            hits += tup.provenance["input"] == tup.provenance["target"]
        assert hits / n == pytest.approx(0.5, abs=0.02)

    def test_forbid_identity(self, tmp_path):
        man = ds.build_dataset(1, 1, 2, seed=8, out_dir=tmp_path / "d",
                               resolution=16, env_height=16)
        rng = np.random.default_rng(0)
        for _ in range(50):
            tup = ds.sample_tuple(man, rng, "train", forbid_identity=True)
            assert tup.provenance["input"] != tup.provenance["target"]

    def test_ldr_matches_recorded_rotation(self, tiny_manifest):
        rng = np.random.default_rng(9)
        for _ in range(5):
            tup = ds.sample_tuple(tiny_manifest, rng, "train")
            ej, rj = tup.provenance["target"]
            env = em.load_raster(tiny_manifest.env_path(ej))
            redone = em.tonemap_ldr(
                em.rotate(env, tiny_manifest.rotation(ej, rj)),
                tiny_manifest.clip_max,
                tiny_manifest.resolution, tiny_manifest.resolution)
            assert np.array_equal(redone.pixels, tup.ldr_env.pixels)

    def test_empty_split(self, tmp_path):
        man = ds.build_dataset(1, 1, 1, seed=10, out_dir=tmp_path / "d",
                               resolution=16, env_height=16)
        with pytest.raises(EmptySplit):
            ds.sample_tuple(man, np.random.default_rng(0), "test")


class TestT2iAndMixing:
    def test_t2i_black_conditions(self, tiny_real_set):
        rng = np.random.default_rng(1)
        tup = ds.sample_t2i(tiny_real_set, rng)
        assert tup.input_image.max() == 0.0
        assert tup.ldr_env.pixels.max() == 0.0
        assert tup.task_flag == "text_to_image"

    def test_single_image_set(self, tmp_path):
        real = ds.build_real_set(tmp_path / "r", 1, seed=2, resolution=16)
        rng = np.random.default_rng(0)
        targets = [ds.sample_t2i(real, rng).target_image for _ in range(5)]
        for t in targets[1:]:
            assert np.array_equal(t, targets[0])

    def test_t2i_determinism(self, tiny_real_set):
        a = ds.sample_t2i(tiny_real_set, np.random.default_rng(3))
        b = ds.sample_t2i(tiny_real_set, np.random.default_rng(3))
        assert np.array_equal(a.target_image, b.target_image)

    def test_empty_real_set(self):
        with pytest.raises(EmptyRealSet):
            ds.sample_t2i(None, np.random.default_rng(0))

    def test_mix_extremes(self, tiny_manifest, tiny_real_set):
        rng = np.random.default_rng(4)
        all_relight = ds.mix_batch(tiny_manifest, tiny_real_set, 16, 1.0, rng)
        assert all(t.task_flag == "relight" for t in all_relight)
        all_t2i = ds.mix_batch(tiny_manifest, tiny_real_set, 16, 0.0, rng)
        assert all(t.task_flag == "text_to_image" for t in all_t2i)

    def test_mix_ratio(self, tiny_manifest, tiny_real_set):
        rng = np.random.default_rng(5)
        n, batch = 0, 10_000
        tuples = ds.mix_batch(tiny_manifest, tiny_real_set, batch, 0.7, rng)
        n = sum(1 for t in tuples if t.task_flag == "relight")
        assert n / batch == pytest.approx(0.7, abs=0.02)

    def test_empty_real_set_lazy(self, tiny_manifest):
        rng = np.random.default_rng(6)
        # ratio 1.0 never draws t2i, so the missing real set is fine
        batch = ds.mix_batch(tiny_manifest, None, 8, 1.0, rng)
        assert len(batch) == 8
        with pytest.raises(EmptyRealSet):
            ds.mix_batch(tiny_manifest, None, 50, 0.5, rng)


class TestRealSet:
    def test_build_and_labels(self, tiny_real_set):
        assert len(tiny_real_set) == 6
        assert all(name in tiny_real_set.labels for name in tiny_real_set.files)

    def test_load_plain_directory(self, tmp_path):
        from PIL import Image
        d = tmp_path / "imgs"
        d.mkdir()
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(d / "a.png")
        real = ds.load_real_set(d)
        assert real.files == ["a.png"]
        tup = ds.sample_t2i(real, np.random.default_rng(0))
        assert tup.label == (0, 0)
