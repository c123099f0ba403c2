import numpy as np
import pytest
from PIL import Image

from defgen.data_io import (
    Dataset,
    FactorTable,
    checkpoint_load,
    checkpoint_load_full,
    checkpoint_save,
    emit_grid,
    hue_distance,
    load_image_dir,
    measure_centroid,
    measure_hue,
    quantize_unit,
    render_shape,
    synth_generate,
    unit_factor_vector,
)
from defgen.errors import (
    CheckpointChecksumError,
    CheckpointMagicError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    DimensionError,
)
from defgen.generators import ArchitectureConfig, init_params
from defgen.inference import ChainStore, warm_start_batch
from defgen.warp import bilinear_sample


class TestContainers:
    def test_dataset_validates(self, rng):
        imgs = rng.uniform(size=(3, 8, 8, 3)).astype(np.float32)
        ds = Dataset(imgs, ["a", "b", "c"])
        assert len(ds) == 3 and ds.image_size == 8
        with pytest.raises(DataError):
            Dataset(imgs, ["a", "a", "b"])
        with pytest.raises(DimensionError):
            Dataset(imgs, ["a", "b"])
        with pytest.raises(DimensionError):
            Dataset(imgs[..., :2], ["a", "b", "c"])

    def test_subset_keeps_factors_aligned(self, rng):
        ds = synth_generate(6, 16, seed=1)
        sub = ds.subset([4, 1])
        assert sub.ids == [ds.ids[4], ds.ids[1]]
        assert sub.factors.values["tx"][0] == ds.factors.values["tx"][4]
        np.testing.assert_array_equal(sub.images[1], ds.images[1])

    def test_unit_factor_vector(self):
        v = unit_factor_vector([-30, -15, 0, 15, 30])
        assert np.linalg.norm(v) == pytest.approx(1.0)
        with pytest.raises(DataError):
            unit_factor_vector([0.0, 0.0])

    def test_factor_table_levels(self):
        t = FactorTable({"tx": np.array([2.0, -2.0, 2.0, 0.0])})
        np.testing.assert_array_equal(t.levels("tx"), [-2.0, 0.0, 2.0])
        groups = t.level_indices("tx")
        assert [g[0] for g in groups] == [-2.0, 0.0, 2.0]
        np.testing.assert_array_equal(groups[2][1], [0, 2])


class TestLoadImageDir:
    def test_passthrough_size(self, tmp_path, rng):
        img = (rng.uniform(size=(64, 64, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / "one.png")
        ds = load_image_dir(tmp_path, 64)
        assert len(ds) == 1 and ds.images.shape == (1, 64, 64, 3)
        np.testing.assert_allclose(ds.images[0], img / 255.0, atol=1e-7)

    def test_downsample_matches_own_sampler(self, tmp_path, rng):
        img = (rng.uniform(size=(128, 128, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / "big.png")
        ds = load_image_dir(tmp_path, 64)
        src = img.astype(np.float64) / 255.0
        coords = (np.arange(64) + 0.5) * 2.0 - 0.5
        u = np.repeat(coords[:, None], 64, axis=1)
        v = np.repeat(coords[None, :], 64, axis=0)
        np.testing.assert_allclose(ds.images[0], bilinear_sample(src, (u, v)), atol=1e-6)

    def test_mixed_sizes_normalize(self, tmp_path, rng):
        for name, size in (("a.png", 32), ("b.png", 48), ("c.png", 100)):
            arr = (rng.uniform(size=(size, size, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(tmp_path / name)
        ds = load_image_dir(tmp_path, 32)
        assert ds.images.shape == (3, 32, 32, 3)
        assert ds.ids == ["a.png", "b.png", "c.png"]

    def test_lossy_input_rejected(self, tmp_path, rng):
        arr = (rng.uniform(size=(32, 32, 3)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / "photo.jpg")
        with pytest.raises(DataError, match="photo.jpg"):
            load_image_dir(tmp_path, 32)

    def test_undecodable_file_named(self, tmp_path):
        (tmp_path / "junk.png").write_bytes(b"not a png at all")
        with pytest.raises(DataError, match="junk.png"):
            load_image_dir(tmp_path, 32)

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_image_dir(tmp_path, 32)


class TestSynthGenerate:
    def test_canonical_pose_centered(self):
        img = render_shape(33, hue=120, brightness=1.0, tx=0, ty=0, scale=1.0, rotation=0)
        r, c = measure_centroid(img)
        assert abs(r - 16.0) < 0.5 and abs(c - 16.0) < 0.5

    def test_hue_only_change_keeps_mask(self):
        common = dict(tx=1.5, ty=-2.0, scale=1.1, rotation=20.0, brightness=0.9)
        a = render_shape(32, hue=10, **common)
        b = render_shape(32, hue=200, **common)
        np.testing.assert_allclose(a.max(axis=-1) > 0, b.max(axis=-1) > 0)

    def test_translation_moves_centroid(self):
        base = render_shape(48, hue=50, brightness=1.0, tx=0, ty=0, scale=1.0, rotation=0)
        moved = render_shape(48, hue=50, brightness=1.0, tx=5.0, ty=0, scale=1.0, rotation=0)
        r0, c0 = measure_centroid(base)
        r1, c1 = measure_centroid(moved)
        assert abs((c1 - c0) - 5.0) < 0.1
        assert abs(r1 - r0) < 0.1

    def test_seed_determinism_and_factor_log(self):
        d1 = synth_generate(5, 16, seed=9)
        d2 = synth_generate(5, 16, seed=9)
        np.testing.assert_array_equal(d1.images, d2.images)
        assert set(d1.factors.values) == {
            "hue", "brightness", "tx", "ty", "scale", "rotation", "shape"
        }
        assert len(d1.factors) == 5

    def test_discrete_levels_honored(self):
        ds = synth_generate(40, 16, factor_ranges={"tx": [-4.0, 0.0, 4.0]}, seed=2)
        assert set(ds.factors.values["tx"]) <= {-4.0, 0.0, 4.0}

    def test_fixed_factor(self):
        ds = synth_generate(4, 16, factor_ranges={"rotation": 0.0, "hue": 90.0}, seed=3)
        assert (ds.factors.values["rotation"] == 0.0).all()

    def test_measured_hue_matches_requested(self):
        for target in (0.0, 45.0, 120.0, 260.0, 330.0):
            img = render_shape(32, hue=target, brightness=0.8, tx=0, ty=0,
                               scale=1.0, rotation=0.0)
            assert hue_distance(measure_hue(img), target) < 2.0

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            synth_generate(0, 16)
        with pytest.raises(ConfigError):
            synth_generate(2, 16, factor_ranges={"zoom": (0, 1)})
        with pytest.raises(DataError):
            measure_centroid(np.zeros((8, 8, 3)))


class TestCheckpoint:
    def make(self, rng, with_chains=True):
        params = init_params(ArchitectureConfig.tiny8(), rng)
        store = None
        if with_chains:
            store = ChainStore(d_a=8, d_g=8, seed=4)
            warm_start_batch(store, ["e1", "e2", "e3"])
        return params, store

    def test_roundtrip_bitwise(self, rng, tmp_path):
        params, store = self.make(rng)
        p = tmp_path / "model.ckpt"
        checkpoint_save(params, store, p, iteration=17, seed=5, mode="abp")
        loaded, lstore = checkpoint_load(p)
        for (n1, t1), (n2, t2) in zip(params.all_tensors(), loaded.all_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(t1, t2)
            assert t2.dtype == np.float32
        assert loaded.sigma == params.sigma
        assert loaded.max_displacement == params.max_displacement
        assert loaded.config == params.config
        assert set(lstore.states) == {"e1", "e2", "e3"}
        np.testing.assert_array_equal(lstore.states["e2"].z_g, store.states["e2"].z_g)
        assert checkpoint_load_full(p).header["iteration"] == 17

    def test_float64_params_downcast_flagged(self, rng, tmp_path):
        params = init_params(ArchitectureConfig.tiny8(), rng, dtype=np.float64)
        p = tmp_path / "wide.ckpt"
        checkpoint_save(params, None, p)
        full = checkpoint_load_full(p)
        assert full.header["downcast"] is True
        assert full.params.appearance_weights[0]["weight"].dtype == np.float32

    def test_truncated_file_is_checksum_error(self, rng, tmp_path):
        params, store = self.make(rng)
        p = tmp_path / "model.ckpt"
        checkpoint_save(params, store, p)
        blob = p.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[:-20])
        with pytest.raises(CheckpointChecksumError):
            checkpoint_load(tmp_path / "cut.ckpt")

    def test_corrupted_payload_detected(self, rng, tmp_path):
        params, _ = self.make(rng, with_chains=False)
        p = tmp_path / "model.ckpt"
        checkpoint_save(params, None, p)
        blob = bytearray(p.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
        with pytest.raises(CheckpointChecksumError):
            checkpoint_load(tmp_path / "bad.ckpt")

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "other.bin").write_bytes(b"ELF\x7f" + b"\x00" * 64)
        with pytest.raises(CheckpointMagicError):
            checkpoint_load(tmp_path / "other.bin")

    def test_version_skew(self, rng, tmp_path):
        import json
        import struct

        params, _ = self.make(rng, with_chains=False)
        p = tmp_path / "model.ckpt"
        checkpoint_save(params, None, p)
        blob = p.read_bytes()
        (hlen,) = struct.unpack_from("<I", blob, 4)
        header = json.loads(blob[8:8 + hlen])
        header["version"] = 99
        hb = json.dumps(header, sort_keys=True).encode()
        (tmp_path / "future.ckpt").write_bytes(
            blob[:4] + struct.pack("<I", len(hb)) + hb + blob[8 + hlen:]
        )
        with pytest.raises(CheckpointVersionError):
            checkpoint_load(tmp_path / "future.ckpt")

    def test_save_is_deterministic(self, rng, tmp_path):
        params, store = self.make(rng)
        checkpoint_save(params, store, tmp_path / "a.ckpt", iteration=3)
        checkpoint_save(params, store, tmp_path / "b.ckpt", iteration=3)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


class TestEmitGrid:
    def test_row_layout(self, tmp_path, rng):
        imgs = rng.uniform(size=(11, 8, 8, 3))
        out = emit_grid(imgs, columns=11, path=tmp_path / "row.png")
        with Image.open(out) as im:
            assert im.size == (88, 8)  # PIL reports (width, height)

    def test_single_image_identity(self, tmp_path, rng):
        img = rng.uniform(size=(8, 8, 3))
        emit_grid([img], columns=1, path=tmp_path / "one.png")
        with Image.open(tmp_path / "one.png") as im:
            back = np.asarray(im)
        np.testing.assert_array_equal(back, quantize_unit(img))

    def test_round_half_up(self):
        assert quantize_unit(np.array([0.5]))[0] == 128
        assert quantize_unit(np.array([-0.1, 1.7])).tolist() == [0, 255]

    def test_partial_last_row_padded_black(self, tmp_path, rng):
        imgs = np.ones((3, 4, 4, 3)) * 0.9
        emit_grid(imgs, columns=2, path=tmp_path / "pad.png")
        with Image.open(tmp_path / "pad.png") as im:
            arr = np.asarray(im)
        assert arr.shape == (8, 8, 3)
        assert not arr[4:, 4:].any()

    def test_zero_images_rejected(self, tmp_path):
        with pytest.raises(DataError):
            emit_grid(np.zeros((0, 4, 4, 3)), columns=2, path=tmp_path / "no.png")
