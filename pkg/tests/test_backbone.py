import numpy as np
import pytest
from scipy.signal import correlate

from s2dmatch.backbone import (
    BackboneConfig,
    ConfigError,
    KeypointBoundsError,
    Weights,
    WeightFormatError,
    describe_sparse,
    forward,
    load_weights,
    preset,
    save_weights,
)
from s2dmatch.tensor import Tensor


def straight_line_forward(image, w, cfg):
    """Independent float64 re-implementation of the layer sequence (scipy correlate)."""

    def conv(x, name):
        k = w[f"{name}.weight"].astype(np.float64)
        pad = k.shape[-1] // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        out = np.stack([correlate(xp, k[o], mode="valid")[0] for o in range(k.shape[0])])
        return out + w[f"{name}.bias"][:, None, None]

    def pool(x):
        if x.shape[1] % 2 or x.shape[2] % 2:
            x = np.pad(x, ((0, 0), (0, x.shape[1] % 2), (0, x.shape[2] % 2)), mode="edge")
        c, h, ww = x.shape
        return x.reshape(c, h // 2, 2, ww // 2, 2).max(axis=(2, 4))

    x = image[None].astype(np.float64)
    taps = {}
    for b, n in enumerate(cfg.convs_per_block, 1):
        for i in range(1, n + 1):
            x = np.maximum(conv(x, f"trunk.{b}.{i}"), 0)
        taps[b] = x
        if b in cfg.pool_after:
            x = pool(x)
    out = []
    for m, e in enumerate(cfg.extraction_points):
        y = np.maximum(conv(taps[e], f"adapt.{m}.conv1"), 0)
        y = conv(y, f"adapt.{m}.conv2")
        g, bt, rm, rv = (w[f"adapt.{m}.bn.{k}"].astype(np.float64)
                         for k in ("gamma", "beta", "running_mean", "running_var"))
        out.append(g[:, None, None] * (y - rm[:, None, None]) / np.sqrt(rv[:, None, None] + cfg.bn_eps)
                   + bt[:, None, None])
    return out


def perturbed_weights(cfg, seed=0):
    w = Weights.init(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name, arr in w.params.items():
        if name.endswith("bias") or name.endswith("beta") or name.endswith("running_mean"):
            arr[...] = rng.normal(0, 0.1, size=arr.shape)
        elif name.endswith("gamma") or name.endswith("running_var"):
            arr[...] = rng.uniform(0.5, 1.5, size=arr.shape)
    return w


class TestConfig:
    def test_default_scales(self):
        assert preset("desk").scales == (1, 4, 16)
        assert preset("vgg16").scales == (1, 4, 16)
        assert preset("desk2").scales == (1, 4)

    def test_extraction_points_must_increase(self):
        with pytest.raises(ConfigError):
            BackboneConfig(extraction_points=(3, 1))

    def test_text_roundtrip(self):
        cfg = preset("vgg16", seed=7)
        assert BackboneConfig.from_text(cfg.to_text()) == cfg

    def test_text_records_upsampling_convention(self):
        assert "upsample = align_corners" in preset("desk").to_text()

    def test_fingerprint_ignores_seed(self):
        assert preset("desk", seed=1).fingerprint() == preset("desk", seed=2).fingerprint()
        assert preset("desk").fingerprint() != preset("desk2").fingerprint()


class TestForward:
    def test_desk_shapes(self):
        w = Weights.init(preset("desk"))
        pyr = forward(np.random.default_rng(0).uniform(size=(64, 64)), w)
        assert [lv.shape for lv in pyr.levels] == [(32, 64, 64), (32, 16, 16), (32, 4, 4)]
        assert pyr.scales == (1, 4, 16)

    def test_odd_size_uses_ceiling(self):
        w = Weights.init(preset("desk"))
        pyr = forward(np.zeros((37, 50)), w)
        assert [lv.shape[1:] for lv in pyr.levels] == [(37, 50), (10, 13), (3, 4)]

    @pytest.mark.parametrize("mode", ["infer", "train"])
    def test_zero_image_gives_beta(self, mode):
        w = Weights.init(preset("desk"))
        for m in range(3):
            w.params[f"adapt.{m}.bn.beta"][:] = np.arange(32) * 0.5 - m
        pyr = forward(np.zeros((32, 32)), w, mode=mode)
        for m, lv in enumerate(pyr.levels):
            expected = (np.arange(32) * 0.5 - m)[:, None, None]
            np.testing.assert_allclose(lv.data, np.broadcast_to(expected, lv.shape), atol=1e-6)

    def test_straight_line_oracle(self):
        cfg = preset("desk")
        w = perturbed_weights(cfg, seed=3)
        img = np.random.default_rng(4).uniform(size=(16, 16))
        expected = straight_line_forward(img, w.params, cfg)
        pyr = forward(img, w.astype(np.float64))
        for lv, ex in zip(pyr.levels, expected):
            np.testing.assert_allclose(lv.data, ex, rtol=1e-10, atol=1e-10)
        # float32 production path, level-0 checksum
        pyr32 = forward(img, w)
        assert float(pyr32.levels[0].data.sum(dtype=np.float64)) == pytest.approx(expected[0].sum(), rel=1e-4)

    def test_deterministic(self):
        w = Weights.init(preset("desk"), seed=5)
        img = np.random.default_rng(1).uniform(size=(24, 20))
        a, b = forward(img, w), forward(img, w)
        for x, y in zip(a.levels, b.levels):
            assert np.array_equal(x.data, y.data)

    def test_translation_covariance_level0(self):
        w = perturbed_weights(preset("desk2"), seed=9)
        rng = np.random.default_rng(2)
        big = rng.uniform(size=(40, 40))
        dx, dy = 3, 2
        a = big[5:29, 5:29]
        b = big[5 - dy : 29 - dy, 5 - dx : 29 - dx]
        la = forward(a, w).levels[0].data
        lb = forward(b, w).levels[0].data
        r = 3  # level-0 receptive-field radius
        # content at a[y, x] is at b[y + dy, x + dx]
        np.testing.assert_allclose(
            la[:, r : 24 - r - dy, r : 24 - r - dx],
            lb[:, r + dy : 24 - r, r + dx : 24 - r],
            atol=1e-5,
        )

    def test_fingerprint_mismatch(self):
        w = Weights.init(preset("desk"))
        with pytest.raises(ConfigError):
            forward(np.zeros((8, 8)), w, config=preset("desk2"))

    def test_rgb_input_converted(self):
        w = Weights.init(preset("desk2"))
        rgb = np.random.default_rng(0).uniform(size=(16, 16, 3))
        gray = rgb @ np.array([0.299, 0.587, 0.114])
        a = forward(rgb, w).levels[0].data
        b = forward(gray, w).levels[0].data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_shared_weights_across_images(self):
        w = Weights.init(preset("desk2"))
        pa = forward(np.zeros((8, 8)), w)
        pb = forward(np.ones((8, 8)), w)
        assert pa.fingerprint == pb.fingerprint == w.fingerprint


class TestDescribeSparse:
    def setup_method(self):
        self.w = perturbed_weights(preset("desk"), seed=1)
        self.pyr = forward(np.random.default_rng(3).uniform(size=(32, 32)), self.w)

    def test_corner_keypoint(self):
        ds = describe_sparse(self.pyr, [(0.0, 0.0)])
        for d, lv in zip(ds.descriptors, self.pyr.levels):
            np.testing.assert_array_equal(d.data[0], lv.data[:, 0, 0])

    def test_constant_level(self):
        from s2dmatch.backbone import FeaturePyramid

        col = np.arange(4.0)
        lv = Tensor(np.broadcast_to(col[:, None, None], (4, 3, 3)).copy())
        pyr = FeaturePyramid([lv], (4,), (12, 12))
        ds = describe_sparse(pyr, [(5.3, 7.9), (11.5, 0.2)])
        np.testing.assert_allclose(ds.descriptors[0].data, [col, col], atol=1e-12)

    def test_bilinear_blend(self):
        from s2dmatch.backbone import FeaturePyramid

        lv = np.random.default_rng(5).normal(size=(3, 4, 4))
        pyr = FeaturePyramid([Tensor(lv)], (4,), (16, 16))
        ds = describe_sparse(pyr, [(5.0, 3.0)])
        np.testing.assert_allclose(ds.coords[0], [[1.25, 0.75]])
        x, y = 1.25, 0.75
        expected = (
            (1 - 0.25) * (1 - 0.75) * lv[:, 0, 1]
            + 0.25 * (1 - 0.75) * lv[:, 0, 2]
            + (1 - 0.25) * 0.75 * lv[:, 1, 1]
            + 0.25 * 0.75 * lv[:, 1, 2]
        )
        np.testing.assert_allclose(ds.descriptors[0].data[0], expected, rtol=1e-12)

    def test_lattice_points_index_directly(self):
        ds = describe_sparse(self.pyr, [(16.0, 16.0)])
        np.testing.assert_array_equal(ds.descriptors[0].data[0], self.pyr.levels[0].data[:, 16, 16])
        np.testing.assert_array_equal(ds.descriptors[1].data[0], self.pyr.levels[1].data[:, 4, 4])
        np.testing.assert_array_equal(ds.descriptors[2].data[0], self.pyr.levels[2].data[:, 1, 1])

    def test_out_of_image_rejected_with_index(self):
        with pytest.raises(KeypointBoundsError) as exc:
            describe_sparse(self.pyr, [(1, 1), (2, 2), (32, 4)])
        assert exc.value.index == 2

    def test_count(self):
        ds = describe_sparse(self.pyr, np.random.default_rng(0).uniform(0, 31, size=(7, 2)))
        assert len(ds) == 7 and len(ds.descriptors) == 3
        assert ds.concatenated().shape == (7, 96)


class TestWeightFile:
    def test_roundtrip_bitwise(self, tmp_path):
        w = perturbed_weights(preset("desk"), seed=2)
        save_weights(w, tmp_path / "w.s2dw")
        back = load_weights(tmp_path / "w.s2dw")
        assert back.config == w.config
        assert back.fingerprint == w.fingerprint
        assert list(back.params) == list(w.params)
        for k in w.params:
            assert back.params[k].tobytes() == w.params[k].tobytes()

    def test_corrupt_magic(self, tmp_path):
        p = tmp_path / "w.s2dw"
        save_weights(Weights.init(preset("desk2")), p)
        raw = bytearray(p.read_bytes())
        raw[0:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(WeightFormatError):
            load_weights(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "w.s2dw"
        save_weights(Weights.init(preset("desk2")), p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(WeightFormatError, match="truncated"):
            load_weights(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "w.s2dw"
        save_weights(Weights.init(preset("desk2")), p)
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(WeightFormatError, match="version"):
            load_weights(p)

    def test_fingerprint_mismatch(self, tmp_path):
        p = tmp_path / "w.s2dw"
        save_weights(Weights.init(preset("desk2")), p)
        with pytest.raises(ConfigError):
            load_weights(p, config=preset("desk"))

    def test_no_partial_file_left_on_failure(self, tmp_path, monkeypatch):
        import os

        p = tmp_path / "w.s2dw"
        save_weights(Weights.init(preset("desk2")), p)
        before = p.read_bytes()

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(OSError):
            save_weights(Weights.init(preset("desk2"), seed=9), p)
        assert p.read_bytes() == before
        assert [f.name for f in tmp_path.iterdir()] == ["w.s2dw"]
