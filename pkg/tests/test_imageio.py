import numpy as np
import pytest

from s2dmatch.imageio import ImageFormatError, decode_image, encode_image, load_image, save_image


class TestCodec:
    def test_gray_roundtrip_bytes(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, size=(7, 9), dtype=np.uint8)
        save_image(tmp_path / "a.pgm", px)
        arr, maxval = decode_image((tmp_path / "a.pgm").read_bytes())
        assert maxval == 255 and np.array_equal(arr, px)
        np.testing.assert_array_equal(load_image(tmp_path / "a.pgm"), px / 255)

    def test_rgb_roundtrip(self, tmp_path):
        px = np.random.default_rng(1).integers(0, 256, size=(4, 5, 3), dtype=np.uint8)
        save_image(tmp_path / "a.ppm", px)
        assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"
        arr, _ = decode_image((tmp_path / "a.ppm").read_bytes())
        assert np.array_equal(arr, px)

    def test_float_roundtrip_is_stable(self, tmp_path):
        img = np.random.default_rng(2).uniform(size=(6, 6))
        save_image(tmp_path / "a.pgm", img)
        once = load_image(tmp_path / "a.pgm")
        save_image(tmp_path / "b.pgm", once)
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_sixteen_bit(self):
        raw = b"P5\n2 1\n65535\n" + np.array([0, 65535], dtype=">u2").tobytes()
        arr, maxval = decode_image(raw)
        assert maxval == 65535 and arr.tolist() == [[0, 65535]]

    def test_sixteen_bit_normalization(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5 3 1 65535 " + np.array([1, 1000, 65535], dtype=">u2").tobytes())
        np.testing.assert_array_equal(load_image(tmp_path / "a.pgm"), [[1 / 65535, 1000 / 65535, 1.0]])

    def test_comments_in_header(self):
        arr, _ = decode_image(b"P5\n# made by hand\n2 2\n# max\n255\n\x00\x01\x02\x03")
        assert arr.tolist() == [[0, 1], [2, 3]]

    def test_ascii_variant_named(self):
        with pytest.raises(ImageFormatError, match="P3"):
            decode_image(b"P3\n1 1\n255\n0 0 0\n")

    def test_truncated(self):
        with pytest.raises(ImageFormatError, match="truncated"):
            decode_image(b"P5\n4 4\n255\n\x00\x00")

    def test_malformed(self):
        with pytest.raises(ImageFormatError):
            decode_image(b"P5\nfour 4\n255\n")
        with pytest.raises(ImageFormatError):
            decode_image(b"JUNK")

    def test_gray_conversion(self, tmp_path):
        px = np.zeros((1, 1, 3), dtype=np.uint8)
        px[0, 0] = [255, 0, 0]
        save_image(tmp_path / "r.ppm", px)
        assert load_image(tmp_path / "r.ppm", gray=True)[0, 0] == pytest.approx(0.299)

    def test_encode_rejects_bad_shape(self):
        with pytest.raises(ImageFormatError):
            encode_image(np.zeros((2, 2, 2)))
