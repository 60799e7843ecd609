import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2dmatch.detector import (
    Keypoint,
    KeypointFileError,
    export_keypoints,
    harris,
    harris_response,
    import_keypoints,
)


def brute_force_response(img, k):
    """Loop-level Harris: Sobel, [1 2 1]/4 window, half-sample symmetric borders."""
    h, w = img.shape

    def at(a, y, x):
        # scipy 'reflect': d c b a | a b c d | d c b a
        y = -y - 1 if y < 0 else (2 * h - y - 1 if y >= h else y)
        x = -x - 1 if x < 0 else (2 * w - x - 1 if x >= w else x)
        return a[y, x]

    ix = np.zeros_like(img)
    iy = np.zeros_like(img)
    smooth = [1, 2, 1]
    diff = [-1, 0, 1]
    for y in range(h):
        for x in range(w):
            gx = gy = 0.0
            for a in range(3):
                for b in range(3):
                    v = at(img, y + a - 1, x + b - 1)
                    gx += smooth[a] * diff[b] * v
                    gy += diff[a] * smooth[b] * v
            ix[y, x], iy[y, x] = gx, gy
    prods = [ix * ix, iy * iy, ix * iy]
    sm = [np.zeros_like(img) for _ in prods]
    for p, s in zip(prods, sm):
        for y in range(h):
            for x in range(w):
                s[y, x] = sum(smooth[a] * smooth[b] * at(p, y + a - 1, x + b - 1)
                              for a in range(3) for b in range(3)) / 16.0
    sxx, syy, sxy = sm
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def square_image():
    img = np.zeros((32, 32))
    img[10:22, 8:20] = 1.0
    return img


def test_response_matches_brute_force():
    img = square_image()
    np.testing.assert_allclose(harris_response(img, 0.05), brute_force_response(img, 0.05), atol=1e-12)


def test_square_corners():
    img = square_image()
    kps = harris(img, max_keypoints=10, min_score=0.1)
    assert len(kps) == 4
    # oracle: the 4 strongest strict local maxima of the brute-force map
    r = brute_force_response(img, 0.05)
    peaks = []
    for y in range(1, 31):
        for x in range(1, 31):
            win = r[y - 1 : y + 2, x - 1 : x + 2]
            if r[y, x] > 0 and r[y, x] == win.max() and (win == r[y, x]).sum() == 1:
                peaks.append((r[y, x], x, y))
    top = sorted(peaks, reverse=True)[:4]
    assert sorted((k.x, k.y) for k in kps) == sorted((float(x), float(y)) for _, x, y in top)
    corners = [(7.5, 9.5), (19.5, 9.5), (7.5, 21.5), (19.5, 21.5)]
    for cx, cy in corners:
        assert min(np.hypot(k.x - cx, k.y - cy) for k in kps) <= 2.0


def test_constant_image_has_no_keypoints():
    assert harris(np.full((20, 20), 0.3)) == []


def test_step_edge_rejected():
    img = np.zeros((24, 24))
    img[:, 12:] = 1.0
    assert harris(img, min_score=1e-6) == []


def test_empty_image_error():
    with pytest.raises(ValueError):
        harris(np.zeros((0, 5)))


def _random_scene(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(40, 48))
    return img


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), radius=st.integers(1, 6), cap=st.integers(1, 50))
def test_nms_and_ordering_properties(seed, radius, cap):
    kps = harris(_random_scene(seed), nms_radius=radius, max_keypoints=cap, min_score=0.0)
    assert len(kps) <= cap
    scores = [k.score for k in kps]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    for i, a in enumerate(kps):
        for b in kps[i + 1 :]:
            assert max(abs(a.x - b.x), abs(a.y - b.y)) > radius


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-5, 5))
def test_response_invariant_to_intensity_offset(seed, c):
    img = _random_scene(seed)
    np.testing.assert_allclose(harris_response(img + c), harris_response(img), atol=1e-6)


class TestKeypointFiles:
    def test_parse_line(self, tmp_path):
        p = tmp_path / "k.txt"
        p.write_text("3.5 7.25 0.9\n")
        assert import_keypoints(p) == [Keypoint(3.5, 7.25, 0.9)]

    def test_empty(self, tmp_path):
        p = tmp_path / "k.txt"
        p.write_text("")
        assert import_keypoints(p) == []

    def test_score_optional(self, tmp_path):
        p = tmp_path / "k.txt"
        p.write_text("1 2\n# comment\n\n4 5 0.5\n")
        assert import_keypoints(p) == [Keypoint(1, 2, 0.0), Keypoint(4, 5, 0.5)]

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "k.txt"
        p.write_text("1 2\n3 abc\n")
        with pytest.raises(KeypointFileError, match=":2:") as exc:
            import_keypoints(p)
        assert exc.value.lines == [2]

    def test_out_of_bounds_report(self, tmp_path):
        p = tmp_path / "k.txt"
        p.write_text("1 2\n50 3\n4 5\n4 40\n")
        with pytest.raises(KeypointFileError) as exc:
            import_keypoints(p, image_size=(32, 32))
        assert exc.value.lines == [2, 4]

    def test_roundtrip(self, tmp_path):
        kps = [Keypoint(1.0, 2.0, 0.5), Keypoint(10.25, 3.5, 12.0)]
        export_keypoints(tmp_path / "k.txt", kps)
        assert import_keypoints(tmp_path / "k.txt") == kps
