"""Harris corner detection and keypoint text files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._atomic import atomic_write_text


@dataclass(frozen=True)
class Keypoint:
    """Pixel position (x right, y down, origin at the top-left pixel centre) and score."""

    x: float
    y: float
    score: float = 0.0

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


def keypoints_to_array(keypoints) -> np.ndarray:
    if len(keypoints) == 0:
        return np.zeros((0, 2))
    if isinstance(keypoints[0], Keypoint):
        return np.array([k.xy for k in keypoints], dtype=np.float64)
    return np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)


_SMOOTH = np.array([1.0, 2.0, 1.0]) / 4.0


def harris_response(image, k: float = 0.05) -> np.ndarray:
    """``det(M) - k trace(M)^2`` of the Sobel structure tensor, 3x3 Gaussian window."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"harris needs a non-empty grayscale image, got shape {img.shape}")
    ix = ndimage.sobel(img, axis=1, mode="reflect")
    iy = ndimage.sobel(img, axis=0, mode="reflect")

    def smooth(a):
        a = ndimage.correlate1d(a, _SMOOTH, axis=0, mode="reflect")
        return ndimage.correlate1d(a, _SMOOTH, axis=1, mode="reflect")

    sxx, syy, sxy = smooth(ix * ix), smooth(iy * iy), smooth(ix * iy)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def harris(
    image,
    k: float = 0.05,
    nms_radius: int = 4,
    max_keypoints: int = 1000,
    min_score: float = 1e-3,
    border: int = 0,
) -> list[Keypoint]:
    """Detect Harris corners.

    Parameters
    ----------
    image : array_like
        ``(H, W)`` grayscale image.
    k : float
        Trace weight of the response; 0.04-0.06 is usual.
    nms_radius : int
        Greedy suppression radius (Chebyshev distance, pixels).
    max_keypoints : int
        Upper bound on the number of returned keypoints.
    min_score : float
        Threshold relative to the strongest response; only strictly positive
        responses above ``min_score * max(response)`` are candidates.
    border : int
        Pixels to ignore along each image edge.

    Returns
    -------
    list of Keypoint
        Integer-lattice positions in descending score order.
    """
    r = harris_response(image, k)
    h, w = r.shape
    peak = r.max()
    if peak <= 0 or max_keypoints <= 0:
        return []
    cand = r > max(min_score * peak, 0.0)
    if border:
        cand[:border] = cand[-border:] = False
        cand[:, :border] = cand[:, -border:] = False
    ys, xs = np.nonzero(cand)
    scores = r[ys, xs]
    order = np.lexsort((xs, ys, -scores))  # score desc, then row-major

    taken = np.zeros((h, w), dtype=bool)
    out: list[Keypoint] = []
    rad = int(nms_radius)
    for i in order:
        y, x = ys[i], xs[i]
        if taken[y, x]:
            continue
        out.append(Keypoint(float(x), float(y), float(scores[i])))
        if len(out) >= max_keypoints:
            break
        taken[max(0, y - rad) : y + rad + 1, max(0, x - rad) : x + rad + 1] = True
    return out


# keypoint files -----------------------------------------------------------------


class KeypointFileError(ValueError):
    def __init__(self, message: str, lines: list[int] | None = None):
        self.lines = lines or []
        super().__init__(message)


def import_keypoints(path, image_size: tuple[int, int] | None = None) -> list[Keypoint]:
    """Read ``x y [score]`` lines. ``image_size`` is ``(width, height)`` for bounds checks."""
    out: list[Keypoint] = []
    bad: list[int] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        fields = text.split()
        if len(fields) not in (2, 3):
            raise KeypointFileError(f"{path}:{lineno}: expected 'x y [score]', got {line!r}", [lineno])
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise KeypointFileError(f"{path}:{lineno}: non-numeric field in {line!r}", [lineno]) from None
        if not all(np.isfinite(vals)):
            raise KeypointFileError(f"{path}:{lineno}: non-finite value", [lineno])
        kp = Keypoint(vals[0], vals[1], vals[2] if len(vals) == 3 else 0.0)
        if image_size is not None:
            w, h = image_size
            if not (0 <= kp.x < w and 0 <= kp.y < h):
                bad.append(lineno)
        out.append(kp)
    if bad:
        raise KeypointFileError(
            f"{path}: keypoints outside the {image_size[0]}x{image_size[1]} image on lines "
            + ", ".join(map(str, bad)),
            bad,
        )
    return out


def export_keypoints(path, keypoints) -> None:
    lines = [f"{k.x:.6f} {k.y:.6f} {k.score:.6g}" for k in keypoints]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
