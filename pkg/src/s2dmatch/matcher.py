"""Sparse-to-dense matching through multi-level correspondence maps.

For a source keypoint with per-level descriptors ``d_m`` and target feature
maps ``H_m``, the correspondence map over every target pixel is

    C = sum_m upsample(d_m . H_m)

Its softmax over the target lattice is the match likelihood; the lattice
argmax is the match and the probability there is its confidence.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._atomic import atomic_write_text
from .backbone import FeaturePyramid, SparseDescriptorSet, Weights, describe_sparse, forward
from .detector import Keypoint, harris, keypoints_to_array
from .layers import ShapeError, bilinear_upsample, concat_channels, correlate_1x1
from .tensor import Tensor, add_all, no_grad

AGGREGATIONS = ("add", "concat")
MODES = ("s2d", "s2s")

# keypoints per correspondence-map batch are capped so a batch holds about this many floats
_MAP_BUDGET = 1 << 22


@dataclass
class MatchConfig:
    tau: float = 0.20
    cyclic_check: bool = True
    aggregation: str = "add"
    mode: str = "s2d"
    cyclic_tolerance: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.cyclic_tolerance < 0:
            raise ValueError("cyclic_tolerance must be non-negative")


@dataclass(frozen=True)
class Match:
    source: Keypoint
    target: tuple[int, int]
    confidence: float


@dataclass
class CorrespondenceMap:
    logits: Tensor
    source: Keypoint

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape[1:]


# correspondence maps --------------------------------------------------------------


def correspondence_maps(
    descriptors: SparseDescriptorSet,
    target: FeaturePyramid,
    aggregation: str = "add",
    index=None,
) -> Tensor:
    """Logits ``(N, H_B, W_B)`` for all (or ``index``-selected) source keypoints.

    ``"add"`` correlates each level at its own resolution, upsamples the
    scores and sums them. ``"concat"`` upsamples the feature maps first,
    stacks their channels and correlates once; both are equal up to rounding
    because correlation and upsampling are linear.
    """
    h, w = target.source_shape
    descs = descriptors.descriptors
    if index is not None:
        descs = [_rows(d, index) for d in descs]
    if len(descs) != len(target.levels):
        raise ShapeError(f"{len(descs)} descriptor levels vs {len(target.levels)} pyramid levels")
    for d, lv in zip(descs, target.levels):
        if d.shape[1] != lv.shape[0]:
            raise ShapeError(f"descriptor width {d.shape[1]} vs {lv.shape[0]} map channels")
    if aggregation == "add":
        return add_all([bilinear_upsample(correlate_1x1(d, lv), h, w) for d, lv in zip(descs, target.levels)])
    if aggregation == "concat":
        dense = concat_channels([bilinear_upsample(lv, h, w) for lv in target.levels])
        return correlate_1x1(concat_channels(descs, axis=1), dense)
    raise ValueError(f"unknown aggregation {aggregation!r}")


def _rows(t: Tensor, index) -> Tensor:
    index = np.asarray(index)
    shape = t.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(t.data[index], (t,), backward)


def correspondence_map(descriptors: SparseDescriptorSet, n: int, target: FeaturePyramid,
                       aggregation: str = "add") -> CorrespondenceMap:
    logits = correspondence_maps(descriptors, target, aggregation, index=[n])
    x, y = descriptors.keypoints[n]
    return CorrespondenceMap(logits, Keypoint(float(x), float(y)))


def likelihood(cmap: CorrespondenceMap | Tensor) -> np.ndarray:
    """Softmax of the logits over the whole target lattice, as an ``(H, W)`` grid."""
    logits = cmap.logits if isinstance(cmap, CorrespondenceMap) else cmap
    x = np.asarray(logits.data, dtype=np.float64).reshape(-1)
    e = np.exp(x - x.max())
    return (e / e.sum()).reshape(logits.shape[-2:])


def retrieve_batch(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-major-first argmax of each ``(H, W)`` map and the softmax probability there.

    Returns ``(targets, confidence)`` with ``targets[n] = (x, y)``.
    """
    n, h, w = logits.shape
    flat = logits.reshape(n, -1)
    arg = flat.argmax(axis=1)
    peak = flat[np.arange(n), arg].astype(np.float64)
    z = np.exp(flat.astype(np.float64) - peak[:, None]).sum(axis=1)
    targets = np.stack([arg % w, arg // w], axis=1)
    return targets, 1.0 / z


def retrieve(cmap: CorrespondenceMap) -> Match:
    t, conf = retrieve_batch(cmap.logits.data.reshape(1, *cmap.shape))
    return Match(cmap.source, (int(t[0, 0]), int(t[0, 1])), float(conf[0]))


def filter_by_confidence(matches: list[Match], tau: float) -> list[Match]:
    """Keep matches whose confidence is strictly greater than ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return [m for m in matches if m.confidence > tau]


def _chunks(n: int, area: int):
    step = max(1, _MAP_BUDGET // max(area, 1))
    for lo in range(0, n, step):
        yield np.arange(lo, min(n, lo + step))


def dense_retrieve(descriptors: SparseDescriptorSet, target: FeaturePyramid,
                   aggregation: str = "add") -> tuple[np.ndarray, np.ndarray]:
    """Targets and confidences for every keypoint of ``descriptors``, in bounded batches.

    Scores are accumulated in float64 so that aggregation modes and argmax
    tie-breaks do not depend on float32 rounding.
    """
    descriptors = SparseDescriptorSet(
        [Tensor(d.data.astype(np.float64)) for d in descriptors.descriptors],
        descriptors.coords,
        descriptors.keypoints,
    )
    target = FeaturePyramid(
        [Tensor(lv.data.astype(np.float64)) for lv in target.levels],
        target.scales,
        target.source_shape,
        target.fingerprint,
    )
    n = len(descriptors)
    targets = np.zeros((n, 2), dtype=np.int64)
    conf = np.zeros(n)
    h, w = target.source_shape
    with no_grad():
        for idx in _chunks(n, h * w):
            logits = correspondence_maps(descriptors, target, aggregation, index=idx).data
            targets[idx], conf[idx] = retrieve_batch(logits)
    return targets, conf


def round_half_up(v) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def cyclic_check(
    matches: list[Match],
    pyramid_a: FeaturePyramid,
    pyramid_b: FeaturePyramid,
    tolerance: float = 0.0,
    aggregation: str = "add",
) -> list[Match]:
    """Keep matches whose target, matched back into image A, lands on the source pixel.

    The back-match uses no confidence threshold. The source keypoint is rounded
    to the nearest lattice point (halves round up) and the back-match must lie
    within ``tolerance`` pixels of it (exact equality by default).
    """
    if not matches:
        return []
    tgt = np.array([m.target for m in matches], dtype=np.float64)
    back_desc = describe_sparse(pyramid_b, tgt)
    back, _ = dense_retrieve(back_desc, pyramid_a, aggregation)
    src = round_half_up([(m.source.x, m.source.y) for m in matches])
    dist = np.hypot(*(back - src).T)
    return [m for m, d in zip(matches, dist) if d <= tolerance]


def mutual_nearest_neighbors(desc_a: np.ndarray, desc_b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mutual nearest neighbours under Euclidean distance.

    Returns ``(ia, ib, confidence)`` where the confidence is the softmax of
    the descriptor dot products of ``ia`` over all rows of ``desc_b``.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    a = desc_a.astype(np.float64)
    b = desc_b.astype(np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    nn_ab = d2.argmin(axis=1)
    nn_ba = d2.argmin(axis=0)
    ia = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(a)))
    ib = nn_ab[ia]
    sim = a[ia] @ b.T
    sim -= sim.max(axis=1, keepdims=True)
    p = np.exp(sim)
    conf = p[np.arange(len(ia)), ib] / p.sum(axis=1)
    return ia, ib, conf


def match_pyramids(
    pyramid_a: FeaturePyramid,
    keypoints_a,
    pyramid_b: FeaturePyramid,
    config: MatchConfig | None = None,
    keypoints_b=None,
) -> list[Match]:
    """Match keypoints of image A into image B given both feature pyramids.

    In ``s2s`` mode ``keypoints_b`` are required; matches are mutual nearest
    neighbours of the concatenated per-level descriptors, and neither the
    confidence threshold nor the cyclic check is applied (mutuality already
    is the cyclic check).
    """
    config = config or MatchConfig()
    if pyramid_a.channels != pyramid_b.channels:
        raise ShapeError("pyramids have different descriptor widths")
    kp_objs = _as_keypoints(keypoints_a)
    pts = keypoints_to_array(kp_objs)
    if len(pts) == 0:
        return []
    desc_a = describe_sparse(pyramid_a, pts)

    if config.mode == "s2s":
        if keypoints_b is None:
            raise ValueError("s2s matching needs keypoints in image B")
        pts_b = keypoints_to_array(_as_keypoints(keypoints_b))
        if len(pts_b) == 0:
            return []
        desc_b = describe_sparse(pyramid_b, pts_b)
        ia, ib, conf = mutual_nearest_neighbors(desc_a.concatenated(), desc_b.concatenated())
        tb = round_half_up(pts_b[ib])
        return [Match(kp_objs[i], (int(x), int(y)), float(c)) for i, (x, y), c in zip(ia, tb, conf)]

    targets, conf = dense_retrieve(desc_a, pyramid_b, config.aggregation)
    matches = [Match(k, (int(t[0]), int(t[1])), float(c)) for k, t, c in zip(kp_objs, targets, conf)]
    matches = filter_by_confidence(matches, config.tau)
    if config.cyclic_check:
        matches = cyclic_check(matches, pyramid_a, pyramid_b, config.cyclic_tolerance, config.aggregation)
    return matches


def _as_keypoints(kps) -> list[Keypoint]:
    if kps is None:
        return []
    if len(kps) and isinstance(kps[0], Keypoint):
        return list(kps)
    return [Keypoint(float(x), float(y)) for x, y in np.asarray(kps, dtype=np.float64).reshape(-1, 2)]


def _gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[-1] == 3:
            img = img @ np.array([0.299, 0.587, 0.114])
        elif img.shape[0] == 3:
            img = np.tensordot([0.299, 0.587, 0.114], img, axes=1)
        else:
            img = img.reshape(img.shape[-2:]) if img.shape[0] == 1 else img[..., 0]
    return img


def match_pair(
    image_a,
    keypoints_a,
    image_b,
    weights: Weights,
    config: MatchConfig | None = None,
    detector: dict | None = None,
) -> list[Match]:
    """Full pipeline: features for both images, then :func:`match_pyramids`.

    ``keypoints_a=None`` runs the Harris detector on A. In ``s2s`` mode Harris
    (with the same ``detector`` options) also runs on B.
    """
    config = config or MatchConfig()
    detector = detector or {}
    if keypoints_a is None:
        keypoints_a = harris(_gray(image_a), **detector)
    pa = forward(image_a, weights)
    pb = forward(image_b, weights)
    kps_b = harris(_gray(image_b), **detector) if config.mode == "s2s" else None
    return match_pyramids(pa, keypoints_a, pb, config, kps_b)


# match files ----------------------------------------------------------------------------


def write_matches(path, matches: list[Match]) -> None:
    lines = [
        f"{m.source.x:.6f} {m.source.y:.6f} {m.target[0]:.6f} {m.target[1]:.6f} {m.confidence:.6f}"
        for m in matches
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_matches(path) -> list[Match]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        f = line.split()
        if len(f) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'xA yA xB yB confidence'")
        xa, ya, xb, yb, c = map(float, f)
        out.append(Match(Keypoint(xa, ya), (int(round(xb)), int(round(yb))), c))
    return out


# online timing ----------------------------------------------------------------------------


def online_cost_model(t_a: float, t_b: float, t_c: float, n: int, k: int) -> float:
    """Total online time ``t_A + t_B + N * K * t_C`` (seconds)."""
    if min(t_a, t_b, t_c, n, k) < 0:
        raise ValueError("timing model inputs must be non-negative")
    return t_a + t_b + n * k * t_c


@dataclass
class TimingReport:
    t_A_ms: float
    t_B_ms: float
    t_C_ms: float
    N: int
    K: int
    modeled_total_s: float
    measured_total_s: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def benchmark_online_time(
    weights: Weights,
    query_image,
    n_refs: int = 1,
    k: int = 100,
    mode: str = "s2d",
    repeats: int = 5,
    seed: int = 0,
    aggregation: str = "add",
) -> TimingReport:
    """Time the localization-style online phase against ``n_refs`` reference images.

    Reference descriptors (``k`` random lattice keypoints on synthetic
    reference images) are prepared offline and not timed. ``t_A`` is the
    query forward pass, ``t_B`` the query detection step (zero for s2d) and
    ``t_C`` the per-keypoint matching cost. Each quantity is the median of
    ``repeats`` runs; the measured total is the median of end-to-end runs.
    """
    from .training import synthetic_image

    rng = np.random.default_rng(seed)
    qh, qw = np.shape(query_image)[:2]
    refs = []
    for _ in range(n_refs):
        ref = synthetic_image(rng, (qh, qw))
        pyr = forward(ref, weights)
        pts = np.stack([rng.integers(0, qw, size=k), rng.integers(0, qh, size=k)], axis=1).astype(np.float64)
        refs.append((describe_sparse(pyr, pts), pyr))

    def run_query():
        return forward(query_image, weights)

    def run_detect():
        if mode != "s2s":
            return None
        return harris(_gray(query_image))

    def run_match(desc, pyr_q):
        return dense_retrieve(desc, pyr_q, aggregation)

    def timed(fn, *args):
        t0 = time.perf_counter()
        fn(*args)
        return time.perf_counter() - t0

    def end_to_end():
        pq = run_query()
        run_detect()
        for desc, _ in refs:
            run_match(desc, pq)

    pyr_q = run_query()
    run_match(refs[0][0], pyr_q)  # warm-up

    # component and end-to-end timings are interleaved so that load drift
    # during the benchmark affects both sides alike
    ta, tb, tc, tm = [], [], [], []
    for _ in range(repeats):
        ta.append(timed(run_query))
        tb.append(timed(run_detect) if mode == "s2s" else 0.0)
        tc.append(timed(run_match, refs[0][0], pyr_q) / max(k, 1))
        tm.append(timed(end_to_end))
    t_a, t_b, t_c = (float(np.median(v)) for v in (ta, tb, tc))
    measured = float(np.median(tm))
    modeled = online_cost_model(t_a, t_b, t_c, n_refs, k)
    return TimingReport(t_a * 1e3, t_b * 1e3, t_c * 1e3, n_refs, k, modeled, measured)
