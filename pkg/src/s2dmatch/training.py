"""Synthetic homography pairs and the cross-entropy training loop.

Pairs are cut from procedurally generated base images: crop A is an axis
aligned window, crop B is the same neighbourhood seen through a random
four-corner homography with photometric jitter. Ground truth comes straight
from the homography, so every label is exact up to lattice rounding.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._atomic import atomic_write_text
from .backbone import Weights, describe_sparse, forward, save_weights
from .detector import harris
from .evaluation import Homography, aggregate, mma
from .layers import cross_entropy2d
from .matcher import MatchConfig, correspondence_maps, match_pyramids
from .tensor import Tensor, add_all


class TrainingDivergedError(RuntimeError):
    pass


# procedural base images ----------------------------------------------------------------


def synthetic_image(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Textured grayscale scene in [0, 1] built from overlapping shapes over smooth shading."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = rng.uniform(0.3, 0.7) + rng.uniform(-0.3, 0.3) * (xx / w - 0.5) + rng.uniform(-0.3, 0.3) * (yy / h - 0.5)
    area = h * w
    for _ in range(max(4, int(area / 180))):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(2, max(3.0, min(h, w) / 6))
        val = rng.uniform(0, 1)
        kind = rng.integers(3)
        if kind == 0:
            ang = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
            v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
            mask = (np.abs(u) < r) & (np.abs(v) < r * rng.uniform(0.3, 1.0))
        elif kind == 1:
            mask = ((xx - cx) / r) ** 2 + ((yy - cy) / (r * rng.uniform(0.4, 1.0))) ** 2 < 1
        else:
            ang = rng.uniform(0, 2 * np.pi, size=3)
            px, py = cx + r * np.cos(ang), cy + r * np.sin(ang)
            d = [(xx - px[i]) * (py[(i + 1) % 3] - py[i]) - (yy - py[i]) * (px[(i + 1) % 3] - px[i]) for i in range(3)]
            mask = ((d[0] >= 0) & (d[1] >= 0) & (d[2] >= 0)) | ((d[0] <= 0) & (d[1] <= 0) & (d[2] <= 0))
        img = np.where(mask, val, img)
    img += ndimage.gaussian_filter(rng.normal(0, 0.08, size=shape), 1.0)
    img = ndimage.gaussian_filter(img, 0.6)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.full(shape, 0.5)


# pair generation ------------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    corner_jitter: float = 0.15
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.8, 1.2)
    gamma: tuple[float, float] = (0.8, 1.25)
    noise_sigma: float = 0.02
    blur_prob: float = 0.2
    blur_sigma: float = 0.7
    photometric: bool = True

    def __post_init__(self):
        if not 0.0 <= self.corner_jitter < 0.5:
            raise ValueError("corner_jitter must lie in [0, 0.5)")


@dataclass
class TrainPair:
    crop_a: np.ndarray
    crop_b: np.ndarray
    src: np.ndarray  # (N, 2) integer (x, y) in A
    tgt: np.ndarray  # (N, 2) integer (x, y) in B
    homography: Homography  # maps A pixel coordinates to B
    valid_b: np.ndarray = field(repr=False, default=None)


def four_point_homography(src, dst) -> np.ndarray:
    """Exact homography taking 4 source points to 4 destination points (h33 = 1)."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    a = np.asarray(a, dtype=np.float64)
    if np.linalg.cond(a) > 1e12:
        raise np.linalg.LinAlgError("degenerate corner configuration")
    return np.append(np.linalg.solve(a, np.asarray(b, dtype=np.float64)), 1.0).reshape(3, 3)


def _convex_same_order(pts) -> bool:
    cross = []
    for i in range(4):
        p, q, r = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
        cross.append((q[0] - p[0]) * (r[1] - q[1]) - (q[1] - p[1]) * (r[0] - q[0]))
    return all(c > 0 for c in cross)


def round_half_up(v):
    return np.floor(np.asarray(v) + 0.5).astype(np.int64)


def photometric_jitter(img: np.ndarray, aug: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    g = rng.uniform(*aug.gamma)
    c = rng.uniform(*aug.contrast)
    b = rng.uniform(-aug.brightness, aug.brightness)
    blur = rng.uniform() < aug.blur_prob
    noise = rng.normal(0, aug.noise_sigma, size=img.shape) if aug.noise_sigma > 0 else 0.0
    out = np.clip(img, 0, 1) ** g
    out = (out - out.mean()) * c + out.mean() + b
    if blur:
        out = ndimage.gaussian_filter(out, aug.blur_sigma)
    return np.clip(out + noise, 0, 1)


def generate_pair(
    base_image,
    crop_size: int,
    augment: AugmentParams,
    rng: np.random.Generator,
    max_corr: int = 128,
    margin: int = 2,
    max_tries: int = 20,
) -> TrainPair:
    """Cut a homography-related crop pair with ground-truth lattice correspondences.

    The crop-B window is the crop-A window with each corner moved by up to
    ``corner_jitter * crop_size`` pixels. Pixels of B whose preimage leaves
    the base image are invalid and never used as ground truth.
    """
    base = np.asarray(base_image, dtype=np.float64)
    s = crop_size
    jit = augment.corner_jitter * s
    pad = int(math.ceil(jit)) + 1
    bh, bw = base.shape
    if bh < s + 2 * pad or bw < s + 2 * pad:
        raise ValueError(f"base image {bw}x{bh} too small for {s}px crops with {pad}px jitter margin")
    ox = int(rng.integers(pad, bw - s - pad + 1))
    oy = int(rng.integers(pad, bh - s - pad + 1))
    crop_a = base[oy : oy + s, ox : ox + s].copy()

    square = np.array([[0, 0], [s - 1, 0], [s - 1, s - 1], [0, s - 1]], dtype=np.float64)
    for _ in range(max_tries):
        corners = square + (ox, oy) + rng.uniform(-jit, jit, size=(4, 2))
        if not _convex_same_order(corners):
            continue
        try:
            h_b_to_base = four_point_homography(square, corners)
        except np.linalg.LinAlgError:
            continue
        break
    else:
        raise RuntimeError("could not draw a non-degenerate homography")

    qy, qx = np.mgrid[0:s, 0:s].astype(np.float64)
    q = np.stack([qx.ravel(), qy.ravel(), np.ones(s * s)])
    m = h_b_to_base @ q
    mx, my = m[0] / m[2], m[1] / m[2]
    valid = ((mx >= 0) & (mx <= bw - 1) & (my >= 0) & (my <= bh - 1)).reshape(s, s)
    crop_b = ndimage.map_coordinates(base, [my, mx], order=1, mode="nearest").reshape(s, s)
    if augment.photometric:
        crop_b = photometric_jitter(crop_b, augment, rng)
    crop_b = np.where(valid, crop_b, 0.0)

    shift = np.array([[1, 0, ox], [0, 1, oy], [0, 0, 1]], dtype=np.float64)
    h_ab = Homography(np.linalg.inv(h_b_to_base) @ shift)

    gy, gx = np.mgrid[margin : s - margin, margin : s - margin]
    pa = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pb = round_half_up(_apply(h_ab.matrix, pa))
    inside = np.all((pb >= margin) & (pb <= s - 1 - margin), axis=1)
    pa, pb = pa[inside], pb[inside]
    ok = valid[pb[:, 1], pb[:, 0]]
    pa, pb = pa[ok], pb[ok]
    if len(pa) > max_corr:
        pick = np.sort(rng.choice(len(pa), size=max_corr, replace=False))
        pa, pb = pa[pick], pb[pick]
    return TrainPair(crop_a, crop_b, pa.astype(np.int64), pb.astype(np.int64), h_ab, valid)


def _apply(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = np.c_[pts, np.ones(len(pts))] @ h.T
    return p[:, :2] / p[:, 2:]


# loss and optimizer ---------------------------------------------------------------------------


def pair_loss(pair: TrainPair, weights: Weights, leaves: dict[str, Tensor], aggregation: str = "add") -> Tensor:
    """Mean cross-entropy over the pair's ground-truth correspondences."""
    pa = forward(pair.crop_a, weights, mode="train", params=leaves)
    pb = forward(pair.crop_b, weights, mode="train", params=leaves)
    desc = describe_sparse(pa, pair.src.astype(np.float64))
    return cross_entropy_loss(correspondence_maps(desc, pb, aggregation), pair.tgt)


def cross_entropy_loss(logits: Tensor, targets) -> Tensor:
    """``-log softmax`` at each ground-truth lattice point, averaged over maps."""
    return cross_entropy2d(logits, targets)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype)


# training loop -------------------------------------------------------------------------------


@dataclass
class TrainConfig:
    crop_size: int = 64
    max_corr: int = 128
    epochs: int = 30
    steps_per_epoch: int = 100
    batch_pairs: int = 1
    lr: float = 1e-3
    lr_decay_rate: float = 0.1  # lr is multiplied by exp(-rate) after every epoch
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    margin: int = 2
    n_base_images: int = 32
    base_size: int = 96
    holdout_pairs: int = 50
    holdout_every: int = 5
    holdout_jitter: float = 0.10
    augment: AugmentParams = field(default_factory=AugmentParams)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentParams(**self.augment)
        for name in ("crop_size", "max_corr", "epochs", "steps_per_epoch", "batch_pairs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_decay_rate < 0:
            raise ValueError("lr must be positive and lr_decay_rate non-negative")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def lr_after(self, epoch: int) -> float:
        """Learning rate once ``epoch`` epochs have been decayed."""
        return self.lr * math.exp(-self.lr_decay_rate * epoch)


TRAIN_PRESETS = {
    "desk": TrainConfig(),
    "full": TrainConfig(crop_size=512, max_corr=128, epochs=30, base_size=640, n_base_images=256),
}


def check_crop(config: TrainConfig, weights: Weights) -> None:
    top = max(weights.config.scales)
    if config.crop_size % top:
        raise ValueError(f"crop_size {config.crop_size} is not divisible by the largest scale {top}")


def _seed_streams(seed: int):
    """Spawn the independent ``(base, train, holdout)`` seed sequences."""
    ss = np.random.SeedSequence(seed)
    base_ss, train_ss, hold_ss = ss.spawn(3)
    return base_ss, train_ss, hold_ss


def make_holdout(config: TrainConfig, hold_ss: np.random.SeedSequence) -> list[TrainPair]:
    aug = AugmentParams(**{**asdict(config.augment), "corner_jitter": config.holdout_jitter})
    rng = np.random.default_rng(hold_ss)
    pairs = []
    for _ in range(config.holdout_pairs):
        base = synthetic_image(rng, (config.base_size, config.base_size))
        pairs.append(generate_pair(base, config.crop_size, aug, rng, config.max_corr, config.margin))
    return pairs


def holdout_mma(
    weights: Weights,
    pairs: list[TrainPair],
    match_config: MatchConfig | None = None,
    detector: dict | None = None,
    thresholds=(1, 3, 5),
) -> dict:
    """Harris keypoints on A, matched into B, scored against the generating homography."""
    match_config = match_config or MatchConfig()
    detector = {"max_keypoints": 100, "border": 2, **(detector or {})}
    reports = []
    for p in pairs:
        kps = harris(p.crop_a, **detector)
        pa, pb = forward(p.crop_a, weights), forward(p.crop_b, weights)
        matches = match_pyramids(pa, kps, pb, match_config)
        reports.append(mma(matches, p.homography, thresholds))
    return aggregate(reports, thresholds)


def train(
    config: TrainConfig,
    weights: Weights,
    base_images: list[np.ndarray] | None = None,
    weights_out: str | Path | None = None,
    report_path: str | Path | None = None,
    log=None,
) -> list[dict]:
    """Train ``weights`` in place and return one record per epoch.

    Each record is ``{epoch, lr, mean_loss, holdout_mma@1, @3, @5}``; the MMA
    fields are ``None`` on epochs without a held-out evaluation. ``lr`` is the
    rate after that epoch's decay, ``lr * exp(-0.1 * epoch)`` by default.
    """
    check_crop(config, weights)
    base_ss, train_ss, hold_ss = _seed_streams(config.seed)
    if not base_images:
        brng = np.random.default_rng(base_ss)
        base_images = [synthetic_image(brng, (config.base_size,) * 2) for _ in range(config.n_base_images)]
    holdout = make_holdout(config, hold_ss) if config.holdout_pairs else []
    pair_seeds = train_ss.spawn(config.total_steps * config.batch_pairs)

    state = AdamState(config.beta1, config.beta2, config.adam_eps)
    records: list[dict] = []
    lines: list[str] = []
    lr = config.lr
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for _ in range(config.steps_per_epoch):
            leaves = weights.leaves()
            pair_losses = []
            for _ in range(config.batch_pairs):
                pseed = pair_seeds[step * config.batch_pairs + len(pair_losses)]
                rng = np.random.default_rng(pseed)
                base = base_images[int(rng.integers(len(base_images)))]
                pair = generate_pair(base, config.crop_size, config.augment, rng, config.max_corr, config.margin)
                if len(pair.src) == 0:
                    continue
                loss = pair_loss(pair, weights, leaves)
                if not np.isfinite(loss.item()):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, step {step + 1}, lr {lr:.6g}, "
                        f"pair seed entropy {pseed.entropy} spawn key {pseed.spawn_key}"
                    )
                pair_losses.append(loss)
            step += 1
            if not pair_losses:
                continue
            total = add_all(pair_losses)
            total.backward()
            grads = {n: t.grad for n, t in leaves.items() if t.grad is not None}
            adam_step(weights.params, grads, state, lr)
            losses.append(total.item() / len(pair_losses))
        lr = config.lr_after(epoch)
        rec = {"epoch": epoch, "lr": lr, "mean_loss": float(np.mean(losses)) if losses else None}
        do_eval = holdout and (epoch % config.holdout_every == 0 or epoch == config.epochs)
        agg = holdout_mma(weights, holdout)["mma_match_weighted"] if do_eval else {}
        for t in ("1", "3", "5"):
            rec[f"holdout_mma@{t}"] = agg.get(t)
        records.append(rec)
        lines.append(json.dumps(rec))
        if log:
            log(rec)
        if report_path is not None:
            atomic_write_text(report_path, "\n".join(lines) + "\n")
    if weights_out is not None:
        save_weights(weights, weights_out)
    return records
