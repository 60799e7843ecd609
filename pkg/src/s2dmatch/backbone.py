"""Multi-level convolutional feature extractor with adaptation heads.

A trunk of VGG-style blocks (``convs_per_block`` 3x3 conv + ReLU pairs, some
followed by a 2x2 max-pool) is tapped after selected blocks. Each tap feeds an
adaptation head ``conv3x3 -> ReLU -> conv1x1 -> batchnorm`` that produces the
fixed-width descriptor map of that level.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ._atomic import atomic_write_bytes
from .layers import BatchNormParams, ConvParams, batchnorm, conv2d, maxpool2, relu, sample_points
from .tensor import Tensor


class ConfigError(ValueError):
    """Weights and configuration disagree."""


class WeightFormatError(ValueError):
    """A weight file cannot be parsed or carries an unknown version."""


@dataclass(frozen=True)
class BackboneConfig:
    """Topology of the feature extractor.

    Block indices in ``pool_after`` and ``extraction_points`` are 1-based.
    """

    trunk_channels: tuple[int, ...] = (8, 16, 32, 32, 32)
    convs_per_block: tuple[int, ...] = (2, 2, 2, 2, 2)
    pool_after: tuple[int, ...] = (1, 2, 3, 4)
    extraction_points: tuple[int, ...] = (1, 3, 5)
    adaptation_channels: int = 32
    adaptation_kernels: tuple[int, int] = (3, 1)
    in_channels: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    upsample: str = "align_corners"
    seed: int = 0

    def __post_init__(self):
        for name in ("trunk_channels", "convs_per_block", "pool_after", "extraction_points", "adaptation_kernels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        nb = len(self.trunk_channels)
        if len(self.convs_per_block) != nb:
            raise ConfigError("convs_per_block needs one entry per trunk block")
        ep = self.extraction_points
        if not ep or any(b <= a for a, b in zip(ep, ep[1:])):
            raise ConfigError("extraction_points must be non-empty and strictly increasing")
        if ep[0] < 1 or ep[-1] > nb or any(not 1 <= p <= nb for p in self.pool_after):
            raise ConfigError("block indices must lie in 1..len(trunk_channels)")
        if any(k % 2 == 0 for k in self.adaptation_kernels):
            raise ConfigError("adaptation kernels must be odd")
        if self.upsample != "align_corners":
            raise ConfigError(f"unsupported upsampling convention {self.upsample!r}")

    @property
    def n_levels(self) -> int:
        return len(self.extraction_points)

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(2 ** sum(1 for p in self.pool_after if p < e) for e in self.extraction_points)

    def to_text(self) -> str:
        lines = []
        for key, val in asdict(self).items():
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> BackboneConfig:
        types = {f: t for f, t in cls.__dataclass_fields__.items()}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            default = types[key].default
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in val.split(",") if v.strip())
            elif isinstance(default, float):
                kwargs[key] = float(val)
            elif isinstance(default, int):
                kwargs[key] = int(val)
            else:
                kwargs[key] = val
        return cls(**kwargs)

    def fingerprint(self) -> int:
        """64-bit hash of the topology. The init seed is excluded."""
        text = "\n".join(l for l in self.to_text().splitlines() if not l.startswith("seed "))
        return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


PRESETS: dict[str, BackboneConfig] = {
    "desk": BackboneConfig(),
    "desk2": BackboneConfig(
        trunk_channels=(8, 16, 32),
        convs_per_block=(2, 2, 2),
        pool_after=(1, 2),
        extraction_points=(1, 3),
    ),
    # VGG-16 widths, taps at conv_1_2 / conv_3_3 / conv_5_3, 128-d descriptors
    "vgg16": BackboneConfig(
        trunk_channels=(64, 128, 256, 512, 512),
        convs_per_block=(2, 2, 3, 3, 3),
        pool_after=(1, 2, 3, 4),
        extraction_points=(1, 3, 5),
        adaptation_channels=128,
        in_channels=3,
    ),
}


def preset(name: str, **overrides) -> BackboneConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}") from None
    return BackboneConfig(**{**asdict(base), **overrides})


# weights ------------------------------------------------------------------------------------


def _conv_layers(cfg: BackboneConfig):
    """Yield (name, out_ch, in_ch, k) for every conv, in parameter order."""
    c_in = cfg.in_channels
    taps = {}
    for b, (c_out, n) in enumerate(zip(cfg.trunk_channels, cfg.convs_per_block), 1):
        for i in range(1, n + 1):
            yield f"trunk.{b}.{i}", c_out, c_in, 3
            c_in = c_out
        taps[b] = c_out
    k1, k2 = cfg.adaptation_kernels
    d = cfg.adaptation_channels
    for m, e in enumerate(cfg.extraction_points):
        yield f"adapt.{m}.conv1", d, taps[e], k1
        yield f"adapt.{m}.conv2", d, d, k2


BN_BUFFERS = ("running_mean", "running_var")


def param_names(config: BackboneConfig) -> list[str]:
    names = [f"{n}.{kind}" for n, *_ in _conv_layers(config) for kind in ("weight", "bias")]
    for m in range(config.n_levels):
        names += [f"adapt.{m}.bn.{k}" for k in ("gamma", "beta") + BN_BUFFERS]
    return names


@dataclass
class Weights:
    """Named parameter arrays plus the config they were built for.

    Trainable entries are ``*.weight``, ``*.bias``, ``*.gamma``, ``*.beta``;
    ``*.running_mean`` / ``*.running_var`` are batch-norm buffers.
    """

    config: BackboneConfig
    params: dict[str, np.ndarray]
    fingerprint: int = 0

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = self.config.fingerprint()

    @classmethod
    def init(cls, config: BackboneConfig, seed: int | None = None) -> Weights:
        """He-uniform conv kernels, zero biases, zero beta.

        Gamma starts at ``(0.01 / (M * D)) ** 0.25`` for M levels of width D,
        so the summed correlation logits start with a standard deviation near
        0.1 and the initial correspondence distributions are close to uniform.
        """
        rng = np.random.default_rng(config.seed if seed is None else seed)
        params: dict[str, np.ndarray] = {}
        for name, o, i, k in _conv_layers(config):
            bound = np.sqrt(6.0 / (i * k * k))
            params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(o, i, k, k)).astype(np.float32)
            params[f"{name}.bias"] = np.zeros(o, dtype=np.float32)
        d = config.adaptation_channels
        gamma0 = (0.01 / (config.n_levels * d)) ** 0.25
        for m in range(config.n_levels):
            params[f"adapt.{m}.bn.gamma"] = np.full(d, gamma0, dtype=np.float32)
            params[f"adapt.{m}.bn.beta"] = np.zeros(d, dtype=np.float32)
            params[f"adapt.{m}.bn.running_mean"] = np.zeros(d, dtype=np.float32)
            params[f"adapt.{m}.bn.running_var"] = np.ones(d, dtype=np.float32)
        return cls(config, params)

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if not n.endswith(BN_BUFFERS)]

    def leaves(self, dtype=None) -> dict[str, Tensor]:
        """Fresh grad-tracking tensors for every trainable parameter."""
        out = {}
        for n in self.trainable_names():
            arr = self.params[n] if dtype is None else self.params[n].astype(dtype)
            out[n] = Tensor(arr, requires_grad=True, name=n)
        return out

    def astype(self, dtype) -> Weights:
        return Weights(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, self.fingerprint)

    def copy(self) -> Weights:
        return Weights(self.config, {k: v.copy() for k, v in self.params.items()}, self.fingerprint)

    def check(self, config: BackboneConfig | None = None) -> None:
        expected = (config or self.config).fingerprint()
        if self.fingerprint != expected:
            raise ConfigError(
                f"weights fingerprint {self.fingerprint:016x} does not match config {expected:016x}"
            )


# feature pyramid ------------------------------------------------------------------------------


@dataclass
class FeaturePyramid:
    """Per-level descriptor maps ``(D, ceil(H/s), ceil(W/s))`` and their downscale factors."""

    levels: list[Tensor]
    scales: tuple[int, ...]
    source_shape: tuple[int, int]
    fingerprint: int = 0

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]


def to_network_input(image, in_channels: int) -> np.ndarray:
    """Bring an ``(H, W)``, ``(H, W, C)`` or ``(C, H, W)`` image in [0, 1] to ``(in_channels, H, W)``."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    elif img.ndim == 3 and img.shape[-1] in (1, 3) and img.shape[0] not in (1, 3):
        img = np.moveaxis(img, -1, 0)
    if img.ndim != 3 or img.shape[1] == 0 or img.shape[2] == 0:
        raise ValueError(f"expected a non-empty image, got shape {np.shape(image)}")
    c = img.shape[0]
    if c == in_channels:
        return img
    if c == 3 and in_channels == 1:
        w = np.array([0.299, 0.587, 0.114], dtype=img.dtype if img.dtype.kind == "f" else np.float32)
        return np.tensordot(w, img, axes=1)[None]
    if c == 1 and in_channels == 3:
        return np.repeat(img, 3, axis=0)
    raise ValueError(f"cannot feed a {c}-channel image to a {in_channels}-channel network")


def forward(
    image,
    weights: Weights,
    mode: str = "infer",
    params: Mapping[str, Tensor] | None = None,
    config: BackboneConfig | None = None,
) -> FeaturePyramid:
    """Run the backbone on one image and return its adapted feature pyramid.

    Parameters
    ----------
    image : array_like or Tensor
        Grayscale or RGB image with values in [0, 1].
    weights : Weights
        Parameters and batch-norm buffers. Training mode updates the buffers.
    mode : {"infer", "train"}
        Batch-norm uses per-image statistics in "train", running ones in "infer".
    params : mapping, optional
        Tensors overriding entries of ``weights.params``; pass the same leaves
        to both images of a pair so their gradients accumulate together.
    config : BackboneConfig, optional
        Expected topology; checked against the weights fingerprint.
    """
    if mode not in ("infer", "train"):
        raise ValueError(f"mode must be 'infer' or 'train', got {mode!r}")
    weights.check(config)
    cfg = weights.config
    params = params or {}

    def p(name: str) -> Tensor:
        return params[name] if name in params else Tensor(weights.params[name])

    if isinstance(image, Tensor):
        if image.ndim != 3 or image.shape[0] != cfg.in_channels:
            raise ValueError(f"tensor images must be ({cfg.in_channels}, H, W), got {image.shape}")
        x = image
    else:
        dtype = weights.params["trunk.1.1.weight"].dtype
        x = Tensor(to_network_input(image, cfg.in_channels).astype(dtype))
    source_shape = tuple(x.shape[1:])

    taps = {}
    for b, n in enumerate(cfg.convs_per_block, 1):
        for i in range(1, n + 1):
            x = relu(conv2d(x, ConvParams.same(p(f"trunk.{b}.{i}.weight"), p(f"trunk.{b}.{i}.bias"))))
        if b in cfg.extraction_points:
            taps[b] = x
        if b in cfg.pool_after and b < cfg.extraction_points[-1]:
            x = maxpool2(x)

    levels = []
    for m, e in enumerate(cfg.extraction_points):
        pre = f"adapt.{m}"
        y = relu(conv2d(taps[e], ConvParams.same(p(f"{pre}.conv1.weight"), p(f"{pre}.conv1.bias"))))
        y = conv2d(y, ConvParams.same(p(f"{pre}.conv2.weight"), p(f"{pre}.conv2.bias")))
        bn = BatchNormParams(
            p(f"{pre}.bn.gamma"),
            p(f"{pre}.bn.beta"),
            weights.params[f"{pre}.bn.running_mean"],
            weights.params[f"{pre}.bn.running_var"],
            eps=cfg.bn_eps,
            momentum=cfg.bn_momentum,
            training=(mode == "train"),
        )
        levels.append(batchnorm(y, bn))
    return FeaturePyramid(levels, cfg.scales, source_shape, weights.fingerprint)


# sparse descriptors ---------------------------------------------------------------------------


@dataclass
class SparseDescriptorSet:
    """Descriptors of N keypoints at every level: ``descriptors[m]`` is ``(N, D)``."""

    descriptors: list[Tensor]
    coords: list[np.ndarray]
    keypoints: np.ndarray

    def __len__(self) -> int:
        return len(self.keypoints)

    def concatenated(self) -> np.ndarray:
        return np.concatenate([d.data for d in self.descriptors], axis=1)


class KeypointBoundsError(ValueError):
    def __init__(self, index: int, point, shape):
        self.index = index
        super().__init__(f"keypoint {index} at {tuple(point)} lies outside the {shape[1]}x{shape[0]} image")


def describe_sparse(pyramid: FeaturePyramid, keypoints) -> SparseDescriptorSet:
    """Sample every level at the keypoints, downscaled by the level factor.

    ``keypoints`` holds (x, y) source-pixel coordinates; fractional positions
    are bilinearly interpolated and positions past the last level pixel clamp
    to the border.
    """
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    h, w = pyramid.source_shape
    bad = np.flatnonzero(~((kps[:, 0] >= 0) & (kps[:, 0] < w) & (kps[:, 1] >= 0) & (kps[:, 1] < h)))
    if bad.size:
        raise KeypointBoundsError(int(bad[0]), kps[bad[0]], (h, w))
    descs, coords = [], []
    for level, s in zip(pyramid.levels, pyramid.scales):
        xs, ys = kps[:, 0] / s, kps[:, 1] / s
        coords.append(np.stack([xs, ys], axis=1))
        descs.append(sample_points(level, xs, ys))
    return SparseDescriptorSet(descs, coords, kps)


# persistence ----------------------------------------------------------------------------------

WEIGHT_MAGIC = b"S2DW"
WEIGHT_VERSION = 1


def save_weights(weights: Weights, path) -> None:
    """Serialize to the little-endian ``S2DW`` layout (see FORMATS.md)."""
    cfg_text = weights.config.to_text().encode("utf-8")
    parts = [
        WEIGHT_MAGIC,
        struct.pack("<IQI", WEIGHT_VERSION, weights.fingerprint, len(cfg_text)),
        cfg_text,
        struct.pack("<I", len(weights.params)),
    ]
    for name, arr in weights.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_weights(path, config: BackboneConfig | None = None) -> Weights:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: not a weight file (magic {raw[:4]!r})")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise WeightFormatError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    def take_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise WeightFormatError(f"{path}: truncated at byte {pos}")
        out = raw[pos : pos + n]
        pos += n
        return out

    version, fp, cfg_len = take("<IQI")
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"{path}: unsupported weight format version {version}")
    stored_cfg = BackboneConfig.from_text(take_bytes(cfg_len).decode("utf-8"))
    if stored_cfg.fingerprint() != fp:
        raise ConfigError(f"{path}: header fingerprint does not match the embedded config")
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = take_bytes(nlen).decode("utf-8")
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take_bytes(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(raw):
        raise WeightFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    weights = Weights(stored_cfg, params, fp)
    if config is not None:
        weights.check(config)
    if set(params) != set(param_names(stored_cfg)):
        raise WeightFormatError(f"{path}: layer directory does not match the embedded config")
    return weights
