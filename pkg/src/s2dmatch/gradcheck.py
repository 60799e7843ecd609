"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_input: list[float]
    tolerance: float
    n_evaluations: int = 0
    label: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        name = f"{self.label}: " if self.label else ""
        return f"{name}{status} max rel. error {self.max_rel_error:.3e} (tol {self.tolerance:.0e})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is (numerically) zero from
    dividing round-off by round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    label: str = "",
) -> GradcheckReport:
    """Compare backward() against central differences for a scalar-valued ``fn``.

    Every input is copied to float64 before the graph is rebuilt, so the
    check always runs in double precision regardless of the caller's dtype.
    ``fn`` must construct its graph from the tensors it receives.
    """
    leaves = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
              for x in inputs]
    out = fn(*leaves)
    if out.data.size != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

    evals = 0
    errors = []
    with no_grad():
        for leaf, ana in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(fn(*leaves).data)
                flat[i] = orig - step
                f_minus = float(fn(*leaves).data)
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2 * step)
                evals += 2
            errors.append(relative_error(ana.reshape(-1), numeric))
    return GradcheckReport(max(errors, default=0.0), errors, tolerance, evals, label)


# suite over the op set and the composed pipeline -----------------------------------------------

# tiny two-level backbone so the pipeline check perturbs every parameter in seconds
SUITE_BACKBONE = dict(
    trunk_channels=(2, 2, 2),
    convs_per_block=(1, 1, 1),
    pool_after=(1, 2),
    extraction_points=(1, 3),
    adaptation_channels=4,
)


def _project(t: Tensor, proj: np.ndarray) -> Tensor:
    """Scalar ``sum(t * proj)``; a random projection exposes every output entry."""
    return Tensor.from_op(np.asarray((t.data * proj).sum(), dtype=t.dtype), (t,), lambda g: (g * proj,))


def gradcheck_suite(seed: int = 0, tolerance: float = 1e-4) -> list[GradcheckReport]:
    """Gradchecks for every differentiable op and for image -> pyramid -> map -> loss.

    Inputs are seeded and at most 8x8.
    """
    from .backbone import BackboneConfig, FeaturePyramid, Weights, describe_sparse, forward
    from .layers import (
        BatchNormParams,
        ConvParams,
        batchnorm,
        bilinear_upsample,
        concat_channels,
        conv2d,
        correlate_1x1,
        cross_entropy2d,
        log_softmax2d,
        maxpool2,
        relu,
        sample_points,
        softmax2d,
    )
    from .matcher import correspondence_maps

    rng = np.random.default_rng(seed)

    def proj(shape):
        return rng.normal(size=shape)

    reports = []

    def check(label, fn, inputs):
        reports.append(gradcheck(fn, inputs, tolerance=tolerance, label=label))

    x = rng.normal(size=(2, 7, 8))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    p = proj((3, 7, 8))
    check("conv2d", lambda x, w, b: _project(conv2d(x, ConvParams.same(w, b)), p), [x, w, b])
    p2 = proj((3, 4, 4))
    check("conv2d stride 2", lambda x, w: _project(conv2d(x, ConvParams(w, None, 2, 1)), p2), [x, w])
    xr = rng.normal(size=(2, 5, 5))
    xr[np.abs(xr) < 0.05] = 0.3  # keep away from the kink
    pr = proj((2, 5, 5))
    check("relu", lambda x: _project(relu(x), pr), [xr])
    xp = rng.permutation(2 * 7 * 7).reshape(2, 7, 7) / 10.0  # distinct values: no pooling ties
    pp = proj((2, 4, 4))
    check("maxpool2", lambda x: _project(maxpool2(x), pp), [xp])
    xb = rng.normal(size=(3, 4, 5))
    g0, b0 = rng.uniform(0.5, 1.5, size=3), rng.normal(size=3)
    pb = proj((3, 4, 5))
    for training in (True, False):
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)

        def bn(x, g, bt, training=training, rm=rm, rv=rv):
            return _project(batchnorm(x, BatchNormParams(g, bt, rm.copy(), rv.copy(), training=training)), pb)

        check(f"batchnorm ({'train' if training else 'infer'})", bn, [xb, g0, b0])
    xu = rng.normal(size=(2, 3, 4))
    pu = proj((2, 8, 7))
    check("bilinear_upsample", lambda x: _project(bilinear_upsample(x, 8, 7), pu), [xu])
    xs, ys = rng.uniform(0, 3, size=5), rng.uniform(0, 2, size=5)
    ps = proj((5, 2))
    check("sample_points", lambda f: _project(sample_points(f, xs, ys), ps), [xu])
    d = rng.normal(size=(4, 2))
    pc = proj((4, 3, 4))
    check("correlate_1x1", lambda d, f: _project(correlate_1x1(d, f), pc), [d, xu])
    pk = proj((4, 3, 4))
    check("concat_channels", lambda a, c: _project(concat_channels([a, c]), pk), [xu, rng.normal(size=(2, 3, 4))])
    xl = rng.normal(size=(2, 4, 4))
    pl = proj((2, 4, 4))
    check("softmax2d", lambda x: _project(softmax2d(x), pl), [xl])
    check("log_softmax2d", lambda x: _project(log_softmax2d(x), pl), [xl])
    tg = np.array([[1, 2], [3, 0]])
    check("cross_entropy2d", lambda x: cross_entropy2d(x, tg), [xl])

    la = [rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 2, 2))]
    lb = [rng.normal(size=(3, 8, 7)), rng.normal(size=(3, 2, 2))]
    kps = np.array([[1.5, 2.25], [6.0, 3.0]])
    pm = proj((2, 8, 7))
    for agg in ("add", "concat"):

        def cmap(a0, a1, b0, b1, agg=agg):
            pa = FeaturePyramid([a0, a1], (1, 4), (8, 8))
            pb = FeaturePyramid([b0, b1], (1, 4), (8, 7))
            return _project(correspondence_maps(describe_sparse(pa, kps), pb, agg), pm)

        check(f"correspondence map ({agg})", cmap, la + lb)

    cfg = BackboneConfig(**SUITE_BACKBONE, seed=seed)
    weights = Weights.init(cfg, seed)
    for name, arr in weights.params.items():
        if name.endswith("bias") or name.endswith("beta"):
            arr[...] = rng.normal(0, 0.1, size=arr.shape)
    names = weights.trainable_names()
    img_a = rng.uniform(size=(1, 8, 8))
    img_b = rng.uniform(size=(1, 8, 8))
    src = np.array([[2.0, 3.0], [5.0, 6.0], [7.0, 1.0]])
    tgt = np.array([[3, 3], [5, 7], [6, 0]])

    def pipeline(a, bimg, *params):
        leaves = dict(zip(names, params))
        pa = forward(a, weights, mode="train", params=leaves)
        pb = forward(bimg, weights, mode="train", params=leaves)
        return cross_entropy2d(correspondence_maps(describe_sparse(pa, src), pb), tgt)

    check("pipeline image->pyramid->map->loss", pipeline, [img_a, img_b] + [weights.params[n] for n in names])
    return reports
