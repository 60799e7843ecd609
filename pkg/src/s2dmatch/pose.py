"""Camera pose from 2D-3D correspondences and its sensitivity to pixel noise.

The solver is a normalized six-point DLT followed by Gauss-Newton on the
reprojection error; RANSAC draws batches of six-point DLT hypotheses.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ._atomic import atomic_write_text


class DegenerateConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass
class Pose:
    """World-to-camera transform ``X_cam = R X + t``."""

    R: np.ndarray
    t: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t


@dataclass
class CameraModel:
    intrinsics: Intrinsics
    pose: Pose

    def __post_init__(self):
        r = np.asarray(self.pose.R, dtype=np.float64)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be orthonormal with det +1")


def project(camera: CameraModel, points3d) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection. Returns ``(uv, kept)``: points with ``z <= 0`` are dropped, ``kept`` indexes the rest."""
    return _project(camera.intrinsics, camera.pose.R, camera.pose.t, points3d)


def _project(k: Intrinsics, r, t, points3d):
    x = np.asarray(points3d, dtype=np.float64).reshape(-1, 3) @ np.asarray(r).T + np.asarray(t)
    kept = np.flatnonzero(x[:, 2] > 0)
    x = x[kept]
    uv = np.stack([k.fx * x[:, 0] / x[:, 2] + k.cx, k.fy * x[:, 1] / x[:, 2] + k.cy], axis=1)
    return uv, kept


def _reproj_errors(k: Intrinsics, r, t, p3, p2) -> np.ndarray:
    """Pixel errors for a batch of poses: ``r`` (B, 3, 3), ``t`` (B, 3) -> (B, N). Points behind get inf."""
    xc = np.einsum("bij,nj->bni", r, p3) + t[:, None, :]
    z = xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * xc[..., 0] / z + k.cx
        v = k.fy * xc[..., 1] / z + k.cy
        err = np.hypot(u - p2[None, :, 0], v - p2[None, :, 1])
    return np.where(z > 0, err, np.inf)


# DLT ------------------------------------------------------------------------------------------


def _normalize_3d(p3):
    c = p3.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(p3 - c, axis=-1).mean(axis=-1)
    s = np.sqrt(3) / np.where(d > 0, d, 1.0)
    return c, s


def _dlt_batch(p3: np.ndarray, xn: np.ndarray):
    """Batched DLT. ``p3`` (B, n, 3) world points, ``xn`` (B, n, 2) normalized image points.

    Returns ``(R, t, ok)`` where ``ok`` flags non-degenerate systems.
    """
    b, n, _ = p3.shape
    c, s = _normalize_3d(p3)
    q = (p3 - c) * s[:, None, None]
    qh = np.concatenate([q, np.ones((b, n, 1))], axis=2)
    zeros = np.zeros_like(qh)
    x, y = xn[..., 0:1], xn[..., 1:2]
    rows1 = np.concatenate([qh, zeros, -x * qh], axis=2)
    rows2 = np.concatenate([zeros, qh, -y * qh], axis=2)
    a = np.concatenate([rows1, rows2], axis=1)
    if a.shape[1] < 12:
        a = np.concatenate([a, np.zeros((b, 12 - a.shape[1], 12))], axis=1)
    _, sv, vt = np.linalg.svd(a)
    ok = sv[:, -2] / sv[:, 0] >= 1e-8
    pn = vt[:, -1].reshape(b, 3, 4)
    # undo the 3D normalization: P = Pn @ [[s I, -s c], [0, 1]]
    m = pn[:, :, :3] * s[:, None, None]
    p4 = pn[:, :, 3] - np.einsum("bij,bj->bi", m, c[:, 0, :])
    det = np.linalg.det(m)
    sign = np.where(det < 0, -1.0, 1.0)
    m = m * sign[:, None, None]
    p4 = p4 * sign[:, None]
    u, sm, vt2 = np.linalg.svd(m)
    r = u @ vt2
    scale = sm.mean(axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    t = p4 / scale[:, None]
    ok &= np.isfinite(t).all(axis=1)
    return r, t, ok


def _normalized_image(k: Intrinsics, p2):
    return np.stack([(p2[..., 0] - k.cx) / k.fx, (p2[..., 1] - k.cy) / k.fy], axis=-1)


def refine_pose(k: Intrinsics, r, t, p3, p2, iterations: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton on pixel reprojection error with a left rotation-vector update."""
    r = np.array(r, dtype=np.float64)
    t = np.array(t, dtype=np.float64)
    for _ in range(iterations):
        rx = p3 @ r.T
        xc = rx + t
        z = xc[:, 2]
        if np.any(z <= 0):
            break
        u = k.fx * xc[:, 0] / z + k.cx
        v = k.fy * xc[:, 1] / z + k.cy
        res = np.concatenate([u - p2[:, 0], v - p2[:, 1]])
        n = len(p3)
        du = np.zeros((n, 3))
        dv = np.zeros((n, 3))
        du[:, 0] = k.fx / z
        du[:, 2] = -k.fx * xc[:, 0] / z**2
        dv[:, 1] = k.fy / z
        dv[:, 2] = -k.fy * xc[:, 1] / z**2
        # d(xc)/d(omega) = -[rx]_x
        skew = np.zeros((n, 3, 3))
        skew[:, 0, 1], skew[:, 0, 2] = rx[:, 2], -rx[:, 1]
        skew[:, 1, 0], skew[:, 1, 2] = -rx[:, 2], rx[:, 0]
        skew[:, 2, 0], skew[:, 2, 1] = rx[:, 1], -rx[:, 0]
        ju = np.concatenate([np.einsum("ni,nij->nj", du, skew), du], axis=1)
        jv = np.concatenate([np.einsum("ni,nij->nj", dv, skew), dv], axis=1)
        j = np.concatenate([ju, jv])
        step, *_ = np.linalg.lstsq(j, -res, rcond=None)
        r = Rotation.from_rotvec(step[:3]).as_matrix() @ r
        t = t + step[3:]
        if np.linalg.norm(step) < 1e-12:
            break
    # re-project onto SO(3) to keep R^T R = I at machine precision
    u_, _, vt = np.linalg.svd(r)
    return u_ @ vt, t


def pnp_dlt(points3d, points2d, intrinsics: Intrinsics, refine_iterations: int = 10) -> Pose:
    """Pose from at least six non-coplanar 2D-3D correspondences."""
    p3 = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    p2 = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(p3) != len(p2):
        raise ValueError(f"{len(p3)} 3D points vs {len(p2)} 2D points")
    if len(p3) < 6:
        raise ValueError(f"pnp_dlt needs at least 6 correspondences, got {len(p3)}")
    r, t, ok = _dlt_batch(p3[None], _normalized_image(intrinsics, p2)[None])
    if not ok[0]:
        raise DegenerateConfigurationError("degenerate (e.g. coplanar) point configuration")
    r, t = refine_pose(intrinsics, r[0], t[0], p3, p2, refine_iterations)
    return Pose(r, t)


# RANSAC -------------------------------------------------------------------------------------------


@dataclass
class RansacResult:
    pose: Pose | None
    inliers: np.ndarray
    success: bool
    hypotheses: int = 0


def pnp_ransac(
    points3d,
    points2d,
    intrinsics: Intrinsics,
    inlier_px: float = 4.0,
    iterations: int = 200,
    seed: int | np.random.Generator = 0,
    batch: int = 100,
) -> RansacResult:
    """Six-point DLT hypotheses scored by inlier count, then refinement on the best inlier set.

    Ties in inlier count keep the earliest hypothesis. A result with
    ``success=False`` and no pose is returned when no hypothesis reaches six
    inliers.
    """
    p3 = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    p2 = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    n = len(p3)
    if n < 6 or len(p2) != n:
        raise ValueError(f"pnp_ransac needs at least 6 matching 2D/3D points, got {n}/{len(p2)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    xn = _normalized_image(intrinsics, p2)
    best_count, best_mask = 0, np.zeros(n, dtype=bool)
    done = 0
    while done < iterations:
        b = min(batch, iterations - done)
        idx = np.argsort(rng.random((b, n)), axis=1)[:, :6]
        r, t, ok = _dlt_batch(p3[idx], xn[idx])
        err = _reproj_errors(intrinsics, r, t, p3, p2)
        masks = (err <= inlier_px) & ok[:, None]
        counts = masks.sum(axis=1)
        i = int(np.argmax(counts))
        if counts[i] > best_count:
            best_count, best_mask = int(counts[i]), masks[i]
        done += b
    if best_count < 6:
        return RansacResult(None, np.zeros(n, dtype=bool), False, done)
    mask = best_mask
    pose = None
    for _ in range(3):
        try:
            pose = pnp_dlt(p3[mask], p2[mask], intrinsics)
        except DegenerateConfigurationError:
            break
        new = _reproj_errors(intrinsics, pose.R[None], pose.t[None], p3, p2)[0] <= inlier_px
        if new.sum() < 6 or np.array_equal(new, mask):
            break
        mask = new
    if pose is None:
        return RansacResult(None, np.zeros(n, dtype=bool), False, done)
    return RansacResult(pose, mask, True, done)


# error metrics and noise sweep ---------------------------------------------------------------------


def rotation_error_deg(r_est, r_gt) -> float:
    return float(np.degrees(Rotation.from_matrix(np.asarray(r_est) @ np.asarray(r_gt).T).magnitude()))


def position_error(pose_est: Pose, pose_gt: Pose) -> float:
    return float(np.linalg.norm(pose_est.center - pose_gt.center))


RECALL_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
DEFAULT_SIGMAS = (0.0, 1.0, 2.0, 4.0, 8.0)


@dataclass
class Scene:
    points: np.ndarray
    camera: CameraModel
    image_points: np.ndarray
    frame: tuple[int, int] = (1600, 1200)


def default_scene(seed: int = 0, n_points: int = 200) -> Scene:
    """Points uniform in a 20 x 20 x 10 m box centred 25 m in front of a f = 1000 px camera."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform([-10, -10, -5], [10, 10, 5], size=(n_points, 3))
    k = Intrinsics(1000.0, 1000.0, 800.0, 600.0)
    cam = CameraModel(k, Pose(np.eye(3), np.array([0.0, 0.0, 25.0])))
    uv, kept = project(cam, pts)
    return Scene(pts[kept], cam, uv)


@dataclass
class NoiseSweepResult:
    sigmas: tuple[float, ...]
    trials: list[dict] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["sigma", "trial", "pos_err_m", "rot_err_deg"])
        for row in self.trials:
            wr.writerow([repr(row["sigma"]), row["trial"], repr(row["pos_err_m"]), repr(row["rot_err_deg"])])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"sigmas": list(self.sigmas), "summary": self.summary}, indent=2)

    def write(self, csv_path, json_path) -> None:
        atomic_write_text(csv_path, self.to_csv())
        atomic_write_text(json_path, self.to_json() + "\n")


def noise_sweep(
    scene_seed: int = 0,
    sigmas=DEFAULT_SIGMAS,
    trials: int = 200,
    inlier_px: float | None = None,
    iterations: int = 100,
    scene: Scene | None = None,
) -> NoiseSweepResult:
    """Perturb the scene's 2D points with isotropic Gaussian noise and re-solve the pose.

    Each (sigma, trial) draws from ``default_rng([scene_seed, sigma_index, trial])``
    so results do not depend on evaluation order. The RANSAC inlier threshold
    defaults to ``max(2, 3 * sigma)`` pixels. Failed solves count as infinite error.
    """
    sigmas = tuple(float(s) for s in sigmas)
    if list(sigmas) != sorted(sigmas) or any(s < 0 for s in sigmas):
        raise ValueError("sigmas must be non-negative and sorted ascending")
    scene = scene or default_scene(scene_seed)
    k = scene.camera.intrinsics
    gt = scene.camera.pose
    result = NoiseSweepResult(sigmas)
    for si, sigma in enumerate(sigmas):
        pos, rot = [], []
        for trial in range(trials):
            rng = np.random.default_rng([scene_seed, si, trial])
            noisy = scene.image_points + rng.normal(0.0, sigma, size=scene.image_points.shape) if sigma else scene.image_points
            thr = inlier_px if inlier_px is not None else max(2.0, 3.0 * sigma)
            res = pnp_ransac(scene.points, noisy, k, thr, iterations, rng)
            if res.success:
                pe, re = position_error(res.pose, gt), rotation_error_deg(res.pose.R, gt.R)
            else:
                pe = re = float("inf")
            pos.append(pe)
            rot.append(re)
            result.trials.append({"sigma": sigma, "trial": trial, "pos_err_m": pe, "rot_err_deg": re})
        pos_a, rot_a = np.array(pos), np.array(rot)
        finite = np.isfinite(pos_a)
        result.summary.append(
            {
                "sigma": sigma,
                "median_pos_err_m": float(np.median(pos_a)),
                "mean_pos_err_m": float(pos_a[finite].mean()) if finite.any() else None,
                "median_rot_err_deg": float(np.median(rot_a)),
                "failures": int((~finite).sum()),
                "recall": {
                    f"{d}m_{a}deg": float(np.mean((pos_a <= d) & (rot_a <= a))) for d, a in RECALL_THRESHOLDS
                },
            }
        )
    return result
