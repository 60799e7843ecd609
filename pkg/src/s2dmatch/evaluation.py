"""Homography reprojection and Mean Matching Accuracy over image sequences."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._atomic import atomic_write_text

THRESHOLDS = tuple(range(1, 11))


class PointAtInfinityError(ArithmeticError):
    pass


class Homography:
    """3x3 projective map on ``(x, y, 1)``, scaled so ``h33 = 1`` when nonzero."""

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("homography has non-finite entries")
        if m[2, 2] != 0:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        self.matrix = m

    @classmethod
    def identity(cls) -> Homography:
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> Homography:
        return cls([[1, 0, tx], [0, 1, ty], [0, 0, 1]])

    def inverse(self) -> Homography:
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: Homography) -> Homography:
        return Homography(self.matrix @ other.matrix)

    @classmethod
    def load(cls, path) -> Homography:
        vals = Path(path).read_text().split()
        if len(vals) != 9:
            raise ValueError(f"{path}: expected 9 numbers, found {len(vals)}")
        return cls([float(v) for v in vals])

    def save(self, path) -> None:
        rows = [" ".join(f"{v:.17g}" for v in r) for r in self.matrix]
        atomic_write_text(path, "\n".join(rows) + "\n")


def reproject_points(h: Homography, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    hom = np.c_[pts, np.ones(len(pts))] @ h.matrix.T
    w = hom[:, 2]
    bad = np.flatnonzero(np.abs(w) < 1e-12)
    if bad.size:
        raise PointAtInfinityError(f"point {pts[bad[0]].tolist()} maps to infinity")
    return hom[:, :2] / w[:, None]


def reproject(h: Homography, point) -> tuple[float, float]:
    x, y = reproject_points(h, point)[0]
    return float(x), float(y)


@dataclass
class MMAReport:
    """Fraction of matches within each pixel threshold; ``None`` values when there are no matches."""

    thresholds: tuple[int, ...]
    values: list[float | None]
    n_matches: int
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def defined(self) -> bool:
        return self.n_matches > 0

    def at(self, t: int) -> float | None:
        return self.values[self.thresholds.index(t)]

    def to_dict(self) -> dict:
        return {
            "n_matches": self.n_matches,
            "mma": {str(t): v for t, v in zip(self.thresholds, self.values)},
        }


def _match_arrays(matches) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(matches, tuple):
        src, tgt = matches
        return np.asarray(src, dtype=np.float64).reshape(-1, 2), np.asarray(tgt, dtype=np.float64).reshape(-1, 2)
    src = np.array([m.source.xy for m in matches], dtype=np.float64).reshape(-1, 2)
    tgt = np.array([m.target for m in matches], dtype=np.float64).reshape(-1, 2)
    return src, tgt


def mma(matches, h: Homography, thresholds=THRESHOLDS) -> MMAReport:
    """Mean Matching Accuracy of ``matches`` under the ground truth ``h`` (A to B).

    ``matches`` is a list of :class:`~s2dmatch.matcher.Match` or a
    ``(sources, targets)`` pair of ``(N, 2)`` arrays.
    """
    thresholds = tuple(thresholds)
    src, tgt = _match_arrays(matches)
    if len(src) == 0:
        return MMAReport(thresholds, [None] * len(thresholds), 0)
    err = np.linalg.norm(reproject_points(h, src) - tgt, axis=1)
    vals = [float(np.mean(err <= t)) for t in thresholds]
    return MMAReport(thresholds, vals, len(src), err)


def aggregate(reports: list[MMAReport], thresholds=THRESHOLDS) -> dict:
    """Match-weighted and per-pair mean MMA over ``reports`` (pairs without matches skip the per-pair mean)."""
    thresholds = tuple(thresholds)
    total = sum(r.n_matches for r in reports)
    defined = [r for r in reports if r.defined]
    weighted, per_pair = {}, {}
    for i, t in enumerate(thresholds):
        hits = sum(r.values[i] * r.n_matches for r in defined)
        weighted[str(t)] = hits / total if total else None
        per_pair[str(t)] = float(np.mean([r.values[i] for r in defined])) if defined else None
    return {"n_pairs": len(reports), "n_matches": total, "mma_match_weighted": weighted, "mma_per_pair": per_pair}


# manifests ------------------------------------------------------------------------------------


@dataclass
class Sequence:
    name: str
    reference: Path | None = None
    targets: list[tuple[Path, Path]] = field(default_factory=list)


class ManifestError(ValueError):
    pass


def parse_manifest(path) -> list[Sequence]:
    """Read ``SEQ name`` / ``REF path`` / ``TGT path homography_path`` lines.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    seqs: list[Sequence] = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        kind, *rest = text.split()
        if kind == "SEQ" and len(rest) == 1:
            seqs.append(Sequence(rest[0]))
        elif kind in ("REF", "TGT") and seqs:
            if kind == "REF" and len(rest) == 1:
                seqs[-1].reference = base / rest[0]
            elif kind == "TGT" and len(rest) == 2:
                seqs[-1].targets.append((base / rest[0], base / rest[1]))
            else:
                raise ManifestError(f"{path}:{lineno}: wrong field count for {kind}")
        else:
            raise ManifestError(f"{path}:{lineno}: unexpected line {line!r}")
    return seqs


def evaluate_sequences(manifest, weights, config=None, detector: dict | None = None,
                       thresholds=THRESHOLDS) -> dict:
    """Match each sequence's reference against its targets and aggregate MMA.

    Sequences with missing or unreadable files are skipped and listed under
    ``"skipped"`` with the reason.
    """
    from .detector import harris
    from .imageio import ImageFormatError, load_image
    from .matcher import MatchConfig, match_pair

    config = config or MatchConfig()
    detector = detector or {}
    seqs = parse_manifest(manifest) if not isinstance(manifest, list) else manifest
    per_sequence, all_reports, skipped = [], [], []
    n_features = []
    for seq in seqs:
        try:
            if seq.reference is None:
                raise ManifestError("sequence has no REF line")
            ref = load_image(seq.reference, gray=True)
            targets = [(load_image(p, gray=True), Homography.load(hp)) for p, hp in seq.targets]
        except (OSError, ValueError, ImageFormatError) as exc:
            skipped.append({"sequence": seq.name, "reason": str(exc)})
            continue
        kps = harris(ref, **detector)
        pairs = []
        for (img, h), (tpath, _) in zip(targets, seq.targets):
            matches = match_pair(ref, kps, img, weights, config, detector)
            rep = mma(matches, h, thresholds)
            all_reports.append(rep)
            n_features.append(len(kps))
            pairs.append({"target": str(tpath), **rep.to_dict()})
        seq_reports = all_reports[len(all_reports) - len(pairs) :]
        per_sequence.append({"sequence": seq.name, "pairs": pairs, **aggregate(seq_reports, thresholds)})
    agg = aggregate(all_reports, thresholds)
    agg["mean_features"] = float(np.mean(n_features)) if n_features else None
    agg["mean_matches"] = agg["n_matches"] / agg["n_pairs"] if agg["n_pairs"] else None
    return {"aggregate": agg, "sequences": per_sequence, "skipped": skipped}


def mma_csv(report: dict) -> str:
    """``threshold,mma_match_weighted,mma_per_pair`` rows for plotting."""
    agg = report["aggregate"]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["threshold", "mma_match_weighted", "mma_per_pair"])
    for t, v in agg["mma_match_weighted"].items():
        p = agg["mma_per_pair"][t]
        wr.writerow([t, "" if v is None else f"{v:.6f}", "" if p is None else f"{p:.6f}"])
    return buf.getvalue()


def write_report(report: dict, json_path, csv_path=None) -> None:
    atomic_write_text(json_path, json.dumps(report, indent=2) + "\n")
    if csv_path is not None:
        atomic_write_text(csv_path, mma_csv(report))
