import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2dmatch.backbone import Weights, preset
from s2dmatch.detector import Keypoint, harris
from s2dmatch.evaluation import (
    Homography,
    ManifestError,
    PointAtInfinityError,
    aggregate,
    evaluate_sequences,
    mma,
    mma_csv,
    parse_manifest,
    reproject,
    write_report,
)
from s2dmatch.imageio import load_image, save_image
from s2dmatch.matcher import Match, MatchConfig
from s2dmatch.training import synthetic_image


def seeded_homography(seed):
    rng = np.random.default_rng(seed)
    m = np.eye(3) + rng.normal(0, [[0.05, 0.05, 3], [0.05, 0.05, 3], [1e-4, 1e-4, 0]])
    return Homography(m)


class TestReproject:
    def test_identity(self):
        assert reproject(Homography.identity(), (3.5, -2.0)) == (3.5, -2.0)

    def test_translation(self):
        assert reproject(Homography.translation(4, -1), (10, 20)) == (14, 19)

    def test_projective_oracle(self):
        h = seeded_homography(1)
        m = h.matrix
        x, y = 10.0, 20.0
        w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
        want = ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w, (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w)
        assert reproject(h, (x, y)) == pytest.approx(want, rel=1e-14)

    def test_point_at_infinity(self):
        h = Homography([[1, 0, 0], [0, 1, 0], [1, 0, 1]])
        with pytest.raises(PointAtInfinityError):
            reproject(h, (-1.0, 5.0))

    def test_normalized(self):
        h = Homography(2 * np.eye(3))
        assert h.matrix[2, 2] == 1.0

    def test_singular_rejected(self):
        with pytest.raises(ValueError):
            Homography(np.zeros((3, 3)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), x=st.floats(0, 100), y=st.floats(0, 100))
    def test_round_trip(self, seed, x, y):
        h = seeded_homography(seed)
        back = reproject(h.inverse(), reproject(h, (x, y)))
        assert back == pytest.approx((x, y), abs=1e-6)

    def test_file_roundtrip(self, tmp_path):
        h = seeded_homography(3)
        h.save(tmp_path / "H")
        assert np.array_equal(Homography.load(tmp_path / "H").matrix, h.matrix)


def matches_with_offset(n, dx, dy):
    return [Match(Keypoint(float(i), float(2 * i)), (i + dx, 2 * i + dy), 0.9) for i in range(n)]


class TestMMA:
    def test_exact(self):
        rep = mma(matches_with_offset(10, 0, 0), Homography.identity())
        assert rep.values == [1.0] * 10

    def test_five_pixel_step(self):
        rep = mma(matches_with_offset(7, 3, 4), Homography.identity())
        assert rep.values == [0.0] * 4 + [1.0] * 6

    def test_half_and_half(self):
        ms = matches_with_offset(4, 0, 0) + matches_with_offset(4, 5, 0)
        assert mma(ms, Homography.identity()).at(3) == 0.5

    def test_empty_is_undefined(self):
        rep = mma([], Homography.identity())
        assert rep.values == [None] * 10 and not rep.defined
        assert rep.to_dict()["mma"]["1"] is None

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
    def test_monotone(self, seed, n):
        rng = np.random.default_rng(seed)
        src = rng.uniform(0, 50, size=(n, 2))
        tgt = src + rng.normal(0, 4, size=(n, 2))
        vals = mma((src, tgt), Homography.identity()).values
        assert all(0 <= v <= 1 for v in vals)
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_aggregate_is_match_weighted(self, seed):
        rng = np.random.default_rng(seed)
        reps = []
        for _ in range(4):
            n = int(rng.integers(0, 12))
            src = rng.uniform(0, 50, size=(n, 2))
            reps.append(mma((src, src + rng.normal(0, 3, size=(n, 2))), Homography.identity()))
        agg = aggregate(reps)
        total = sum(r.n_matches for r in reps)
        for i, t in enumerate(range(1, 11)):
            if total:
                want = sum(r.values[i] * r.n_matches for r in reps if r.defined) / total
                assert agg["mma_match_weighted"][str(t)] == pytest.approx(want, abs=1e-9)
            else:
                assert agg["mma_match_weighted"][str(t)] is None


def write_sequence(tmp_path, n_targets=2, missing=False):
    rng = np.random.default_rng(0)
    img = synthetic_image(rng, (32, 32))
    save_image(tmp_path / "ref.pgm", img)
    Homography.identity().save(tmp_path / "H_id")
    lines = ["SEQ identity", "REF ref.pgm"]
    for i in range(n_targets):
        lines.append("TGT ref.pgm H_id")
    lines += ["SEQ broken", "REF missing.pgm" if missing else "REF ref.pgm", "TGT ref.pgm H_id"]
    (tmp_path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return tmp_path / "manifest.txt"


class TestSequences:
    def test_parse(self, tmp_path):
        seqs = parse_manifest(write_sequence(tmp_path))
        assert [s.name for s in seqs] == ["identity", "broken"]
        assert len(seqs[0].targets) == 2 and seqs[0].reference == tmp_path / "ref.pgm"

    def test_bad_line(self, tmp_path):
        (tmp_path / "m.txt").write_text("REF a.pgm\n")
        with pytest.raises(ManifestError, match=":1:"):
            parse_manifest(tmp_path / "m.txt")

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.txt").write_text("")
        rep = evaluate_sequences(tmp_path / "m.txt", Weights.init(preset("desk2")))
        assert rep["aggregate"]["n_pairs"] == 0 and rep["sequences"] == []

    def test_missing_file_skipped(self, tmp_path):
        rep = evaluate_sequences(write_sequence(tmp_path, missing=True), Weights.init(preset("desk2")),
                                 MatchConfig(tau=0.0), {"max_keypoints": 10})
        assert [s["sequence"] for s in rep["skipped"]] == ["broken"]
        assert rep["aggregate"]["n_pairs"] == 2
        assert rep["aggregate"]["mean_features"] == len(harris(load_image(tmp_path / "ref.pgm"), max_keypoints=10))

    def test_report_files(self, tmp_path):
        rep = evaluate_sequences(write_sequence(tmp_path), Weights.init(preset("desk2")),
                                 MatchConfig(tau=0.0), {"max_keypoints": 5})
        write_report(rep, tmp_path / "r.json", tmp_path / "r.csv")
        assert json.loads((tmp_path / "r.json").read_text())["aggregate"]["n_pairs"] == 3
        rows = (tmp_path / "r.csv").read_text().splitlines()
        assert rows[0] == "threshold,mma_match_weighted,mma_per_pair" and len(rows) == 11
        assert mma_csv(rep) == (tmp_path / "r.csv").read_text()
