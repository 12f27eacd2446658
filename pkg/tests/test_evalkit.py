from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rapnet import evalkit, synthetic
from rapnet.evalkit import MatchSet


def _unit_rows(m):
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _exhaustive_mutual(a, b):
    d = [[float(np.sqrt(((x - y) ** 2).sum())) for y in b] for x in a]
    pairs = []
    for i in range(len(a)):
        j = min(range(len(b)), key=lambda jj: (d[i][jj], jj))
        i_back = min(range(len(a)), key=lambda ii: (d[ii][j], ii))
        if i_back == i:
            pairs.append((i, j))
    return pairs


# ---------------------------------------------------------------- matching


def test_swapped_axes_match_crosswise():
    m = evalkit.match_mutual_nn(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert m.pairs.tolist() == [[0, 1], [1, 0]]
    np.testing.assert_allclose(m.distances, 0.0, atol=1e-7)


@pytest.mark.parametrize("na,nb", [(1, 7), (7, 1), (1, 1)])
def test_single_descriptor_gives_at_most_one_match(rng, na, nb):
    m = evalkit.match_mutual_nn(_unit_rows(rng.normal(size=(na, 4))), _unit_rows(rng.normal(size=(nb, 4))))
    assert len(m) <= 1


@pytest.mark.parametrize("seed", range(5))
def test_matches_equal_exhaustive_oracle(seed):
    r = np.random.default_rng(seed)
    a, b = _unit_rows(r.normal(size=(50, 64))), _unit_rows(r.normal(size=(40, 64)))
    b[:25] = _unit_rows(a[:25] + 0.1 * r.normal(size=(25, 64)))
    m = evalkit.match_mutual_nn(a, b)
    assert [tuple(p) for p in m.pairs.tolist()] == _exhaustive_mutual(a, b)
    assert len(set(m.pairs[:, 0])) == len(m) == len(set(m.pairs[:, 1]))


def test_row_permutation_relabels_matches(rng):
    a, b = _unit_rows(rng.normal(size=(30, 8))), _unit_rows(rng.normal(size=(30, 8)))
    pa, pb = rng.permutation(30), rng.permutation(30)
    base = {tuple(p) for p in evalkit.match_mutual_nn(a, b).pairs.tolist()}
    perm = evalkit.match_mutual_nn(a[pa], b[pb]).pairs
    assert {(int(pa[i]), int(pb[j])) for i, j in perm} == base


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimensions"):
        evalkit.match_mutual_nn(np.ones((3, 4)), np.ones((3, 5)))


def test_ties_resolve_to_lowest_index():
    m = evalkit.match_mutual_nn(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, 1.0]]))
    assert m.pairs.tolist() == [[0, 0]]


# ----------------------------------------------------------------- MMA


def test_identity_self_matches_are_perfect(rng):
    kps = rng.uniform(0, 100, size=(20, 2))
    m = MatchSet(np.stack([np.arange(20)] * 2, axis=1), np.zeros(20))
    curve = evalkit.mma(m, kps, kps, np.eye(3))
    assert np.all(curve.accuracy == 1.0) and curve.matches == 20


def test_empty_match_set_scores_zero():
    curve = evalkit.mma(MatchSet(np.zeros((0, 2), int), np.zeros(0)), np.zeros((0, 2)), np.zeros((0, 2)), np.eye(3))
    assert curve.matches == 0 and np.all(curve.accuracy == 0)
    assert curve.thresholds == tuple(range(1, 11))


def test_accuracy_counts_threshold_inclusively():
    a = np.zeros((4, 2))
    b = np.array([[1.0, 0.0], [0.0, 2.5], [3.0, 4.0], [20.0, 0.0]])
    m = MatchSet(np.stack([np.arange(4)] * 2, axis=1), np.zeros(4))
    curve = evalkit.mma(m, a, b, np.eye(3))
    assert curve.at(1) == 0.25 and curve.at(3) == 0.5 and curve.at(5) == 0.75 and curve.at(10) == 0.75


def random_homography(r):
    H = np.eye(3) + r.normal(scale=[[0.1, 0.1, 5], [0.1, 0.1, 5], [1e-4, 1e-4, 0]])
    return H


@pytest.mark.parametrize("seed", range(5))
def test_projection_matches_hand_oracle(seed):
    r = np.random.default_rng(seed)
    H = random_homography(r)
    pts = r.uniform(0, 200, size=(25, 2))
    got = evalkit.project(H, pts)
    for (x, y), (u, v) in zip(pts, got):
        den = H[2, 0] * x + H[2, 1] * y + H[2, 2]
        assert abs(u - (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / den) < 1e-6
        assert abs(v - (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / den) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_projection_inverse_round_trip(seed):
    r = np.random.default_rng(seed)
    H = random_homography(r)
    pts = r.uniform(0, 200, size=(10, 2))
    back = evalkit.project(np.linalg.inv(H), evalkit.project(H, pts))
    assert np.abs(back - pts).max() < 1e-6


def test_singular_homography_rejected():
    with pytest.raises(ValueError, match="singular"):
        evalkit.project(np.zeros((3, 3)), np.zeros((1, 2)))


def test_point_at_infinity_rejected():
    H = np.array([[1.0, 0, 0], [0, 1, 0], [1, 0, 1]])
    with pytest.raises(ValueError, match="infinity"):
        evalkit.project(H, np.array([[-1.0, 5.0]]))


# -------------------------------------------------------------- benchmark


class PlantedExtractor:
    """Feature sets keyed by file path, returned verbatim."""

    def __init__(self):
        self.table = {}
        self.calls = []

    def add(self, path, kps, desc):
        self.table[str(path)] = SimpleNamespace(keypoints=kps, descriptors=desc)

    def __call__(self, path):
        self.calls.append(Path(path).name)
        if str(path) not in self.table:
            raise OSError(f"no features planted for {path}")
        return self.table[str(path)]


def plant_warp_sequence(root, name, seed, noise=0.0):
    """Textured image warped by a known H, with corner keypoints projected exactly."""
    r = np.random.default_rng(seed)
    img = synthetic.checkerboard((96, 128), 8)
    H = np.array([[0.9, 0.05, 6.0], [-0.04, 0.95, 4.0], [1e-4, -5e-5, 1.0]])
    warped = synthetic.warp_image(img, H)
    seq = synthetic.write_sequence(root, name, [img, warped], [H])
    ys, xs = np.mgrid[8:88:8, 8:120:8]
    kps_a = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    kps_b = evalkit.project(H, kps_a) + noise * r.normal(size=kps_a.shape)
    desc = _unit_rows(r.normal(size=(len(kps_a), 32)))
    desc_b = _unit_rows(desc + 0.05 * r.normal(size=desc.shape))
    return seq, kps_a, kps_b, desc, desc_b


def test_planted_warp_scores_high(tmp_path):
    ext = PlantedExtractor()
    seq, kps_a, kps_b, desc, desc_b = plant_warp_sequence(tmp_path, "v_planted", seed=0)
    ext.add(seq / "1.ppm", kps_a, desc)
    ext.add(seq / "2.ppm", kps_b, desc_b)
    result = evalkit.run_benchmark(tmp_path, ext, tmp_path / "out.csv")
    curve = result.aggregates["viewpoint"]
    assert curve.at(3) >= 0.9
    assert np.all(np.diff(curve.accuracy) >= 0)


def test_identity_sequence_is_perfect(tmp_path, rng):
    img = rng.integers(0, 256, (32, 40, 3), dtype=np.uint8)
    seq = synthetic.write_sequence(tmp_path / "data", "i_self", [img, img], [np.eye(3)])
    kps, desc = rng.uniform(0, 30, (15, 2)), _unit_rows(rng.normal(size=(15, 8)))
    ext = PlantedExtractor()
    ext.add(seq / "1.ppm", kps, desc)
    ext.add(seq / "2.ppm", kps, desc)
    result = evalkit.run_benchmark(tmp_path / "data", ext)
    for kind in ("overall", "illumination"):
        assert np.all(result.aggregates[kind].accuracy == 1.0)
    assert "viewpoint" not in result.aggregates


def _mixed_dataset(root, rng):
    ext = PlantedExtractor()
    for name, seed in [("v_b", 1), ("i_a", 2), ("v_c", 3)]:
        seq, kps_a, kps_b, desc, desc_b = plant_warp_sequence(root, name, seed, noise=2.0)
        ext.add(seq / "1.ppm", kps_a, desc)
        ext.add(seq / "2.ppm", kps_b, desc_b)
    return ext


def test_csv_is_deterministic_and_well_formed(tmp_path, rng):
    ext = _mixed_dataset(tmp_path / "data", rng)
    evalkit.run_benchmark(tmp_path / "data", ext, tmp_path / "a.csv", threads=1)
    result = evalkit.run_benchmark(tmp_path / "data", ext, tmp_path / "b.csv", threads=3)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "sequence,kind,threshold,accuracy,matches"
    assert [r.name for r in result.sequences] == ["i_a", "v_b", "v_c"]
    assert len(lines) == 1 + 10 * (3 + 3)
    for curve in [s.curve for s in result.sequences] + list(result.aggregates.values()):
        assert np.all(np.diff(curve.accuracy) >= 0)


def test_missing_homography_file(tmp_path, rng):
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    seq = synthetic.write_sequence(tmp_path, "v_x", [img, img], [np.eye(3)])
    (seq / "H_1_2").unlink()
    ext = PlantedExtractor()
    ext.add(seq / "1.ppm", np.zeros((1, 2)), np.ones((1, 2)))
    ext.add(seq / "2.ppm", np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(evalkit.BenchmarkError, match="H_1_2"):
        evalkit.run_benchmark(tmp_path, ext)


def test_unreadable_query_is_skipped_and_counted(tmp_path, rng, caplog):
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    seq = synthetic.write_sequence(tmp_path, "i_x", [img, img, img], [np.eye(3), np.eye(3)])
    kps, desc = rng.uniform(0, 15, (5, 2)), _unit_rows(rng.normal(size=(5, 4)))
    ext = PlantedExtractor()
    ext.add(seq / "1.ppm", kps, desc)
    ext.add(seq / "3.ppm", kps, desc)
    result = evalkit.run_benchmark(tmp_path, ext)
    assert result.skipped == 1 and result.sequences[0].pairs == 1
    assert "skipping" in caplog.text


def test_sequence_kinds():
    assert evalkit.sequence_kind("i_ajuntament") == "illumination"
    assert evalkit.sequence_kind("v_wall") == "viewpoint"
    assert evalkit.sequence_kind("misc") == "other"


def test_plot_writes_file(tmp_path, rng):
    ext = _mixed_dataset(tmp_path / "data", rng)
    result = evalkit.run_benchmark(tmp_path / "data", ext)
    evalkit.plot_curves(result, tmp_path / "mma.png")
    assert (tmp_path / "mma.png").stat().st_size > 0
