import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harness import checker_noise_image, occluder_run
from rapnet import extractor, heads
from rapnet.backbone import forward_dense


# ---------------------------------------------------------------- score map


def test_constant_region_map_leaves_points(rng):
    P = rng.uniform(size=(1, 9, 9)).astype(np.float32)
    s = extractor.score_map(P, np.full((1, 9, 9), 0.6, np.float32))
    assert np.abs(s.values - P).max() < 1e-6
    assert s.r_mean == pytest.approx(0.6)


def test_scalar_example():
    # R = [2, 0] has mean 1, so the first pixel sits exactly 1 above the mean
    s = extractor.score_map(np.array([[[0.5, 0.5]]]), np.array([[[2.0, 0.0]]]))
    assert s.values[0, 0, 0] == pytest.approx(0.5 * np.e, abs=1e-6)
    assert s.values[0, 0, 0] == pytest.approx(1.35914, abs=1e-5)


def test_scores_match_scalar_loop(rng):
    P, R = rng.uniform(size=(1, 6, 7)), rng.uniform(size=(1, 6, 7))
    s = extractor.score_map(P, R)
    mean = sum(R.ravel()) / R.size
    for i in range(6):
        for j in range(7):
            assert abs(s.values[0, i, j] - P[0, i, j] * np.exp(R[0, i, j] - mean)) < 1e-6


def test_extent_mismatch():
    with pytest.raises(ValueError, match="differ"):
        extractor.score_map(np.ones((1, 4, 4)), np.ones((1, 4, 5)))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), bump=st.floats(1e-4, 5.0))
def test_raising_region_weight_never_lowers_score(seed, bump):
    r = np.random.default_rng(seed)
    P, R = r.uniform(size=(1, 5, 5)), r.uniform(size=(1, 5, 5))
    y, x = r.integers(0, 5, 2)
    before = extractor.score_map(P, R)
    R2 = R.copy()
    R2[0, y, x] += bump
    # same threshold for both maps, as in the monotonicity statement
    after = P * np.exp(R2 - before.r_mean)
    assert after[0, y, x] >= before.values[0, y, x] - 1e-7


def test_reweighting_keeps_ranking_where_region_is_flat(rng):
    P = rng.uniform(size=(1, 8, 8))
    R = np.full((1, 8, 8), 0.5)
    R[0, :2] = 0.9
    s = extractor.score_map(P, R).values[0, 2:].ravel()
    np.testing.assert_array_equal(np.argsort(s, kind="stable"), np.argsort(P[0, 2:].ravel().astype(np.float32), kind="stable"))


# ---------------------------------------------------------------- selection


def _full_sort_oracle(scores, mask, k, border):
    h, w = scores.shape
    cands = [
        (-scores[y, x], y, x)
        for y in range(h)
        for x in range(w)
        if mask[y, x] and border <= y < h - border and border <= x < w - border
    ]
    cands.sort()
    return [(x, y, -s) for s, y, x in cands[:k]]


@pytest.mark.parametrize("seed", range(10))
def test_topk_matches_full_sort(seed):
    r = np.random.default_rng(seed)
    scores = r.uniform(size=(20, 24)).astype(np.float32)
    scores[r.uniform(size=scores.shape) < 0.2] = 0.5  # plenty of ties
    mask = r.uniform(size=scores.shape) < 0.4
    k, border = int(r.integers(1, 60)), int(r.integers(0, 5))
    got = extractor.select_topk(scores, mask, k, border)
    expected = _full_sort_oracle(scores, mask, k, border)
    assert [tuple(row) for row in got.tolist()] == [(float(x), float(y), float(s)) for x, y, s in expected]


def test_topk_saturates():
    mask = np.zeros((6, 6), bool)
    mask[2, 3] = mask[4, 1] = True
    assert len(extractor.select_topk(np.ones((6, 6)), mask, 500)) == 2


def test_topk_ties_ordered_by_row_then_column():
    scores = np.zeros((5, 5))
    mask = np.zeros((5, 5), bool)
    for y, x in [(3, 1), (1, 4), (1, 2)]:
        scores[y, x] = 0.7
        mask[y, x] = True
    got = extractor.select_topk(scores, mask, 3)
    assert got[:, :2].tolist() == [[2, 1], [4, 1], [1, 3]]


def test_topk_border_excludes_edges():
    mask = np.ones((10, 10), bool)
    got = extractor.select_topk(np.ones((10, 10)), mask, 500, border=3)
    assert len(got) == 16
    assert got[:, :2].min() >= 3 and got[:, :2].max() <= 6


def test_topk_validates_arguments():
    with pytest.raises(ValueError):
        extractor.select_topk(np.ones((3, 3)), np.ones((3, 3), bool), 0)


# ---------------------------------------------------------------- pipeline


def test_keypoints_scale_back_to_original(toy_backbone, monkeypatch):
    mask = np.zeros((16, 16), bool)
    mask[10, 12] = True  # resized (x=12, y=10)
    monkeypatch.setattr(heads, "hard_detect", lambda F: mask)
    fs = extractor.extract(np.zeros((32, 32, 3), np.uint8), toy_backbone, None, extractor.ExtractOptions(max_edge=16, border=0))
    assert fs.scale == 2.0
    assert fs.keypoints[:, :2].tolist() == [[24.0, 20.0]]


def test_extract_is_deterministic(toy_backbone, toy_attention, rgb_image):
    a = extractor.extract(rgb_image, toy_backbone, toy_attention)
    b = extractor.extract(rgb_image, toy_backbone, toy_attention)
    assert a.keypoints.tobytes() == b.keypoints.tobytes()
    assert a.descriptors.tobytes() == b.descriptors.tobytes()


def test_feature_set_invariants(toy_backbone, toy_attention, rgb_image):
    fs = extractor.extract(rgb_image, toy_backbone, toy_attention, extractor.ExtractOptions(border=2))
    assert len(fs) > 0 and fs.descriptors.shape == (len(fs), 16)
    assert np.all(np.abs(np.linalg.norm(fs.descriptors, axis=1) - 1) < 1e-5)
    keys = [(-s, y, x) for x, y, s in fs.keypoints]
    assert keys == sorted(keys)
    # scale 1.0: integer pixel positions of detected cells
    assert np.all(fs.keypoints[:, :2] == np.round(fs.keypoints[:, :2]))
    mask = heads.hard_detect(forward_dense(toy_backbone, toy_backbone.preprocess(rgb_image)))
    assert all(mask[int(y), int(x)] for x, y, _ in fs.keypoints)


def test_constant_region_equals_point_only_pipeline(toy_backbone, toy_attention, rgb_image):
    flat = toy_attention.updated({"fusion/weight": np.zeros_like(toy_attention.tensors["fusion/weight"])})
    with_r = extractor.extract(rgb_image, toy_backbone, flat)
    without = extractor.extract(rgb_image, toy_backbone, None)
    assert with_r.keypoints.tobytes() == without.keypoints.tobytes()
    assert with_r.descriptors.tobytes() == without.descriptors.tobytes()


# ---------------------------------------------------------------- files


def test_rapf_round_trip(tmp_path, toy_backbone, toy_attention, rgb_image):
    fs = extractor.extract(rgb_image, toy_backbone, toy_attention)
    extractor.write_features(tmp_path / "a.rapf", fs)
    back = extractor.read_features(tmp_path / "a.rapf")
    assert back.image_size == (48, 40)
    np.testing.assert_array_equal(back.keypoints, fs.keypoints.astype(np.float32))
    np.testing.assert_array_equal(back.descriptors, fs.descriptors)


def test_rapf_rejects_truncation(tmp_path, toy_backbone, rgb_image):
    fs = extractor.extract(rgb_image, toy_backbone, None)
    path = tmp_path / "a.rapf"
    extractor.write_features(path, fs)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(extractor.FeatureFileError, match="size"):
        extractor.read_features(path)


def test_text_export(tmp_path, toy_backbone, rgb_image):
    fs = extractor.extract(rgb_image, toy_backbone, None)
    extractor.write_features_text(tmp_path / "a.txt", fs)
    lines = (tmp_path / "a.txt").read_text().splitlines()
    assert lines[0].startswith("# width=48 height=40")
    assert len(lines) == len(fs) + 1
    assert len(lines[1].split()) == 3 + 16


# ---------------------------------------------------------------- synthetic


@pytest.mark.slow
def test_trained_attention_prefers_static_half():
    _, backbone, _, _, params, _ = occluder_run()
    img = checker_noise_image()
    trained = extractor.extract(img, backbone, params)
    plain = extractor.extract(img, backbone, None)
    share = float(np.mean(trained.keypoints[:, 0] < 64))
    assert len(trained) == 500
    assert share >= 0.7
    # without the region map the noisy half wins, so the gain comes from attention
    assert np.mean(plain.keypoints[:, 0] < 64) < 0.3
