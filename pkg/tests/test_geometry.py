import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mamba3d import tensor as T
from mamba3d.geometry import (
    PointCloud,
    PointFileError,
    chamfer_distance,
    fps,
    group_patches,
    knn,
    load_points,
    save_points,
    synth_shapes,
)
from mamba3d.gradcheck import finite_diff_check
from mamba3d.tensor import Tensor


# Independent oracles: plain Python loops over Euclidean distances.

def fps_oracle(pts, L, start):
    chosen = [start]
    while len(chosen) < L:
        best, best_d = None, -1.0
        for i in range(len(pts)):
            d = min(float(np.sqrt(((pts[i] - pts[j]) ** 2).sum())) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_oracle(pts, q, K):
    out = []
    for qi in q:
        d = [(float(np.sqrt(((qi - p) ** 2).sum())), i) for i, p in enumerate(pts)]
        out.append([i for _, i in sorted(d)[:K]])
    return np.array(out)


def test_fps_exhaustion():
    pts = np.random.default_rng(0).standard_normal((10, 3))
    idx = fps(pts, 10)
    assert sorted(idx) == list(range(10))
    assert list(idx) == fps_oracle(pts, 10, 0)


def test_fps_square_corners():
    pts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.5, 0.5, 0]], float)
    assert sorted(fps(pts, 4, 0)) == [0, 1, 2, 3]
    assert fps_oracle(pts, 4, 0) == list(fps(pts, 4, 0))


def test_fps_errors():
    with pytest.raises(ValueError):
        fps(np.zeros((3, 3)), 4)


@pytest.mark.parametrize("seed", range(5))
def test_fps_matches_oracle_256(seed):
    pts = np.random.default_rng(seed).standard_normal((256, 3))
    assert list(fps(pts, 32, 0)) == fps_oracle(pts, 32, 0)


def test_fps_permutation_covariant():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((64, 3))
    perm = rng.permutation(64)
    a = fps(pts, 12, 5)
    b = fps(pts[perm], 12, int(np.flatnonzero(perm == 5)[0]))
    np.testing.assert_array_equal(pts[a], pts[perm][b])


def test_knn_self_and_line():
    pts = np.random.default_rng(0).standard_normal((20, 3))
    np.testing.assert_array_equal(knn(pts, pts, 1)[:, 0], np.arange(20))
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float)
    np.testing.assert_array_equal(knn(line, line[:1], 2), [[0, 1]])


def test_knn_ties_lowest_index():
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0]], float)
    np.testing.assert_array_equal(knn(pts, np.zeros((1, 3)), 2), [[0, 1]])


def test_knn_matches_oracle_512():
    rng = np.random.default_rng(7)
    pts = rng.standard_normal((512, 3))
    q = rng.standard_normal((20, 3))
    np.testing.assert_array_equal(knn(pts, q, 16), knn_oracle(pts, q, 16))


def test_knn_errors():
    with pytest.raises(ValueError):
        knn(np.zeros((3, 3)), np.zeros((1, 3)), 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_knn_permutation_invariant_sets(seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((40, 3))
    q = rng.standard_normal((5, 3))
    perm = rng.permutation(40)
    a = pts[knn(pts, q, 6)]
    b = pts[perm][knn(pts[perm], q, 6)]
    for x, y in zip(a, b):
        assert {tuple(p) for p in x} == {tuple(p) for p in y}


@pytest.mark.parametrize("L", [64, 128])
def test_group_patches_shapes(L):
    cloud = synth_shapes("sphere", 1024, seed=0)
    ps = group_patches(cloud, L, 32)
    assert ps.centers.shape == (L, 3)
    assert ps.groups.shape == (L, 32, 3)


def test_group_patches_invariants():
    cloud = synth_shapes("torus", 300, seed=1)
    ps = group_patches(cloud, 16, 12)
    # the center is its own nearest neighbour, stored as the origin
    np.testing.assert_array_equal(ps.groups[:, 0], np.zeros((16, 3)))
    restored = ps.groups + ps.centers[:, None, :]
    np.testing.assert_array_equal(restored, cloud.points[ps.source_indices])
    np.testing.assert_array_equal(ps.source_indices, knn_oracle(cloud.points, ps.centers, 12))


# ---------------------------------------------------------------- Chamfer

def test_chamfer_examples():
    a = np.random.default_rng(0).standard_normal((9, 3))
    assert chamfer_distance(a, a).item() == 0.0
    assert chamfer_distance(np.zeros((1, 3)), np.array([[1.0, 0, 0]])).item() == 2.0
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), a)


@pytest.mark.parametrize("seed", range(10))
def test_chamfer_symmetric_and_translation(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((13, 3)), rng.standard_normal((7, 3))
    ab, ba = chamfer_distance(a, b).item(), chamfer_distance(b, a).item()
    assert ab == ba
    t = rng.standard_normal(3)
    assert abs(chamfer_distance(a + t, b + t).item() - ab) <= 1e-6


def test_chamfer_gradcheck():
    rng = np.random.default_rng(3)
    with T.default_dtype("f64"):
        a, b = Tensor(rng.standard_normal((8, 3))), Tensor(rng.standard_normal((6, 3)))
        assert finite_diff_check(lambda v: chamfer_distance(v[0], v[1]), [a, b], scheme="richardson") <= 1e-6


# ---------------------------------------------------------------- shapes

def test_sphere_on_unit_radius():
    pts = synth_shapes("sphere", 512, seed=3).points
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["sphere", "cube", "torus"]))
def test_group_offsets_restore_exactly(seed, kind):
    cloud = synth_shapes(kind, 128, seed=seed, noise_sigma=0.02)
    ps = group_patches(cloud, 8, 16)
    restored = ps.groups + ps.centers[:, None, :]
    assert np.array_equal(restored, cloud.points[ps.source_indices])


@pytest.mark.parametrize("kind", ["sphere", "cube", "torus"])
def test_synth_deterministic_and_bounded(kind):
    a = synth_shapes(kind, 256, seed=11, noise_sigma=0.01)
    b = synth_shapes(kind, 256, seed=11, noise_sigma=0.01)
    assert np.array_equal(a.points, b.points)
    assert np.linalg.norm(a.points, axis=1).max() == pytest.approx(1.0)


def test_torus_no_duplicates():
    pts = synth_shapes("torus", 2048, seed=0).points
    d = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0


def test_cube_points_on_faces():
    pts = synth_shapes("cube", 400, seed=2).points
    face = np.abs(pts).max(axis=1)
    np.testing.assert_allclose(face, face[0], rtol=1e-6)
    assert face[0] >= 1 / np.sqrt(3)


def test_synth_unknown_class():
    with pytest.raises(ValueError):
        synth_shapes("pyramid", 64, 0)
    with pytest.raises(ValueError):
        synth_shapes("cube", 4, 0)


# ---------------------------------------------------------------- files

def test_load_xyz(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 0 0\n")
    assert len(load_points(p, "xyz")) == 2
    p.write_text("0 0 0 9 9\n\n1 2 3\n")
    np.testing.assert_array_equal(load_points(p).points, [[0, 0, 0], [1, 2, 3]])


def test_load_off_cube(tmp_path):
    verts = "\n".join(f"{x} {y} {z}" for x in (0, 1) for y in (0, 1) for z in (0, 1))
    p = tmp_path / "c.off"
    p.write_text(f"OFF\n8 6 12\n{verts}\n4 0 1 3 2\n")
    assert len(load_points(p)) == 8
    p.write_text(f"OFF8 0 0\n{verts}\n")
    assert len(load_points(p)) == 8


@pytest.mark.parametrize("text,line", [("0 0 0\n1 x 0\n", "line 2"), ("0 0\n", "line 1")])
def test_load_xyz_errors(tmp_path, text, line):
    p = tmp_path / "bad.xyz"
    p.write_text(text)
    with pytest.raises(PointFileError, match=line):
        load_points(p)


def test_load_off_errors(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("PLY\n1 0 0\n0 0 0\n")
    with pytest.raises(PointFileError, match="line 1"):
        load_points(p)
    p.write_text("OFF\n3 0 0\n0 0 0\n")
    with pytest.raises(PointFileError):
        load_points(p)


@pytest.mark.parametrize("fmt", ["xyz", "off"])
def test_round_trip(tmp_path, fmt):
    cloud = synth_shapes("torus", 200, seed=5, noise_sigma=0.02)
    p = tmp_path / f"r.{fmt}"
    save_points(p, cloud)
    back = load_points(p)
    # 6 significant digits
    np.testing.assert_allclose(back.points, cloud.points, rtol=1e-5, atol=1e-6)


def test_pointcloud_rejects_bad():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0, 0]]))
