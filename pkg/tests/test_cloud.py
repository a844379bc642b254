import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bathykl import cloud, geom
from bathykl.cloud import Submap


def sort_rows(a):
    return a[np.lexsort(a.T[::-1])]


def test_preprocess_examples():
    nc = cloud.preprocess(Submap(0, [[0, 0, 0], [2, 0, 0]]), 0.1)
    np.testing.assert_allclose(sort_rows(nc.points), [[-1, 0, 0], [1, 0, 0]], atol=1e-12)
    with pytest.raises(cloud.DegenerateCloud):
        cloud.preprocess(Submap(0, [[1, 2, 3]] * 5), 0.1)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    nc = cloud.preprocess(Submap(0, corners), 3.0)
    np.testing.assert_allclose(nc.points, [[0, 0, 0]], atol=1e-12)


def test_preprocess_normalisation(rng):
    s = Submap(3, rng.normal(size=(500, 3)) * [20, 10, 2] + [100, -40, -50])
    centered = s.points - s.points.mean(0)
    unit = centered / np.linalg.norm(centered, axis=1).max()
    assert np.abs(unit.mean(0)).max() < 1e-9
    nc = cloud.preprocess(s, 0.05)
    assert nc.source_id == 3
    assert np.linalg.norm(nc.points, axis=1).max() <= 1 + 1e-9
    assert len(nc) <= len(s)


def test_voxel_examples():
    np.testing.assert_allclose(cloud.voxel_downsample([[0.1, 0.1, 0.1], [0.2, 0.3, 0.4]], 1.0), [[0.15, 0.2, 0.25]])
    pts = np.array([[0.5, 0, 0], [1.5, 0, 0], [2.5, 0, 0]])
    assert len(cloud.voxel_downsample(pts, 1.0)) == 3
    np.testing.assert_allclose(cloud.voxel_downsample([[0.1, 0, 0], [0.3, 0, 0]], 1.0), [[0.2, 0, 0]])
    with pytest.raises(ValueError):
        cloud.voxel_downsample(pts, 0.0)


def test_voxel_matches_dictionary_oracle(rng):
    pts = rng.uniform(-3, 3, (400, 3))
    groups = {}
    for p in pts:
        groups.setdefault(tuple(np.floor(p / 0.7).astype(int)), []).append(p)
    expect = np.array([np.mean(v, axis=0) for v in groups.values()])
    np.testing.assert_allclose(sort_rows(cloud.voxel_downsample(pts, 0.7)), sort_rows(expect), atol=1e-12)


def test_knn_examples():
    idx = cloud.NeighborIndex([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    np.testing.assert_array_equal(idx.knn([1, 0, 0], 1), [[1, 0, 0]])
    assert len(idx.knn([0, 0, 0], 10)) == 3
    np.testing.assert_array_equal(idx.knn([0, 0, 0], 2), [[0, 0, 0], [1, 0, 0]])


def test_knn_ties_by_insertion_order():
    pts = [[2, 0, 0], [-1, 0, 0], [0, 1, 0], [1, 0, 0], [0, -1, 0]]
    idx = cloud.NeighborIndex(pts)
    np.testing.assert_array_equal(idx.knn_indices([0, 0, 0], 3), [1, 2, 3])


def test_knn_matches_brute_force(rng):
    pts = rng.normal(size=(300, 3))
    idx = cloud.NeighborIndex(pts)
    for _ in range(20):
        q = rng.normal(size=3)
        d = np.linalg.norm(pts - q, axis=1)
        expect = np.lexsort((np.arange(len(pts)), d))[:7]
        np.testing.assert_array_equal(idx.knn_indices(q, 7), expect)
        dk = np.linalg.norm(idx.knn(q, 7) - q, axis=1)
        assert np.all(np.diff(dk) >= 0)


def plane_grid(n=15):
    g = np.arange(n, dtype=float)
    xx, yy = np.meshgrid(g, g)
    return np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])


def test_point_covariances_plane():
    cov = cloud.point_covariances(Submap(0, plane_grid()), 20, 1e-3)
    for c in cov[::17]:
        w, v = np.linalg.eigh(c)
        np.testing.assert_allclose(w, [1e-3, 1, 1], atol=1e-12)
        assert abs(abs(v[2, 0]) - 1) < 1e-9


def test_point_covariances_eps_one_is_identity(rng):
    cov = cloud.plane_covariances(rng.normal(size=(60, 3)), 10, 1.0)
    np.testing.assert_allclose(cov, np.broadcast_to(np.eye(3), cov.shape), atol=1e-12)


def test_point_covariances_rotation_equivariant(rng):
    pts = plane_grid() + rng.normal(scale=0.05, size=(225, 3))
    t = geom.exp_map([1, 2, 3, 0.4, -0.3, 0.9])
    c0 = cloud.plane_covariances(pts, 20, 1e-3)
    c1 = cloud.plane_covariances(geom.apply(t, pts), 20, 1e-3)
    r = t.rotation
    np.testing.assert_allclose(c1, r @ c0 @ r.T, atol=1e-6)
    normal = r @ np.array([0, 0, 1.0])
    w, v = np.linalg.eigh(c1[100])
    assert abs(abs(v[:, 0] @ normal) - 1) < 1e-2
    assert np.allclose(c1, np.swapaxes(c1, 1, 2), atol=1e-12)
    assert np.linalg.eigvalsh(c1).min() >= 0


def test_add_noise_examples(rng):
    s = Submap(0, rng.normal(size=(100, 3)))
    np.testing.assert_array_equal(cloud.add_noise(s, (0, 0, 0), 1).points, s.points)
    np.testing.assert_array_equal(cloud.add_noise(s, (0.1, 0.1, 0.1), 7).points,
                                  cloud.add_noise(s, (0.1, 0.1, 0.1), 7).points)
    big = Submap(0, np.zeros((100_000, 3)))
    dz = cloud.add_noise(big, (0, 0, 0.1), 3).points[:, 2]
    assert 0.098 <= dz.std() <= 0.102
    with pytest.raises(ValueError):
        cloud.add_noise(s, (0, 0, -1), 0)


def test_submap_validation():
    with pytest.raises(ValueError):
        Submap(0, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        Submap(0, [[0, 0, np.nan]])


@pytest.mark.parametrize("binary", [False, True])
def test_submap_file_roundtrip(tmp_path, rng, binary):
    s = Submap(4, rng.normal(size=(50, 3)) * 10, geom.from_xy_yaw(3, 4, 0.7, -2))
    p = tmp_path / ("s.bin" if binary else "s.txt")
    cloud.write_submap(s, p, binary=binary)
    r = cloud.read_submap(p, 4)
    assert r.id == 4
    np.testing.assert_array_equal(r.points, s.points)
    np.testing.assert_allclose(r.frame.matrix(), s.frame.matrix(), atol=1e-12)
    if not binary:
        lines = p.read_text().splitlines()
        assert lines[0] == "BATHYKL-SUBMAP v1"
        assert len(lines[1].split()) == 7
        assert len(lines) == 52
    else:
        assert p.read_bytes()[:4] == b"BKSM"


def test_sigma_z():
    flat = Submap(0, plane_grid())
    assert cloud.sigma_z(flat) == 0.0
    g = plane_grid()
    tilted = Submap(0, g + np.column_stack([np.zeros(225), np.zeros(225), g[:, 0]]))
    assert cloud.sigma_z(tilted) > 0.1


pts_strategy = arrays(np.float64, st.tuples(st.integers(2, 40), st.just(3)),
                      elements=st.floats(-100, 100, allow_nan=False, width=64))


@given(pts_strategy, st.integers(0, 2**32 - 1))
def test_prop_preprocess_permutation_invariant(pts, seed):
    pts = np.round(pts, 3)
    if np.ptp(pts, axis=0).max() == 0:
        return
    s = Submap(0, pts)
    perm = np.random.default_rng(seed).permutation(len(pts))
    a = cloud.preprocess(s, 0.05).points
    b = cloud.preprocess(Submap(0, pts[perm]), 0.05).points
    assert a.shape == b.shape
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a, axis=1).max() <= 1 + 1e-9


@given(pts_strategy, st.floats(0.01, 10))
def test_prop_voxel_never_increases(pts, size):
    assert len(cloud.voxel_downsample(pts, size)) <= len(pts)
