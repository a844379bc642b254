import numpy as np
import pytest
from hypothesis import given, strategies as st

from bathykl import geom
from bathykl.geom import PlanarShift

finite = st.floats(-50, 50, allow_nan=False)
small_rot = st.floats(-1.1, 1.1, allow_nan=False)


def rand_transform(rng, max_angle=2.0):
    v = np.concatenate([rng.uniform(-5, 5, 3), rng.uniform(-1, 1, 3)])
    v[3:] *= rng.uniform(0, max_angle) / max(np.linalg.norm(v[3:]), 1e-12)
    return geom.exp_map(v), v


def rodrigues_oracle(w):
    """Rotation by angle |w| about w/|w| built from an explicit axis-angle quaternion."""
    th = np.linalg.norm(w)
    if th == 0:
        return np.eye(3)
    x, y, z = w / th
    qw, s = np.cos(th / 2), np.sin(th / 2)
    qx, qy, qz = x * s, y * s, z * s
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


def assert_same(a, b, tol=1e-9):
    np.testing.assert_allclose(a.rotation, b.rotation, atol=tol)
    np.testing.assert_allclose(a.translation, b.translation, atol=tol)


def test_compose_examples(rng):
    t, _ = rand_transform(rng)
    assert_same(geom.compose(t, geom.identity()), t)
    assert_same(geom.compose(t, geom.inverse(t)), geom.identity())
    assert_same(geom.compose(geom.translate(1, 0, 0), geom.translate(0, 2, 0)), geom.translate(1, 2, 0))


def test_compose_associative(rng):
    a, b, c = (rand_transform(rng)[0] for _ in range(3))
    assert_same(geom.compose(geom.compose(a, b), c), geom.compose(a, geom.compose(b, c)))
    assert_same(a @ b, geom.compose(a, b))


def test_relative_examples(rng):
    t, _ = rand_transform(rng)
    assert_same(geom.relative(t, t), geom.identity())
    assert_same(geom.relative(geom.identity(), t), t)
    assert_same(geom.relative(geom.translate(1, 0, 0), geom.translate(3, 1, 0)), geom.translate(2, 1, 0))


def test_exp_examples():
    assert_same(geom.exp_map(np.zeros(6)), geom.identity())
    assert_same(geom.exp_map([1, 0.5, 0, 0, 0, 0]), geom.translate(1, 0.5, 0))
    v = np.array([1, 0.5, 0, 0, 0, 0.3])
    np.testing.assert_allclose(geom.log_map(geom.exp_map(v)), v, atol=1e-12)


def test_exp_rotation_matches_quaternion_oracle(rng):
    for _ in range(50):
        w = rng.normal(size=3) * rng.uniform(0, 3)
        r = geom.exp_map(np.concatenate([np.zeros(3), w])).rotation
        np.testing.assert_allclose(r, rodrigues_oracle(w), atol=1e-12)


def test_log_examples():
    np.testing.assert_allclose(geom.log_map(geom.identity()), np.zeros(6), atol=1e-15)
    np.testing.assert_allclose(geom.log_map(geom.translate(2, 1, 0)), [2, 1, 0, 0, 0, 0], atol=1e-15)


def test_log_exp_roundtrip_100(rng):
    for _ in range(100):
        _, v = rand_transform(rng, max_angle=1.999)
        np.testing.assert_allclose(geom.log_map(geom.exp_map(v)), v, atol=1e-9)


def test_log_near_pi_raises():
    t = geom.exp_map([0, 0, 0, 0, 0, np.pi - 1e-8])
    with pytest.raises(geom.AngleAtBoundary):
        geom.log_map(t)


def test_apply_examples(rng):
    s = rng.normal(size=(20, 3))
    np.testing.assert_allclose(geom.apply(geom.identity(), s), s)
    np.testing.assert_allclose(geom.apply(geom.translate(0, 0, 1), [[0, 0, 0]]), [[0, 0, 1]])
    t, _ = rand_transform(rng)
    np.testing.assert_allclose(geom.apply(t, geom.apply(geom.inverse(t), s)), s, atol=1e-9)


def test_pose7_roundtrip(rng):
    for _ in range(20):
        t, _ = rand_transform(rng, max_angle=3.0)
        p = geom.to_pose7(t)
        assert p[3] >= 0
        assert abs(np.linalg.norm(p[3:]) - 1) < 1e-12
        assert_same(geom.from_pose7(p), t, 1e-12)
    with pytest.raises(ValueError):
        geom.from_pose7([1, 2, 3])


def test_long_chain_stays_orthonormal(rng):
    t = geom.identity()
    step, _ = rand_transform(rng)
    for _ in range(5000):
        t = geom.compose(t, step)
    r = t.rotation
    assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-6
    assert abs(np.linalg.det(r) - 1) < 1e-9 or np.linalg.norm(r.T @ r - np.eye(3)) < 1e-6


@given(st.lists(finite, min_size=3, max_size=3), st.lists(small_rot, min_size=3, max_size=3))
def test_prop_roundtrip_and_det(rho, w):
    w = np.array(w)
    if np.linalg.norm(w) >= 2:
        w = w / np.linalg.norm(w) * 1.9
    v = np.concatenate([rho, w])
    t = geom.exp_map(v)
    assert abs(np.linalg.det(t.rotation) - 1) <= 1e-9
    assert np.linalg.norm(t.rotation.T @ t.rotation - np.eye(3)) <= 1e-9
    assert np.linalg.norm(geom.log_map(t) - v) <= 1e-9
    assert_same(geom.compose(t, geom.inverse(t)), geom.identity())


@given(finite, finite)
def test_prop_planar_embedding(dx, dy):
    s = PlanarShift(dx, dy)
    np.testing.assert_array_equal(s.tangent(), [dx, dy, 0, 0, 0, 0])
    v = geom.log_map(s.transform())
    assert v[2] == 0 and np.all(v[3:] == 0)
    np.testing.assert_allclose(v[:2], [dx, dy], atol=1e-12)
