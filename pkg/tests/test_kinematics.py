import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import planar_chain, random_chain
from tangentsafe.kinematics import (
    Attachment,
    Joint,
    JointState,
    KinematicPlant,
    KinematicsError,
    SerialChain,
    SphereCover,
    damped_pinv_ik,
    forward_point,
    integrate,
    is_rigid,
    make_transform,
    point_jacobian,
    rot_axis_angle,
    sphere_positions,
)


def naive_point(chain, q, a):
    """Plain 4x4 product, written independently of the library's batching."""
    T = chain.base_pose.copy()
    for j in range(a.link_index):
        joint = chain.joints[j]
        x, y, z = joint.axis
        c, s = np.cos(q[j]), np.sin(q[j])
        K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
        R = np.eye(3) + s * K + (1 - c) * K @ K
        Tj = np.eye(4)
        Tj[:3, :3] = R
        T = T @ joint.origin @ Tj
    return (T @ np.append(a.local_offset, 1.0))[:3]


def fd_jacobian(chain, q, a, h=1e-6):
    J = np.zeros((3, chain.n))
    for j in range(chain.n):
        e = np.zeros(chain.n)
        e[j] = h
        J[:, j] = (forward_point(chain, q + e, a) - forward_point(chain, q - e, a)) / (2 * h)
    return J


class TestForwardPoint:
    def test_identity_configuration(self):
        chain = planar_chain([1.0])
        p = forward_point(chain, [0.0], Attachment(1, [1, 0, 0]))
        assert np.allclose(p, [1, 0, 0], atol=1e-15)

    def test_quarter_turn(self):
        chain = planar_chain([1.0])
        p = forward_point(chain, [np.pi / 2], Attachment(1, [1, 0, 0]))
        assert np.allclose(p, [0, 1, 0], atol=1e-15)

    def test_matches_matrix_product(self, rng):
        for _ in range(20):
            chain = random_chain(rng, 3)
            q = rng.uniform(-3, 3, 3)
            for link in range(4):
                a = Attachment(link, rng.normal(size=3))
                assert np.allclose(forward_point(chain, q, a), naive_point(chain, q, a),
                                   atol=1e-12, rtol=0)

    def test_invalid_link_index(self, planar3):
        with pytest.raises(KinematicsError):
            forward_point(planar3, np.zeros(3), Attachment(4, [0, 0, 0]))
        with pytest.raises(KinematicsError):
            forward_point(planar3, np.zeros(3), Attachment(-1, [0, 0, 0]))

    def test_wrong_q_length(self, planar3):
        with pytest.raises(KinematicsError):
            forward_point(planar3, np.zeros(2), Attachment(1))

    def test_base_link_point_is_fixed(self, rng):
        chain = random_chain(rng, 4)
        a = Attachment(0, [0.2, 0.1, 0.0])
        p0 = forward_point(chain, np.zeros(4), a)
        p1 = forward_point(chain, rng.uniform(-3, 3, 4), a)
        assert np.array_equal(p0, p1)

    def test_cache_does_not_leak_between_configurations(self, planar3):
        a = Attachment(3, [0.4, 0, 0])
        q1 = np.array([0.1, 0.2, 0.3])
        q2 = np.array([0.3, 0.2, 0.1])
        p1 = forward_point(planar3, q1, a).copy()
        p2 = forward_point(planar3, q2, a).copy()
        assert not np.allclose(p1, p2)
        assert np.array_equal(forward_point(planar3, q1, a), p1)

    def test_pickle_round_trip(self, planar3):
        a = Attachment(3, [0.4, 0, 0])
        q = np.array([0.1, -0.4, 0.9])
        clone = pickle.loads(pickle.dumps(planar3))
        assert np.array_equal(forward_point(clone, q, a), forward_point(planar3, q, a))


class TestPointJacobian:
    def test_single_link_column(self):
        chain = planar_chain([1.0])
        J = point_jacobian(chain, [0.0], Attachment(1, [1, 0, 0]))
        assert np.allclose(J[:, 0], [0, 1, 0], atol=1e-15)

    def test_base_attachment_is_zero(self, rng):
        chain = random_chain(rng, 5)
        J = point_jacobian(chain, rng.uniform(-3, 3, 5), Attachment(0, [1, 2, 3]))
        assert np.array_equal(J, np.zeros((3, 5)))

    def test_distal_columns_are_zero(self, rng):
        chain = random_chain(rng, 5)
        J = point_jacobian(chain, rng.uniform(-3, 3, 5), Attachment(2, [0.1, 0.2, 0.3]))
        assert np.array_equal(J[:, 2:], np.zeros((3, 3)))

    def test_matches_finite_differences_100_samples(self, rng):
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 8))
            chain = random_chain(rng, n)
            q = rng.uniform(-3, 3, n)
            a = Attachment(int(rng.integers(0, n + 1)), rng.normal(size=3))
            J = point_jacobian(chain, q, a)
            fd = fd_jacobian(chain, q, a)
            scale = max(np.abs(fd).max(), 1e-3)
            worst = max(worst, np.abs(J - fd).max() / scale)
        assert worst <= 1e-5


class TestSpherePositions:
    def test_order_and_radii_preserved(self, planar3, planar3_cover):
        q = np.array([0.3, -0.2, 0.5])
        out = sphere_positions(planar3, q, planar3_cover)
        assert [r for _, r in out] == [r for _, r in planar3_cover.spheres]
        for (x, _), (a, _) in zip(out, planar3_cover.spheres):
            assert np.array_equal(x, forward_point(planar3, q, a))

    def test_quarter_turn_per_sphere(self):
        chain = planar_chain([1.0])
        cover = SphereCover([(Attachment(1, [1, 0, 0]), 0.1), (Attachment(1, [0.5, 0, 0]), 0.2)])
        out = sphere_positions(chain, [np.pi / 2], cover)
        assert np.allclose(out[0][0], [0, 1, 0], atol=1e-15)
        assert np.allclose(out[1][0], [0, 0.5, 0], atol=1e-15)

    def test_nonpositive_radius_rejected(self):
        with pytest.raises(KinematicsError):
            SphereCover([(Attachment(0), 0.0)])


class TestDampedPinvIK:
    def test_zero_velocity(self, planar3):
        qd = damped_pinv_ik(planar3, np.array([0.1, 0.2, 0.3]), np.zeros(2), Attachment(3, [0.4, 0, 0]), 0.1)
        assert np.array_equal(qd, np.zeros(3))

    def test_two_link_forward_substitution(self):
        chain = planar_chain([1.0, 1.0])
        a = Attachment(2, [1, 0, 0])
        q = np.array([0.0, np.pi / 2])
        v = np.array([0.0, 0.1])
        qd = damped_pinv_ik(chain, q, v, a, 0.0)
        assert np.allclose(point_jacobian(chain, q, a)[:2] @ qd, v, atol=1e-9)

    def test_full_rank_3d_exact(self, rng):
        chain = random_chain(rng, 6)
        a = Attachment(6, [0.1, 0, 0])
        q = rng.uniform(-2, 2, 6)
        v = rng.normal(size=3)
        qd = damped_pinv_ik(chain, q, v, a, 0.0)
        assert np.allclose(point_jacobian(chain, q, a) @ qd, v, atol=1e-9)

    def test_damping_shrinks_monotonically(self, planar3):
        q = np.array([0.3, 0.4, 0.5])
        a = Attachment(3, [0.4, 0, 0])
        v = np.array([0.2, -0.1])
        norms = [np.linalg.norm(damped_pinv_ik(planar3, q, v, a, lam)) for lam in (1, 10, 100, 1e3)]
        assert all(x > y for x, y in zip(norms, norms[1:]))
        J = point_jacobian(planar3, q, a)[:2]
        assert norms[-1] <= np.linalg.norm(J.T @ v) / 1e6 * 1.01

    def test_singular_without_damping(self):
        chain = planar_chain([1.0, 1.0])
        with pytest.raises(KinematicsError, match="damping"):
            damped_pinv_ik(chain, np.zeros(2), [0.1, 0.0], Attachment(2, [1, 0, 0]), 0.0)

    def test_singular_with_damping_is_finite(self):
        chain = planar_chain([1.0, 1.0])
        qd = damped_pinv_ik(chain, np.zeros(2), [0.1, 0.0], Attachment(2, [1, 0, 0]), 0.1)
        assert np.all(np.isfinite(qd))

    def test_bad_task_dimension(self, planar3):
        with pytest.raises(KinematicsError):
            damped_pinv_ik(planar3, np.zeros(3), [1, 2, 3, 4], Attachment(3), 0.1)

    def test_joint_permutation_equivariance(self, rng):
        # the same arm with its (independent, parallel) base axes listed in a
        # different order: a planar chain is permutation-symmetric only in the
        # Jacobian columns, so compare qdot against J with permuted columns
        chain = planar_chain([0.6, 0.5, 0.4])
        a = Attachment(3, [0.4, 0, 0])
        q = np.array([0.2, 0.7, -0.4])
        v = np.array([0.1, 0.3])
        J = point_jacobian(chain, q, a)[:2]
        perm = np.array([2, 0, 1])
        Jp = J[:, perm]
        lam = 0.05
        qd = damped_pinv_ik(chain, q, v, a, lam)
        qdp = Jp.T @ np.linalg.solve(Jp @ Jp.T + lam**2 * np.eye(2), v)
        assert np.allclose(qdp, qd[perm], atol=1e-14)


class TestIntegrate:
    def test_zero_command(self):
        s = JointState.at_rest([0.1, 0.2])
        assert np.array_equal(integrate(s, [0, 0], 0.02).q, s.q)

    def test_arithmetic(self):
        s = integrate(JointState.at_rest([0.0]), [1.0], 0.02)
        assert s.q[0] == pytest.approx(0.02, abs=1e-15)
        assert s.t == pytest.approx(0.02)
        assert s.qdot[0] == 1.0

    def test_two_half_steps(self):
        s = JointState.at_rest([0.3, -0.1])
        cmd = np.array([0.7, -1.3])
        one = integrate(s, cmd, 0.02)
        two = integrate(integrate(s, cmd, 0.01), cmd, 0.01)
        assert np.allclose(one.q, two.q, atol=1e-15)
        assert two.t == pytest.approx(one.t)

    def test_no_clamping(self):
        s = integrate(JointState.at_rest([3.0]), [100.0], 1.0)
        assert s.q[0] == 103.0

    def test_nonpositive_dt(self):
        with pytest.raises(KinematicsError):
            integrate(JointState.at_rest([0.0]), [1.0], 0.0)

    def test_plant_is_driftless(self, planar3):
        plant = KinematicPlant(planar3, JointState.at_rest(np.zeros(3)))
        assert np.array_equal(plant.drift(), np.zeros(3))
        plant.step([1.0, 0.0, -1.0], 0.5)
        assert np.array_equal(plant.state.q, [0.5, 0.0, -0.5])


class TestRigidTransforms:
    def test_composition_stays_orthonormal(self, rng):
        T = np.eye(4)
        for _ in range(10_000):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            T = T @ make_transform(rot_axis_angle(axis, rng.uniform(-np.pi, np.pi)),
                                   rng.uniform(-1, 1, 3))
        assert is_rigid(T, tol=1e-9)

    def test_joint_validation(self):
        with pytest.raises(KinematicsError):
            Joint([0, 0, 2])
        bad = np.eye(4)
        bad[0, 0] = 2
        with pytest.raises(KinematicsError):
            Joint([0, 0, 1], bad)

    def test_chain_limit_validation(self):
        with pytest.raises(KinematicsError):
            SerialChain([Joint([0, 0, 1])], [1.0], [0.0])
        with pytest.raises(KinematicsError):
            SerialChain([Joint([0, 0, 1])], [0.0, 0.0], [1.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3))
def test_planar_reach_never_exceeds_total_length(q):
    chain = planar_chain([0.6, 0.5, 0.4])
    p = forward_point(chain, np.array(q), Attachment(3, [0.4, 0, 0]))
    assert np.linalg.norm(p) <= 1.5 + 1e-12
    assert p[2] == 0.0
