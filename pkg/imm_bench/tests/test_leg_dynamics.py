import numpy as np
import pytest
from unittest.mock import patch

from imm_bench.leg_dynamics import (
    InvalidArgumentError,
    LegModel,
    SingularDynamicsError,
    contact_jacobian,
    default_leg,
    dynamics_terms,
    forward_dynamics,
    friction_torque,
    generalized_momentum,
    gravity_torque,
    inverse_dynamics,
    jacobian_dot,
    kinetic_energy,
    leg_state,
    mass_matrix,
    mass_matrix_partials,
    pendulum,
    potential_energy,
    with_mismatch,
)


@pytest.fixture
def leg():
    return default_leg()


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def random_state(rng, n=3):
    return rng.uniform(-1.5, 1.5, n), rng.uniform(-3.0, 3.0, n)


class TestLegModel:
    """Test model construction and validation"""

    def test_default_leg_dimensions(self, leg):
        """Test the default leg is a 3-DoF chain"""
        assert leg.n_dof == 3
        assert leg.link_masses == [0.6, 1.0, 0.2]
        assert leg.link_lengths == [0.08, 0.21, 0.21]

    def test_negative_mass_rejected(self, leg):
        """Test non-positive masses fail validation"""
        data = leg.model_dump()
        data["link_masses"] = [0.6, -1.0, 0.2]
        with pytest.raises(ValueError):
            LegModel(**data)

    def test_non_unit_axis_rejected(self, leg):
        """Test joint axes must be unit vectors"""
        data = leg.model_dump()
        data["joint_axes"][0] = [1.0, 1.0, 0.0]
        with pytest.raises(ValueError):
            LegModel(**data)

    def test_wrong_list_length_rejected(self, leg):
        """Test per-joint lists must match n_dof"""
        data = leg.model_dump()
        data["link_lengths"] = [0.08, 0.21]
        with pytest.raises(ValueError):
            LegModel(**data)

    def test_default_friction_is_zero(self, leg):
        """Test a model built without friction lists has zero friction torque"""
        assert leg.viscous_friction == [0.0, 0.0, 0.0]
        assert leg.coulomb_friction == [0.0, 0.0, 0.0]
        np.testing.assert_array_equal(friction_torque(leg, np.zeros(3)), np.zeros(3))
        np.testing.assert_array_equal(friction_torque(leg, [1.0, -2.0, 0.5]), np.zeros(3))

    def test_default_model_dynamics_are_finite(self):
        """Test forward dynamics of the default leg and the pendulum are finite"""
        leg = default_leg()
        qdd = forward_dynamics(leg, [0.1, 0.6, -1.3], [0.3, -0.2, 0.4], np.zeros(3), np.zeros(3))
        assert np.all(np.isfinite(qdd))
        qdd = forward_dynamics(pendulum(), [0.3], [0.0], [0.0], np.zeros(3))
        assert np.all(np.isfinite(qdd))

    def test_json_round_trip(self, leg):
        """Test a model reloaded from JSON gives the same mass matrix"""
        reloaded = LegModel.model_validate_json(leg.model_dump_json())
        q = np.array([0.1, 0.6, -1.3])
        np.testing.assert_allclose(mass_matrix(reloaded, q), mass_matrix(leg, q), atol=1e-14)


class TestDynamicsTerms:
    """Test mass, Coriolis, gravity and friction terms"""

    def test_pendulum_mass_is_ml2(self):
        """Test a point-mass pendulum has M = m l^2 at any angle"""
        model = pendulum(mass=1.0, length=1.0)
        for q in (0.0, 0.7, -2.1):
            terms = dynamics_terms(model, [q], [0.0])
            np.testing.assert_allclose(terms.M, [[1.0]], atol=1e-12)

    def test_rest_has_no_velocity_terms(self, leg):
        """Test C qd and tau_f vanish at rest"""
        data = leg.model_dump()
        data["viscous_friction"] = [0.1, 0.1, 0.1]
        data["coulomb_friction"] = [0.5, 0.5, 0.5]
        model = LegModel(**data)
        terms = dynamics_terms(model, [0.1, 0.6, -1.3], np.zeros(3))
        np.testing.assert_allclose(terms.C @ np.zeros(3), 0.0)
        np.testing.assert_allclose(terms.tau_f, 0.0)

    def test_mass_matrix_is_kinetic_energy_hessian(self, leg):
        """Test M equals the finite-difference Hessian of the kinetic energy"""
        q = np.array([0.1, 0.6, -1.3])
        eps = 1e-3
        n = leg.n_dof
        hessian = np.zeros((n, n))
        eye = np.eye(n)
        for i in range(n):
            for j in range(n):
                a, b = eye[i] * eps, eye[j] * eps
                hessian[i, j] = (
                    kinetic_energy(leg, q, a + b)
                    - kinetic_energy(leg, q, a - b)
                    - kinetic_energy(leg, q, -a + b)
                    + kinetic_energy(leg, q, -a - b)
                ) / (4 * eps * eps)
        np.testing.assert_allclose(mass_matrix(leg, q), hessian, atol=1e-6)

    def test_composite_body_matches_jacobian_assembly(self, leg, rng):
        """Test CRBA agrees with the Jacobian-based mass matrix"""
        for _ in range(20):
            q, _ = random_state(rng)
            M_jac, _ = mass_matrix_partials(leg, q)
            np.testing.assert_allclose(mass_matrix(leg, q), M_jac, atol=1e-10)

    def test_mass_matrix_symmetric_positive_definite(self, leg, rng):
        """Test M is symmetric and positive definite at random configurations"""
        for _ in range(100):
            q, _ = random_state(rng)
            M = mass_matrix(leg, q)
            assert np.max(np.abs(M - M.T)) < 1e-10
            assert np.linalg.eigvalsh(M).min() > 0.0

    def test_skew_symmetry_property(self, leg, rng):
        """Test dM/dt - C - C^T vanishes with dM/dt from central differences"""
        eps = 1e-6
        for _ in range(1000):
            q, qd = random_state(rng)
            M_dot = (mass_matrix(leg, q + eps * qd) - mass_matrix(leg, q - eps * qd)) / (2 * eps)
            C = dynamics_terms(leg, q, qd).C
            assert np.linalg.norm(M_dot - C - C.T, "fro") < 1e-5

    def test_coriolis_matches_newton_euler_bias(self, leg, rng):
        """Test C qd + g equals the recursive Newton-Euler bias torque"""
        for _ in range(50):
            q, qd = random_state(rng)
            terms = dynamics_terms(leg, q, qd)
            bias = inverse_dynamics(leg, q, qd, np.zeros(3))
            np.testing.assert_allclose(terms.C @ qd + terms.g, bias, atol=1e-10)

    def test_mass_matrix_partials_central_difference(self, leg, rng):
        """Test dM/dq_k matches central differences of M"""
        eps = 1e-6
        for _ in range(20):
            q, _ = random_state(rng)
            _, dM = mass_matrix_partials(leg, q)
            for k in range(3):
                step = eps * np.eye(3)[k]
                expected = (mass_matrix(leg, q + step) - mass_matrix(leg, q - step)) / (2 * eps)
                np.testing.assert_allclose(dM[k], expected, atol=1e-6)

    def test_leg_state_matches_separate_calls(self, leg, rng):
        """Test the single-pass terms agree with the per-quantity functions"""
        q, qd = random_state(rng)
        terms, foot = leg_state(leg, q, qd)
        np.testing.assert_allclose(terms.M, mass_matrix(leg, q), atol=1e-12)
        np.testing.assert_allclose(terms.g, gravity_torque(leg, q), atol=1e-12)
        J, position = contact_jacobian(leg, q)
        np.testing.assert_allclose(foot.J, J, atol=1e-14)
        np.testing.assert_allclose(foot.position, position, atol=1e-14)
        np.testing.assert_allclose(foot.Jdot, jacobian_dot(leg, q, qd), atol=1e-14)

    def test_non_finite_state_rejected(self, leg):
        """Test NaN joint positions raise an invalid-argument error"""
        with pytest.raises(InvalidArgumentError):
            dynamics_terms(leg, [np.nan, 0.0, 0.0], np.zeros(3))

    def test_wrong_shape_rejected(self, leg):
        """Test a state of the wrong length raises an invalid-argument error"""
        with pytest.raises(InvalidArgumentError):
            dynamics_terms(leg, [0.0, 0.0], [0.0, 0.0])


class TestKinematics:
    """Test foot Jacobian and its time derivative"""

    def test_pendulum_tip_velocity(self):
        """Test the pendulum Jacobian against a finite difference at q = 0"""
        model = pendulum()
        J, foot = contact_jacobian(model, [0.0])
        np.testing.assert_allclose(foot, [1.0, 0.0, 0.0], atol=1e-12)
        eps = 1e-6
        _, ahead = contact_jacobian(model, [eps])
        _, behind = contact_jacobian(model, [-eps])
        np.testing.assert_allclose(J[:, 0], (ahead - behind) / (2 * eps), atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(J[:, 0]), 1.0, atol=1e-12)

    def test_zero_velocity_maps_to_zero(self, leg, rng):
        """Test J maps zero joint velocity to zero foot velocity"""
        q, _ = random_state(rng)
        J, _ = contact_jacobian(leg, q)
        np.testing.assert_allclose(J @ np.zeros(3), 0.0)

    def test_jacobian_central_difference(self, leg, rng):
        """Test J qd matches the central difference of the foot position"""
        eps = 1e-6
        for _ in range(50):
            q, qd = random_state(rng)
            J, _ = contact_jacobian(leg, q)
            _, ahead = contact_jacobian(leg, q + eps * qd)
            _, behind = contact_jacobian(leg, q - eps * qd)
            np.testing.assert_allclose(J @ qd, (ahead - behind) / (2 * eps), atol=1e-5)

    def test_jacobian_dot_at_rest(self, leg):
        """Test Jdot vanishes at zero velocity"""
        np.testing.assert_allclose(jacobian_dot(leg, [0.1, 0.6, -1.3], np.zeros(3)), 0.0)

    def test_jacobian_dot_central_difference(self, leg, rng):
        """Test Jdot matches the central difference of J along qd"""
        eps = 1e-6
        for _ in range(50):
            q, qd = random_state(rng)
            J_ahead, _ = contact_jacobian(leg, q + eps * qd)
            J_behind, _ = contact_jacobian(leg, q - eps * qd)
            np.testing.assert_allclose(
                jacobian_dot(leg, q, qd), (J_ahead - J_behind) / (2 * eps), atol=1e-5
            )


class TestForwardDynamics:
    """Test forward dynamics and the equation-of-motion residual"""

    def test_static_equilibrium(self, leg):
        """Test gravity-compensating torque holds the leg still"""
        q = np.array([0.1, 0.6, -1.3])
        qdd = forward_dynamics(leg, q, np.zeros(3), gravity_torque(leg, q), np.zeros(3))
        np.testing.assert_allclose(qdd, 0.0, atol=1e-9)

    def test_free_fall_from_rest(self, leg):
        """Test an unactuated leg at rest accelerates with -M^-1 g"""
        q = np.array([0.1, 0.6, -1.3])
        terms = dynamics_terms(leg, q, np.zeros(3))
        qdd = forward_dynamics(leg, q, np.zeros(3), np.zeros(3), np.zeros(3))
        np.testing.assert_allclose(qdd, -np.linalg.solve(terms.M, terms.g), atol=1e-9)

    def test_residual_of_equation_of_motion(self, leg, rng):
        """Test M qdd + C qd + g + tau_f = tau_m + J^T f for random inputs"""
        data = leg.model_dump()
        data["viscous_friction"] = [0.05, 0.05, 0.05]
        data["coulomb_friction"] = [0.2, 0.2, 0.2]
        model = LegModel(**data)
        for _ in range(50):
            q, qd = random_state(rng)
            tau_m = rng.normal(0.0, 5.0, 3)
            f_ext = rng.normal(0.0, 20.0, 3)
            qdd = forward_dynamics(model, q, qd, tau_m, f_ext)
            terms = dynamics_terms(model, q, qd)
            J, _ = contact_jacobian(model, q)
            residual = terms.M @ qdd + terms.C @ qd + terms.g + terms.tau_f - tau_m - J.T @ f_ext
            assert np.max(np.abs(residual)) < 1e-9

    def test_singular_mass_matrix(self, leg):
        """Test a factorization failure surfaces as a singular-dynamics error"""
        with patch("imm_bench.leg_dynamics.mass_matrix", return_value=np.zeros((3, 3))):
            with pytest.raises(SingularDynamicsError):
                forward_dynamics(leg, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))

    def test_pendulum_energy_drift(self):
        """Test an unforced pendulum conserves energy under semi-implicit Euler"""
        model = pendulum()
        q = np.array([np.pi / 2 + 0.5])
        qd = np.zeros(1)
        dt = 1e-3
        energy0 = kinetic_energy(model, q, qd) + potential_energy(model, q)
        worst = 0.0
        for _ in range(1000):
            qdd = forward_dynamics(model, q, qd, np.zeros(1), np.zeros(3))
            qd = qd + dt * qdd
            q = q + dt * qd
            energy = kinetic_energy(model, q, qd) + potential_energy(model, q)
            worst = max(worst, abs(energy - energy0))
        assert worst / abs(energy0) < 1e-3


class TestGeneralizedMomentum:
    """Test generalized momentum"""

    def test_zero_velocity(self, leg):
        """Test p vanishes at rest"""
        np.testing.assert_allclose(generalized_momentum(leg, [0.1, 0.6, -1.3], np.zeros(3)), 0.0)

    def test_pendulum_scalar(self):
        """Test p = m l^2 qd for the pendulum"""
        np.testing.assert_allclose(generalized_momentum(pendulum(), [0.3], [2.0]), [2.0], atol=1e-12)

    def test_linear_in_velocity(self, leg, rng):
        """Test doubling qd doubles p exactly"""
        q, qd = random_state(rng)
        np.testing.assert_array_equal(
            generalized_momentum(leg, q, 2.0 * qd), 2.0 * generalized_momentum(leg, q, qd)
        )

    def test_mass_mismatch_scales_momentum(self):
        """Test a 10% heavier pendulum reports 10% more momentum"""
        truth = pendulum()
        heavier = with_mismatch(truth, 1.1)
        np.testing.assert_allclose(
            generalized_momentum(heavier, [0.4], [1.5]),
            1.1 * generalized_momentum(truth, [0.4], [1.5]),
            rtol=1e-12,
        )
