import numpy as np
import pytest

from imm_bench.leg_dynamics import DynamicsTerms, contact_jacobian, default_leg, mass_matrix, pendulum, with_mismatch
from imm_bench.momentum_observers import (
    ContactMode,
    FoMbo,
    FrictionCone,
    InvalidMeasurementError,
    KfState,
    Mbko,
    NoiseConfig,
    ObserverInput,
    PmMbko,
    build_process_model,
    classify_by_cones,
    default_cones,
    fo_mbo_step,
    gm_measurement,
    kf_predict,
    kf_update,
    mode_measurement,
    pseudo_force_simplified,
    pseudo_wrench,
)


@pytest.fixture
def cfg():
    return NoiseConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def synthetic_input(t, p, tau_m):
    """Unit-mass, gravity-free tick whose foot Jacobian is the identity"""
    n = len(p)
    terms = DynamicsTerms(M=np.eye(n), C=np.zeros((n, n)), g=np.zeros(n), tau_f=np.zeros(n))
    return ObserverInput(
        t=t, qd=np.asarray(p, dtype=float), tau_m=np.asarray(tau_m, dtype=float), terms=terms,
        J=np.eye(3), Jdot=np.zeros((3, 3)), p_meas=np.asarray(p, dtype=float),
    )


def constant_force_inputs(tau_m, f_true, ticks, dt=1e-3):
    """Momentum of a unit-mass body pushed by tau_m plus a constant contact force"""
    tau_m = np.asarray(tau_m, dtype=float)
    drift = tau_m + np.asarray(f_true, dtype=float)
    return [synthetic_input(k * dt, k * dt * drift, tau_m) for k in range(ticks)]


class TestConfigTypes:
    """Test noise configuration and friction cones"""

    def test_defaults(self, cfg):
        """Test default noise parameters"""
        assert cfg.A_f == [-0.01, -0.01, -0.01]
        assert cfg.w_p == 0.0001
        assert cfg.w_f == 10.0
        assert cfg.v_p == 0.0001
        assert cfg.v_f_small == 0.001
        assert cfg.v_f_large == 200.0
        assert cfg.cone_noise_polarity == "small_inside"

    def test_positive_force_pole_rejected(self):
        """Test A_f entries must be negative"""
        with pytest.raises(ValueError):
            NoiseConfig(A_f=[0.01, -0.01, -0.01])

    def test_variance_ordering(self):
        """Test v_f_small must be below v_f_large"""
        with pytest.raises(ValueError):
            NoiseConfig(v_f_small=300.0)

    def test_cone_half_angle_range(self):
        """Test cone half angle must be in (0, pi/2)"""
        with pytest.raises(ValueError):
            FrictionCone(axis=[0.0, 0.0, 1.0], half_angle=2.0)

    def test_cone_membership(self):
        """Test cone membership by angle and magnitude"""
        cone = FrictionCone(axis=[0.0, 0.0, 1.0], half_angle=np.deg2rad(30.0), min_magnitude=5.0)
        assert cone.contains(np.array([0.0, 0.0, 50.0]))
        assert not cone.contains(np.array([50.0, 0.0, 5.0]))
        assert not cone.contains(np.array([0.0, 0.0, 4.0]))
        assert not cone.contains(np.zeros(3))

    def test_cone_classification(self):
        """Test collision wins where the default cones overlap"""
        cones = default_cones()
        assert classify_by_cones(np.array([0.0, 0.0, 40.0]), cones) == ContactMode.STANCE
        assert classify_by_cones(np.array([-30.0, 0.0, 0.0]), cones) == ContactMode.COLLISION
        assert classify_by_cones(np.array([-20.0, 0.0, 20.0]), cones) == ContactMode.COLLISION
        assert classify_by_cones(np.array([1.0, 0.0, 0.0]), cones) == ContactMode.SWING


class TestProcessModel:
    """Test per-mode process models"""

    def test_swing_decouples_force(self, cfg):
        """Test the force does not drive the momentum in swing"""
        J, _ = contact_jacobian(default_leg(), [0.1, 0.6, -1.3])
        A_d, _, _ = build_process_model(ContactMode.SWING, J, cfg, 1e-3)
        assert np.all(A_d[:3, 3:] == 0.0)

    def test_stance_coupling(self, cfg):
        """Test the stance coupling block equals J^T dt"""
        A_d, B_d, Q_d = build_process_model(ContactMode.STANCE, np.eye(3), cfg, 1e-3)
        np.testing.assert_allclose(A_d[:3, 3:], 1e-3 * np.eye(3))
        np.testing.assert_allclose(B_d[:3], 1e-3 * np.eye(3))
        np.testing.assert_allclose(np.diag(Q_d), [1e-7] * 3 + [1e-2] * 3)

    def test_small_step_limit(self, cfg):
        """Test A_d tends to I and B_d to 0 as dt shrinks"""
        A_d, B_d, _ = build_process_model(ContactMode.COLLISION, np.eye(3), cfg, 1e-9)
        assert np.linalg.norm(A_d - np.eye(6)) < 1e-8
        assert np.linalg.norm(B_d) < 1e-8

    def test_exact_discretization_close_to_euler(self, cfg):
        """Test the matrix-exponential model agrees with Euler to second order"""
        J, _ = contact_jacobian(default_leg(), [0.1, 0.6, -1.3])
        exact = NoiseConfig(exact_discretization=True)
        A_e, B_e, _ = build_process_model(ContactMode.STANCE, J, exact, 1e-3)
        A_d, B_d, _ = build_process_model(ContactMode.STANCE, J, cfg, 1e-3)
        assert np.max(np.abs(A_e - A_d)) < 1e-6
        assert np.max(np.abs(B_e - B_d)) < 1e-6
        np.testing.assert_allclose(np.diag(A_e)[3:], np.exp(-0.01 * 1e-3), rtol=1e-12)


class TestMeasurements:
    """Test momentum and force pseudo-measurements"""

    def test_momentum_at_rest(self):
        """Test measured momentum vanishes at rest"""
        np.testing.assert_allclose(gm_measurement(default_leg(), [0.1, 0.6, -1.3], np.zeros(3)), 0.0)

    def test_mismatched_model(self):
        """Test a 10% heavier pendulum model measures 10% more momentum"""
        truth = gm_measurement(pendulum(), [0.2], [1.0])
        heavier = gm_measurement(with_mismatch(pendulum(), 1.1), [0.2], [1.0])
        np.testing.assert_allclose(heavier, 1.1 * truth, rtol=1e-12)

    def test_pseudo_wrench_supports_weight(self):
        """Test a vertical prismatic leg at rest reports its own weight"""
        mass = 2.0
        weight = mass * 9.81
        J = np.array([[0.0], [0.0], [1.0]])
        f = pseudo_wrench(np.array([[mass]]), J, np.zeros((3, 1)), np.zeros(1), np.array([-weight]))
        np.testing.assert_allclose(f, [0.0, 0.0, weight], atol=1e-9)

    def test_pseudo_wrench_exact_recovery(self):
        """Test tau = -J^T f0 at rest recovers f0"""
        leg = default_leg()
        q = np.array([0.1, 0.6, -1.3])
        J, _ = contact_jacobian(leg, q)
        f0 = np.array([3.0, -2.0, 40.0])
        f = pseudo_wrench(mass_matrix(leg, q), J, np.zeros((3, 3)), np.zeros(3), -J.T @ f0)
        np.testing.assert_allclose(f, f0, atol=1e-9)

    def test_pseudo_wrench_constraint_residual(self, rng):
        """Test the pseudo wrench zeroes the foot acceleration for full-rank J"""
        leg = default_leg()
        for _ in range(20):
            q = rng.uniform(-1.0, 1.0, 3) + np.array([0.0, 0.6, -1.3])
            qd = rng.normal(0.0, 1.0, 3)
            tau = rng.normal(0.0, 3.0, 3)
            M = mass_matrix(leg, q)
            J, _ = contact_jacobian(leg, q)
            Jdot = rng.normal(0.0, 0.1, (3, 3))
            f = pseudo_wrench(M, J, Jdot, qd, tau)
            residual = J @ np.linalg.solve(M, tau + J.T @ f) + Jdot @ qd
            assert np.max(np.abs(residual)) < 1e-8

    def test_simplified_force(self):
        """Test the simplified pseudo force inverts J^T"""
        J, _ = contact_jacobian(default_leg(), [0.1, 0.6, -1.3])
        f0 = np.array([-12.0, 1.0, 30.0])
        np.testing.assert_allclose(pseudo_force_simplified(J, -J.T @ f0), f0, atol=1e-9)
        np.testing.assert_allclose(pseudo_force_simplified(J, np.zeros(3)), 0.0)

    def test_swing_measures_zero_force(self, cfg):
        """Test swing mode measures zero force with small noise"""
        y, R = mode_measurement(ContactMode.SWING, np.array([5.0, 1.0, 30.0]), default_cones(), cfg)
        np.testing.assert_array_equal(y, np.zeros(3))
        np.testing.assert_allclose(R, 0.001 * np.eye(3))

    def test_cone_noise_selection(self, cfg):
        """Test inside-cone forces get small noise and outside-cone forces large noise"""
        cones = {
            ContactMode.STANCE: FrictionCone(axis=[0.0, 0.0, 1.0], half_angle=np.deg2rad(30.0), min_magnitude=5.0),
            ContactMode.COLLISION: FrictionCone(axis=[-1.0, 0.0, 0.0], half_angle=np.deg2rad(60.0)),
        }
        y, R = mode_measurement(ContactMode.STANCE, np.array([0.0, 0.0, 50.0]), cones, cfg)
        np.testing.assert_allclose(y, [0.0, 0.0, 50.0])
        np.testing.assert_allclose(R, 0.001 * np.eye(3))
        _, R = mode_measurement(ContactMode.STANCE, np.array([50.0, 0.0, 5.0]), cones, cfg)
        np.testing.assert_allclose(R, 200.0 * np.eye(3))

    def test_inverted_polarity(self):
        """Test the large-inside polarity swaps the two variances"""
        cfg = NoiseConfig(cone_noise_polarity="large_inside")
        _, R = mode_measurement(ContactMode.STANCE, np.array([0.0, 0.0, 50.0]), default_cones(), cfg)
        np.testing.assert_allclose(R, 200.0 * np.eye(3))


class TestKalmanRecursion:
    """Test the generic predict and update steps"""

    def test_identity_prediction(self):
        """Test identity propagation leaves the state unchanged"""
        state = KfState(xhat=np.array([1.0, 2.0]), P=np.array([[2.0, 0.5], [0.5, 1.0]]))
        out = kf_predict(state, np.eye(2), np.zeros((2, 1)), np.zeros((2, 2)), np.zeros(1))
        np.testing.assert_array_equal(out.xhat, state.xhat)
        np.testing.assert_array_equal(out.P, state.P)

    def test_scalar_prediction(self):
        """Test scalar predict by direct substitution"""
        state = KfState(xhat=np.array([1.0]), P=np.array([[1.0]]))
        out = kf_predict(state, np.array([[2.0]]), np.zeros((1, 1)), np.array([[0.5]]), np.zeros(1))
        np.testing.assert_allclose(out.xhat, [2.0])
        np.testing.assert_allclose(out.P, [[4.5]])

    def test_prediction_matches_dense_arithmetic(self, rng):
        """Test predict on a random 6-state system against explicit arithmetic"""
        A = rng.normal(size=(6, 6))
        B = rng.normal(size=(6, 3))
        L = rng.normal(size=(6, 6))
        Q = L @ L.T
        L = rng.normal(size=(6, 6))
        state = KfState(xhat=rng.normal(size=6), P=L @ L.T)
        u = rng.normal(size=3)
        out = kf_predict(state, A, B, Q, u)
        x_ref = np.array([sum(A[i, j] * state.xhat[j] for j in range(6)) for i in range(6)]) + B @ u
        P_ref = np.einsum("ij,jk,lk->il", A, state.P, A) + Q
        np.testing.assert_allclose(out.xhat, x_ref, atol=1e-12)
        np.testing.assert_allclose(out.P, P_ref, atol=1e-10)

    def test_scalar_update(self):
        """Test scalar update by direct substitution"""
        state = KfState(xhat=np.array([0.0]), P=np.array([[1.0]]))
        out, innovation, S = kf_update(state, np.array([[1.0]]), np.array([[1.0]]), np.array([2.0]))
        np.testing.assert_allclose(out.xhat, [1.0])
        np.testing.assert_allclose(out.P, [[0.5]])
        np.testing.assert_allclose(innovation, [2.0])
        np.testing.assert_allclose(S, [[2.0]])

    def test_perfect_measurement_limit(self, rng):
        """Test a near-noiseless full measurement pins the state to y"""
        L = rng.normal(size=(4, 4))
        state = KfState(xhat=rng.normal(size=4), P=L @ L.T + np.eye(4))
        y = rng.normal(size=4)
        out, _, _ = kf_update(state, np.eye(4), 1e-12 * np.eye(4), y)
        np.testing.assert_allclose(out.xhat, y, atol=1e-6)

    def test_joseph_matches_standard_form(self, rng):
        """Test Joseph and (I - KC)P covariance forms agree"""
        L = rng.normal(size=(6, 6))
        P = L @ L.T + np.eye(6)
        C = rng.normal(size=(3, 6))
        R = np.diag(rng.uniform(0.5, 2.0, 3))
        state = KfState(xhat=rng.normal(size=6), P=P)
        out, _, S = kf_update(state, C, R, rng.normal(size=3))
        K = P @ C.T @ np.linalg.inv(S)
        standard = (np.eye(6) - K @ C) @ P
        np.testing.assert_allclose(out.P, standard, atol=1e-9)
        assert np.linalg.eigvalsh(out.P).min() >= -1e-9

    def test_non_finite_measurement(self):
        """Test NaN measurements raise an invalid-measurement error"""
        state = KfState(xhat=np.zeros(1), P=np.eye(1))
        with pytest.raises(InvalidMeasurementError):
            kf_update(state, np.eye(1), np.eye(1), np.array([np.nan]))

    def test_matches_conjugate_posterior(self):
        """Test a static scalar KF equals the closed-form Gaussian posterior"""
        rng = np.random.default_rng(3)
        m0, p0, r = 0.5, 4.0, 0.25
        ys = 1.3 + rng.normal(0.0, np.sqrt(r), 50)
        state = KfState(xhat=np.array([m0]), P=np.array([[p0]]))
        for k, y in enumerate(ys, start=1):
            state = kf_predict(state, np.eye(1), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1))
            state, _, _ = kf_update(state, np.eye(1), np.array([[r]]), np.array([y]))
            precision = 1.0 / p0 + k / r
            mean = (m0 / p0 + ys[:k].sum() / r) / precision
            assert abs(state.xhat[0] - mean) < 1e-9
            assert abs(state.P[0, 0] - 1.0 / precision) < 1e-9

    def test_covariance_stays_valid(self, rng):
        """Test P stays symmetric PSD over a long random sequence"""
        A, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        A = 0.99 * A
        B = rng.normal(size=(6, 3))
        Q = 0.01 * np.eye(6)
        C = rng.normal(size=(3, 6))
        R = 0.1 * np.eye(3)
        state = KfState(xhat=np.zeros(6), P=np.eye(6))
        for _ in range(10000):
            state = kf_predict(state, A, B, Q, rng.normal(size=3))
            state, _, _ = kf_update(state, C, R, rng.normal(size=3))
            assert np.max(np.abs(state.P - state.P.T)) < 1e-9
        assert np.linalg.eigvalsh(state.P).min() >= -1e-9

    def test_swing_filter_force_decays(self, cfg):
        """Test the swing filter pulls its force estimate toward zero"""
        A_d, B_d, Q_d = build_process_model(ContactMode.SWING, np.eye(3), cfg, 1e-3)
        y_f, R_f = mode_measurement(ContactMode.SWING, np.array([10.0, 0.0, 0.0]), default_cones(), cfg)
        C = np.eye(6)
        R = np.diag(np.concatenate([np.full(3, cfg.v_p), np.diag(R_f)]))
        state = KfState(xhat=np.array([0.0, 0.0, 0.0, 20.0, -5.0, 8.0]), P=np.eye(6))
        previous = np.linalg.norm(state.xhat[3:])
        for _ in range(20):
            state = kf_predict(state, A_d, B_d, Q_d, np.zeros(3))
            state, _, _ = kf_update(state, C, R, np.concatenate([np.zeros(3), y_f]))
            current = np.linalg.norm(state.xhat[3:])
            assert current <= previous
            previous = current


class TestBaselineObservers:
    """Test the FO-MBO, MBKO and PM-MBKO baselines"""

    def test_first_order_step_response(self):
        """Test the residual reaches 95% of a constant torque within 3/K_O"""
        gain, dt = 50.0, 1e-3
        tau_ext = np.array([1.0, 2.0, -1.0])
        inputs = constant_force_inputs([0.5, -0.2, 0.1], tau_ext, 80, dt)
        state = None
        reached = None
        for k, inp in enumerate(inputs):
            state, residual, _ = fo_mbo_step(state, inp, dt, gain)
            if reached is None and np.all(np.abs(residual - tau_ext) <= 0.05 * np.abs(tau_ext)):
                reached = k * dt
        assert reached is not None
        assert reached <= 3.0 / gain

    def test_first_order_silent_without_force(self):
        """Test the residual stays at zero without external torque"""
        observer = FoMbo(gain=50.0)
        for inp in constant_force_inputs([0.5, -0.2, 0.1], np.zeros(3), 200):
            estimate = observer.step(inp, 1e-3)
            assert np.max(np.abs(estimate.f_ext_hat)) < 1e-9

    def test_mbko_converges_to_constant_force(self):
        """Test MBKO recovers a constant contact force within 0.15 s"""
        f_true = np.array([4.0, -3.0, 30.0])
        observer = Mbko()
        estimate = None
        for inp in constant_force_inputs([0.0, 0.0, -30.0], f_true, 151):
            estimate = observer.step(inp, 1e-3)
        assert np.linalg.norm(estimate.f_ext_hat - f_true) < 2.0

    def test_pm_mbko_reduces_to_mbko(self):
        """Test PM-MBKO with a huge force variance matches MBKO"""
        inputs = constant_force_inputs([1.0, -2.0, 0.5], [3.0, 0.0, 10.0], 200)
        mbko = Mbko()
        pm_mbko = PmMbko(force_variance=1e15)
        for inp in inputs:
            a = mbko.step(inp, 1e-3)
            b = pm_mbko.step(inp, 1e-3)
            np.testing.assert_allclose(b.f_ext_hat, a.f_ext_hat, atol=1e-9)

    def test_reset(self):
        """Test reset clears observer state"""
        observer = PmMbko()
        observer.step(constant_force_inputs([0.0, 0.0, 0.0], np.zeros(3), 1)[0], 1e-3)
        assert observer.state is not None
        observer.reset()
        assert observer.state is None
