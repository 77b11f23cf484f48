import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.linalg import expm

from imm_bench.leg_dynamics import (
    DynamicsTerms,
    JointReading,
    LegModel,
    dynamics_terms,
    leg_state,
)

logger = logging.getLogger(__name__)

ILL_CONDITIONED = 1e8


class InvalidMeasurementError(ValueError):
    """Raised when a measurement vector contains NaN or inf"""


class ContactMode(IntEnum):
    SWING = 1
    STANCE = 2
    COLLISION = 3


class NoiseConfig(BaseModel):
    A_f: List[float] = Field(default_factory=lambda: [-0.01, -0.01, -0.01])
    w_p: float = 0.0001
    w_f: float = 10.0
    v_p: float = 0.0001
    v_f_small: float = 0.001
    v_f_large: float = 200.0
    cone_noise_polarity: Literal["small_inside", "large_inside"] = "small_inside"
    exact_discretization: bool = False

    @field_validator("A_f")
    @classmethod
    def check_force_dynamics(cls, value: List[float]) -> List[float]:
        if len(value) != 3 or any(a >= 0 for a in value):
            raise ValueError("A_f must hold 3 negative diagonal entries")
        return value

    @model_validator(mode="after")
    def check_variances(self) -> "NoiseConfig":
        for name in ("w_p", "w_f", "v_p", "v_f_small", "v_f_large"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.v_f_small >= self.v_f_large:
            raise ValueError("v_f_small must be smaller than v_f_large")
        return self


class FrictionCone(BaseModel):
    axis: List[float]
    half_angle: float
    min_magnitude: float = 5.0

    @model_validator(mode="after")
    def check_geometry(self) -> "FrictionCone":
        if len(self.axis) != 3 or abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("cone axis must be a unit 3-vector")
        if not 0.0 < self.half_angle < np.pi / 2:
            raise ValueError("cone half_angle must lie in (0, pi/2)")
        if self.min_magnitude < 0:
            raise ValueError("cone min_magnitude must be nonnegative")
        return self

    def contains(self, force: np.ndarray) -> bool:
        magnitude = float(np.linalg.norm(force))
        if magnitude == 0.0 or magnitude < self.min_magnitude:
            return False
        cos_angle = float(np.dot(force, self.axis)) / magnitude
        return cos_angle >= np.cos(self.half_angle)


def default_cones(heading: Sequence[float] = (1.0, 0.0, 0.0)) -> Dict[ContactMode, FrictionCone]:
    """
    Vertical cone for stance, cone against the walking direction for collision
    """
    h = np.asarray(heading, dtype=float)
    h = h / np.linalg.norm(h)
    return {
        ContactMode.STANCE: FrictionCone(axis=[0.0, 0.0, 1.0], half_angle=np.deg2rad(40.0), min_magnitude=5.0),
        ContactMode.COLLISION: FrictionCone(axis=(-h).tolist(), half_angle=np.deg2rad(60.0), min_magnitude=5.0),
    }


def classify_by_cones(force: np.ndarray, cones: Dict[ContactMode, FrictionCone]) -> ContactMode:
    """
    Contact mode implied by which cone a force estimate falls in; collision wins ties
    """
    if cones[ContactMode.COLLISION].contains(force):
        return ContactMode.COLLISION
    if cones[ContactMode.STANCE].contains(force):
        return ContactMode.STANCE
    return ContactMode.SWING


@dataclass
class KfState:
    xhat: np.ndarray
    P: np.ndarray


def initial_kf_state(p0: np.ndarray, p_var: float = 0.01, f_var: float = 100.0) -> KfState:
    n = len(p0)
    return KfState(
        xhat=np.concatenate([np.asarray(p0, dtype=float), np.zeros(3)]),
        P=np.diag(np.concatenate([np.full(n, p_var), np.full(3, f_var)])),
    )


def build_process_model(
    mode: ContactMode, J: np.ndarray, cfg: NoiseConfig, dt: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Discrete momentum/force process model for one contact mode.

    The force only drives the momentum in stance and collision.
    """
    n = J.shape[1]
    size = n + 3
    A = np.zeros((size, size))
    if mode != ContactMode.SWING:
        A[:n, n:] = J.T
    A[n:, n:] = np.diag(cfg.A_f)
    B = np.zeros((size, n))
    B[:n, :] = np.eye(n)

    if cfg.exact_discretization:
        augmented = np.zeros((size + n, size + n))
        augmented[:size, :size] = A
        augmented[:size, size:] = B
        phi = expm(augmented * dt)
        A_d = phi[:size, :size]
        B_d = phi[:size, size:]
    else:
        A_d = np.eye(size) + A * dt
        B_d = B * dt
    Q_d = np.diag(np.concatenate([np.full(n, cfg.w_p), np.full(3, cfg.w_f)])) * dt
    return A_d, B_d, Q_d


def gm_measurement(model_hat: LegModel, q, qd) -> np.ndarray:
    """
    Momentum measured through the estimator's own mass model
    """
    return dynamics_terms(model_hat, q, qd).M @ np.asarray(qd, dtype=float)


def pseudo_wrench(M: np.ndarray, J: np.ndarray, Jdot: np.ndarray, qd: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """
    Contact force that keeps the foot still given tau = tau_m - tau_f - g
    """
    solved = np.linalg.solve(M, np.column_stack([J.T, tau]))
    operational = J @ solved[:, :-1]
    rhs = J @ solved[:, -1] + Jdot @ qd
    eigenvalues = np.linalg.eigvalsh(operational)
    condition = eigenvalues[-1] / eigenvalues[0] if eigenvalues[0] > 0 else np.inf
    if condition > ILL_CONDITIONED:
        logger.warning(f"Ill-conditioned contact inertia (cond={condition:.3e})")
        return -np.linalg.pinv(operational) @ rhs
    return -np.linalg.solve(operational, rhs)


def pseudo_force_simplified(J: np.ndarray, tau_m: np.ndarray) -> np.ndarray:
    return -np.linalg.pinv(J.T) @ tau_m


def mode_measurement(
    mode: ContactMode,
    f_pse: np.ndarray,
    cones: Dict[ContactMode, FrictionCone],
    cfg: NoiseConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Force pseudo-measurement and its noise for one contact mode
    """
    if mode == ContactMode.SWING:
        return np.zeros(3), cfg.v_f_small * np.eye(3)
    inside = cones[mode].contains(f_pse)
    if cfg.cone_noise_polarity == "large_inside":
        inside = not inside
    variance = cfg.v_f_small if inside else cfg.v_f_large
    return np.asarray(f_pse, dtype=float).copy(), variance * np.eye(3)


def kf_predict(state: KfState, A_d: np.ndarray, B_d: np.ndarray, Q_d: np.ndarray, u: np.ndarray) -> KfState:
    xhat = A_d @ state.xhat + B_d @ u
    P = A_d @ state.P @ A_d.T + Q_d
    return KfState(xhat=xhat, P=0.5 * (P + P.T))


def kf_update(state: KfState, C: np.ndarray, R: np.ndarray, y: np.ndarray) -> Tuple[KfState, np.ndarray, np.ndarray]:
    """
    Kalman update with the Joseph-form covariance; returns the innovation and its covariance
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InvalidMeasurementError(f"Measurement contains non-finite entries: {y}")
    innovation = y - C @ state.xhat
    S = C @ state.P @ C.T + R
    S = 0.5 * (S + S.T)
    K = np.linalg.solve(S, C @ state.P).T
    xhat = state.xhat + K @ innovation
    I_KC = np.eye(len(state.xhat)) - K @ C
    P = I_KC @ state.P @ I_KC.T + K @ R @ K.T
    return KfState(xhat=xhat, P=0.5 * (P + P.T)), innovation, S


@dataclass
class ObserverInput:
    """
    One tick of sensor data plus the model terms every observer needs
    """

    t: float
    qd: np.ndarray
    tau_m: np.ndarray
    terms: DynamicsTerms
    J: np.ndarray
    Jdot: np.ndarray
    p_meas: np.ndarray

    @property
    def u(self) -> np.ndarray:
        return self.tau_m - self.terms.tau_f + self.terms.C.T @ self.qd - self.terms.g

    @property
    def tau(self) -> np.ndarray:
        return self.tau_m - self.terms.tau_f - self.terms.g


def prepare_input(model_hat: LegModel, reading: JointReading) -> ObserverInput:
    terms, foot = leg_state(model_hat, reading.q, reading.qd)
    qd = np.asarray(reading.qd, dtype=float)
    return ObserverInput(
        t=reading.t,
        qd=qd,
        tau_m=np.asarray(reading.tau_m, dtype=float),
        terms=terms,
        J=foot.J,
        Jdot=foot.Jdot,
        p_meas=terms.M @ qd,
    )


@dataclass
class ObserverEstimate:
    t: float
    f_ext_hat: np.ndarray
    p_hat: np.ndarray


@dataclass
class FoMboState:
    p0: np.ndarray
    integral: np.ndarray
    residual: np.ndarray


def fo_mbo_step(
    state: Optional[FoMboState],
    inp: ObserverInput,
    dt: float,
    gain: float,
    previous: Optional[ObserverInput] = None,
) -> Tuple[FoMboState, np.ndarray, np.ndarray]:
    """
    First-order momentum observer. Returns the new state, the external joint
    torque estimate and the foot force mapped through (J^T)^+.

    The integral advances with the input of the previous tick, which is the
    input that produced the current momentum.
    """
    if state is None:
        n = len(inp.p_meas)
        state = FoMboState(p0=inp.p_meas.copy(), integral=np.zeros(n), residual=np.zeros(n))
    else:
        source = previous if previous is not None else inp
        integral = state.integral + (source.u + state.residual) * dt
        residual = gain * (inp.p_meas - state.p0 - integral)
        state = FoMboState(p0=state.p0, integral=integral, residual=residual)
    force = np.linalg.pinv(inp.J.T) @ state.residual
    return state, state.residual.copy(), force


def mbko_step(
    state: Optional[KfState],
    inp: ObserverInput,
    cfg: NoiseConfig,
    dt: float,
    P0: Optional[np.ndarray] = None,
    previous: Optional[ObserverInput] = None,
) -> Tuple[KfState, np.ndarray]:
    """
    Single Kalman filter on the stance process model with a momentum-only measurement.
    A missing state is initialised from the reading without a predict or update.
    """
    n = len(inp.p_meas)
    if state is None:
        state = _first_state(inp, P0)
        return state, state.xhat[n:].copy()
    source = previous if previous is not None else inp
    A_d, B_d, Q_d = build_process_model(ContactMode.STANCE, source.J, cfg, dt)
    state = kf_predict(state, A_d, B_d, Q_d, source.u)
    C = np.hstack([np.eye(n), np.zeros((n, 3))])
    state, _, _ = kf_update(state, C, cfg.v_p * np.eye(n), inp.p_meas)
    return state, state.xhat[n:].copy()


def pm_mbko_step(
    state: Optional[KfState],
    inp: ObserverInput,
    cfg: NoiseConfig,
    dt: float,
    force_variance: float = 1.0,
    P0: Optional[np.ndarray] = None,
    previous: Optional[ObserverInput] = None,
) -> Tuple[KfState, np.ndarray]:
    """
    Stance-model Kalman filter that also measures the force through the
    zero-velocity pseudo-force at every tick
    """
    n = len(inp.p_meas)
    if state is None:
        state = _first_state(inp, P0)
        return state, state.xhat[n:].copy()
    source = previous if previous is not None else inp
    A_d, B_d, Q_d = build_process_model(ContactMode.STANCE, source.J, cfg, dt)
    state = kf_predict(state, A_d, B_d, Q_d, source.u)
    y = np.concatenate([inp.p_meas, pseudo_force_simplified(inp.J, inp.tau_m)])
    R = np.diag(np.concatenate([np.full(n, cfg.v_p), np.full(3, force_variance)]))
    state, _, _ = kf_update(state, np.eye(n + 3), R, y)
    return state, state.xhat[n:].copy()


def _first_state(inp: ObserverInput, P0: Optional[np.ndarray]) -> KfState:
    state = initial_kf_state(inp.p_meas)
    if P0 is not None:
        state.P = np.asarray(P0, dtype=float).copy()
    return state


class FoMbo:
    """First-order momentum observer with a persistent state"""

    def __init__(self, gain: float = 50.0):
        self.gain = gain
        self.state: Optional[FoMboState] = None
        self._previous: Optional[ObserverInput] = None

    def reset(self):
        self.state = None
        self._previous = None

    def step(self, inp: ObserverInput, dt: float) -> ObserverEstimate:
        self.state, _, force = fo_mbo_step(self.state, inp, dt, self.gain, self._previous)
        self._previous = inp
        return ObserverEstimate(t=inp.t, f_ext_hat=force, p_hat=inp.p_meas.copy())


class _MomentumKalman:
    """Shared state handling of the single-filter Kalman observers"""

    def __init__(
        self,
        cfg: Optional[NoiseConfig] = None,
        P0: Optional[np.ndarray] = None,
        p0_variance: float = 0.01,
        f0_variance: float = 100.0,
    ):
        self.cfg = cfg or NoiseConfig()
        self.P0 = P0
        self.p0_variance = p0_variance
        self.f0_variance = f0_variance
        self.state: Optional[KfState] = None
        self._previous: Optional[ObserverInput] = None

    def reset(self):
        self.state = None
        self._previous = None

    def _initial_covariance(self, inp: ObserverInput) -> Optional[np.ndarray]:
        if self.state is not None:
            return None
        if self.P0 is not None:
            return self.P0
        n = len(inp.p_meas)
        return np.diag(np.concatenate([np.full(n, self.p0_variance), np.full(3, self.f0_variance)]))


class Mbko(_MomentumKalman):
    """Momentum Kalman observer"""

    def step(self, inp: ObserverInput, dt: float) -> ObserverEstimate:
        P0 = self._initial_covariance(inp)
        self.state, force = mbko_step(self.state, inp, self.cfg, dt, P0, self._previous)
        self._previous = inp
        return ObserverEstimate(t=inp.t, f_ext_hat=force, p_hat=self.state.xhat[: len(inp.p_meas)].copy())


class PmMbko(_MomentumKalman):
    """Momentum Kalman observer with the simplified pseudo-force measurement"""

    def __init__(self, cfg: Optional[NoiseConfig] = None, force_variance: float = 1.0, **kwargs):
        super().__init__(cfg, **kwargs)
        self.force_variance = force_variance

    def step(self, inp: ObserverInput, dt: float) -> ObserverEstimate:
        P0 = self._initial_covariance(inp)
        self.state, force = pm_mbko_step(self.state, inp, self.cfg, dt, self.force_variance, P0, self._previous)
        self._previous = inp
        return ObserverEstimate(t=inp.t, f_ext_hat=force, p_hat=self.state.xhat[: len(inp.p_meas)].copy())
