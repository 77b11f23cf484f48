import logging
from dataclasses import dataclass
from typing import List, Optional, Protocol, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.optimize import least_squares

from imm_bench.leg_dynamics import (
    InvalidArgumentError,
    JointReading,
    LegModel,
    contact_jacobian,
    forward_dynamics,
    foot_kinematics,
    gravity_torque,
)
from imm_bench.momentum_observers import ContactMode

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3


class SimulationDivergedError(RuntimeError):
    def __init__(self, tick: int, message: str = ""):
        self.tick = tick
        super().__init__(message or f"Simulation diverged at tick {tick}")


class GaitSchedule(BaseModel):
    """Single-leg gait: every cycle starts with swing, duty_factor is the stance fraction"""

    period: float = 0.4
    duty_factor: float = 0.5

    @field_validator("period")
    @classmethod
    def check_period(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("period must be positive")
        return value

    @field_validator("duty_factor")
    @classmethod
    def check_duty(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("duty_factor must lie in (0, 1)")
        return value

    @property
    def stance_duration(self) -> float:
        return self.period * self.duty_factor

    @property
    def swing_duration(self) -> float:
        return self.period - self.stance_duration


class SwingReference(BaseModel):
    step_length: float = 0.1
    step_height: float = 0.08
    speed: float = 0.5
    press_depth: float = 0.02
    nominal_foot: List[float] = Field(default_factory=lambda: [0.0, 0.08, 0.0])


class GroundModel(BaseModel):
    """Penalty ground. With ``treadmill`` set the surface moves backward at the walking speed."""

    height: float = 0.0
    stiffness: float = 30000.0
    damping: float = 100.0
    friction: float = 0.8
    tangential_damping: float = 50.0
    treadmill: bool = True

    @field_validator("stiffness", "damping", "friction", "tangential_damping")
    @classmethod
    def check_non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("contact parameters must be non-negative")
        return value


class Obstacle(BaseModel):
    """Vertical plane at x = position, from the ground up to ``height``, present during [t_on, t_off)"""

    position: float = 0.02
    height: float = 0.15
    stiffness: float = 10000.0
    damping: float = 120.0
    t_on: float = 0.0
    t_off: Optional[float] = None

    @field_validator("stiffness", "damping", "height")
    @classmethod
    def check_non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("obstacle parameters must be non-negative")
        return value

    def active(self, t: float) -> bool:
        return t >= self.t_on and (self.t_off is None or t < self.t_off)


class SensorNoise(BaseModel):
    q: float = 1e-4
    qd: float = 1e-3
    tau_m: float = 0.05

    @field_validator("q", "qd", "tau_m")
    @classmethod
    def check_non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("noise standard deviations must be non-negative")
        return value

    def draw(self, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """One tick of noise, drawn in the order q, qd, tau_m"""
        return rng.normal(0.0, self.q, n), rng.normal(0.0, self.qd, n), rng.normal(0.0, self.tau_m, n)


class ModelMismatch(BaseModel):
    mass_scale: float = 1.0

    @field_validator("mass_scale")
    @classmethod
    def check_scale(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("mass_scale must be positive")
        return value


class PdGains(BaseModel):
    kp: List[float] = Field(default_factory=lambda: [2000.0, 2000.0, 2000.0])
    kd: List[float] = Field(default_factory=lambda: [40.0, 40.0, 40.0])
    max_torque: float = 50.0


class Scenario(BaseModel):
    duration: float = 2.0
    dt: float = 0.001
    gait: GaitSchedule = Field(default_factory=GaitSchedule)
    reference: SwingReference = Field(default_factory=SwingReference)
    ground: GroundModel = Field(default_factory=GroundModel)
    obstacles: List[Obstacle] = Field(default_factory=list)
    sensor_noise: SensorNoise = Field(default_factory=SensorNoise)
    model_mismatch: ModelMismatch = Field(default_factory=ModelMismatch)
    gains: PdGains = Field(default_factory=PdGains)
    seed: int = 0
    heading: List[float] = Field(default_factory=lambda: [1.0, 0.0, 0.0])
    initial_q: Optional[List[float]] = None
    initial_qd: Optional[List[float]] = None
    ik_guess: List[float] = Field(default_factory=lambda: [0.0, 0.6, -1.3])

    @model_validator(mode="after")
    def check_timing(self) -> "Scenario":
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.duration < self.dt:
            raise ValueError("duration must cover at least one tick")
        return self

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def belt_velocity(self) -> np.ndarray:
        if not self.ground.treadmill:
            return np.zeros(3)
        return -self.reference.speed * np.asarray(self.heading, dtype=float)


@dataclass
class FootTarget:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    planned_mode: ContactMode


@dataclass
class ControlCommand:
    tau: np.ndarray
    foot_acc: np.ndarray


class Controller(Protocol):
    def reset(self) -> None: ...

    def command(self, t: float, q: np.ndarray, qd: np.ndarray) -> ControlCommand: ...

    def observe(self, reading: JointReading) -> None: ...


@dataclass
class ScenarioTrace:
    """
    Per-tick ground truth plus the noisy sensor stream. Arrays are indexed by tick.
    """

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    tau_m: np.ndarray
    f_ext: np.ndarray
    mode: np.ndarray
    foot_pos: np.ndarray
    foot_vel: np.ndarray
    q_meas: np.ndarray
    qd_meas: np.ndarray
    tau_meas: np.ndarray
    acc_cmd: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def readings(self) -> List[JointReading]:
        """Noisy stream as the estimators see it"""
        return [
            JointReading(t=float(self.t[k]), q=self.q_meas[k], qd=self.qd_meas[k], tau_m=self.tau_meas[k])
            for k in range(len(self))
        ]

    def modes(self) -> List[ContactMode]:
        return [ContactMode(int(m)) for m in self.mode]


def gait_phase(gait: GaitSchedule, t: float) -> Tuple[int, ContactMode, float]:
    """Cycle index, planned phase and elapsed fraction of that phase at time t"""
    # snap to the cycle boundary so multiples of the period start a swing
    cycles = np.floor(t / gait.period + 1e-9)
    phase_time = max(0.0, float(t - cycles * gait.period))
    if phase_time < gait.swing_duration:
        return int(cycles), ContactMode.SWING, phase_time / gait.swing_duration
    return int(cycles), ContactMode.STANCE, (phase_time - gait.swing_duration) / gait.stance_duration


def reference_trajectory(gait: GaitSchedule, reference: SwingReference, t: float) -> FootTarget:
    """
    Foot target at time t. Swing follows a cycloid in height and a C1 sweep in x
    that leaves and rejoins the stance velocity; stance slides the foot backward
    at the walking speed.
    """
    if t < 0:
        raise InvalidArgumentError(f"t must be non-negative, got {t}")
    x_nom, y_nom, z_nom = reference.nominal_foot
    t_swing = gait.swing_duration
    t_stance = gait.stance_duration
    v = reference.speed
    half = 0.5 * reference.step_length
    x_end = half - v * t_stance
    z_stance = z_nom - reference.press_depth
    _, phase, s = gait_phase(gait, t)

    if phase == ContactMode.SWING:
        sweep = half - x_end
        overshoot = sweep + v * t_swing
        lift = reference.step_height + reference.press_depth
        angle = 2.0 * np.pi * s
        x = x_end + sweep * s - overshoot * np.sin(angle) / (2.0 * np.pi)
        dx = sweep - overshoot * np.cos(angle)
        ddx = 2.0 * np.pi * overshoot * np.sin(angle)
        z = z_stance + lift * (1.0 - np.cos(angle)) / 2.0
        dz = np.pi * lift * np.sin(angle)
        ddz = 2.0 * np.pi ** 2 * lift * np.cos(angle)
        return FootTarget(
            position=np.array([x_nom + x, y_nom, z]),
            velocity=np.array([dx, 0.0, dz]) / t_swing,
            acceleration=np.array([ddx, 0.0, ddz]) / t_swing ** 2,
            planned_mode=ContactMode.SWING,
        )

    elapsed = s * t_stance
    return FootTarget(
        position=np.array([x_nom + half - v * elapsed, y_nom, z_stance]),
        velocity=np.array([-v, 0.0, 0.0]),
        acceleration=np.zeros(3),
        planned_mode=ContactMode.STANCE,
    )


def pd_torque(model: LegModel, q, qd, target: FootTarget, gains: Optional[PdGains] = None) -> np.ndarray:
    """tau_m = J^T (Kp e + Kd e_dot) + g(q)"""
    gains = gains or PdGains()
    foot = foot_kinematics(model, q, qd)
    force = np.asarray(gains.kp) * (target.position - foot.position) + np.asarray(gains.kd) * (
        target.velocity - foot.velocity
    )
    return foot.J.T @ force + gravity_torque(model, q)


def contact_force(
    foot_pos,
    foot_vel,
    ground: GroundModel,
    obstacles: List[Obstacle],
    t: float = 0.0,
    belt_velocity: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, ContactMode]:
    """
    Penalty contact. The obstacle decides the mode whenever the foot is inside it.
    """
    pos = np.asarray(foot_pos, dtype=float)
    vel = np.asarray(foot_vel, dtype=float)
    belt = np.zeros(3) if belt_velocity is None else np.asarray(belt_velocity, dtype=float)
    force = np.zeros(3)
    mode = ContactMode.SWING

    penetration = ground.height - pos[2]
    if penetration > 0:
        normal = max(0.0, ground.stiffness * penetration - ground.damping * vel[2])
        tangential = -ground.tangential_damping * (vel[:2] - belt[:2])
        limit = ground.friction * normal
        magnitude = np.linalg.norm(tangential)
        if magnitude > limit:
            tangential = tangential * (limit / magnitude)
        force += np.array([tangential[0], tangential[1], normal])
        mode = ContactMode.STANCE

    for obstacle in obstacles:
        if not obstacle.active(t) or pos[2] >= ground.height + obstacle.height:
            continue
        depth = pos[0] - obstacle.position
        if depth > 0:
            force[0] -= max(0.0, obstacle.stiffness * depth + obstacle.damping * vel[0])
            mode = ContactMode.COLLISION
    return force, mode


def solve_foot_ik(model: LegModel, target, q_guess) -> np.ndarray:
    """Joint angles placing the foot at ``target``"""
    target = np.asarray(target, dtype=float)
    result = least_squares(
        lambda q: contact_jacobian(model, q)[1] - target,
        np.asarray(q_guess, dtype=float),
        jac=lambda q: contact_jacobian(model, q)[0],
        xtol=1e-12,
        ftol=1e-12,
        gtol=1e-12,
    )
    error = np.linalg.norm(result.fun)
    if error > 1e-6:
        raise InvalidArgumentError(f"Foot target {target} is out of reach (residual {error:.2e} m)")
    return result.x


def initial_state(scenario: Scenario, model: LegModel) -> Tuple[np.ndarray, np.ndarray]:
    if scenario.initial_q is not None:
        q0 = np.asarray(scenario.initial_q, dtype=float)
    else:
        target = reference_trajectory(scenario.gait, scenario.reference, 0.0).position
        target[2] = max(target[2], scenario.ground.height)
        guess = scenario.ik_guess if len(scenario.ik_guess) == model.n_dof else np.full(model.n_dof, 0.1)
        q0 = solve_foot_ik(model, target, guess)
    qd0 = np.zeros(model.n_dof) if scenario.initial_qd is None else np.asarray(scenario.initial_qd, dtype=float)
    return q0, qd0


class PdController:
    """Task-space PD tracking of the gait reference with gravity compensation and torque limits"""

    def __init__(self, model: LegModel, scenario: Scenario):
        self.model = model
        self.scenario = scenario

    def reset(self) -> None:
        pass

    def command(self, t: float, q: np.ndarray, qd: np.ndarray) -> ControlCommand:
        target = reference_trajectory(self.scenario.gait, self.scenario.reference, t)
        tau = pd_torque(self.model, q, qd, target, self.scenario.gains)
        limit = self.scenario.gains.max_torque
        return ControlCommand(tau=np.clip(tau, -limit, limit), foot_acc=target.acceleration)

    def observe(self, reading: JointReading) -> None:
        pass


def simulate(scenario: Scenario, model: LegModel, controller: Optional[Controller] = None) -> ScenarioTrace:
    """
    Semi-implicit Euler rollout. Controllers act on noisy joint readings; the
    recorded truth keeps the clean state and the torque actually applied.
    """
    controller = controller or PdController(model, scenario)
    controller.reset()
    rng = np.random.default_rng(scenario.seed)
    n = model.n_dof
    ticks = scenario.n_ticks
    belt = scenario.belt_velocity
    q, qd = initial_state(scenario, model)

    logger.info(f"Simulating {ticks} ticks at dt={scenario.dt} with {len(scenario.obstacles)} obstacles")
    records = {name: [] for name in ScenarioTrace.__dataclass_fields__}
    for k in range(ticks):
        t = k * scenario.dt
        foot = foot_kinematics(model, q, qd)
        f_ext, mode = contact_force(foot.position, foot.velocity, scenario.ground, scenario.obstacles, t, belt)

        dq, dqd, dtau = scenario.sensor_noise.draw(rng, n)
        q_meas = q + dq
        qd_meas = qd + dqd
        cmd = controller.command(t, q_meas, qd_meas)
        tau_meas = cmd.tau + dtau
        controller.observe(JointReading(t=t, q=q_meas, qd=qd_meas, tau_m=tau_meas))

        qdd = forward_dynamics(model, q, qd, cmd.tau, f_ext)
        for name, value in (
            ("t", t), ("q", q), ("qd", qd), ("qdd", qdd), ("tau_m", cmd.tau), ("f_ext", f_ext),
            ("mode", int(mode)), ("foot_pos", foot.position), ("foot_vel", foot.velocity),
            ("q_meas", q_meas), ("qd_meas", qd_meas), ("tau_meas", tau_meas), ("acc_cmd", cmd.foot_acc),
        ):
            records[name].append(value)

        qd = qd + scenario.dt * qdd
        q = q + scenario.dt * qd
        if not np.all(np.isfinite(qd)) or np.linalg.norm(qd) > DIVERGENCE_LIMIT:
            logger.error(f"Simulation diverged at tick {k}: |qd| = {np.linalg.norm(qd):.3e}")
            raise SimulationDivergedError(k)

    return ScenarioTrace(**{name: np.array(values) for name, values in records.items()})


def default_scenario() -> Scenario:
    """Two seconds of walking with obstacles during the swings of the second and fourth cycles"""
    gait = GaitSchedule()
    return Scenario(
        duration=5 * gait.period,
        gait=gait,
        obstacles=[
            Obstacle(t_on=gait.period, t_off=gait.period + gait.swing_duration),
            Obstacle(t_on=3 * gait.period, t_off=3 * gait.period + gait.swing_duration),
        ],
    )


def default_batch(
    n_scenarios: int = 10, n_collisions: int = 5, seed: int = 0, mass_scale: float = 1.0
) -> List[Scenario]:
    """
    Scripted collision campaign: every other gait cycle has an obstacle with a
    randomized position and height. Obstacles always stand taller than the swing apex.
    """
    rng = np.random.default_rng(seed)
    gait = GaitSchedule()
    scenarios = []
    for i in range(n_scenarios):
        obstacles = []
        for c in range(n_collisions):
            start = (2 * c + 1) * gait.period
            obstacles.append(
                Obstacle(
                    position=float(rng.uniform(0.0, 0.03)),
                    height=float(rng.uniform(0.1, 0.2)),
                    t_on=start,
                    t_off=start + gait.swing_duration,
                )
            )
        scenarios.append(
            Scenario(
                duration=(2 * n_collisions + 1) * gait.period,
                gait=gait,
                obstacles=obstacles,
                model_mismatch=ModelMismatch(mass_scale=mass_scale),
                seed=seed * 1000 + i,
            )
        )
    return scenarios
