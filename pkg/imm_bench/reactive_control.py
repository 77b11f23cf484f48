import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Literal, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator

from imm_bench.imm_estimator import EstimatorConfig, ImmEstimator
from imm_bench.leg_dynamics import FootState, JointReading, LegModel, dynamics_terms, foot_kinematics, with_mismatch
from imm_bench.metrics import BenchReport, ControllerRow, impulse_and_duration
from imm_bench.momentum_observers import ContactMode, prepare_input
from imm_bench.scenario_sim import (
    ControlCommand,
    FootTarget,
    GaitSchedule,
    Scenario,
    ScenarioTrace,
    SimulationDivergedError,
    SwingReference,
    gait_phase,
    reference_trajectory,
    simulate,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class AdmittanceParams(BaseModel):
    M_a: float = 1.0
    D_a: float = 20.0
    K_a: float = 100.0

    @field_validator("M_a")
    @classmethod
    def check_mass(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("M_a must be positive")
        return value

    @field_validator("D_a", "K_a")
    @classmethod
    def check_non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("D_a and K_a must be non-negative")
        return value


class OscGains(BaseModel):
    kp: float = 100.0
    kd: float = 20.0


class ReflexConfig(BaseModel):
    height_increase: float = 0.10
    trigger_window: float = 0.5

    @field_validator("height_increase")
    @classmethod
    def check_height(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("height_increase must be positive")
        return value

    @field_validator("trigger_window")
    @classmethod
    def check_window(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("trigger_window must lie in (0, 1]")
        return value


class ControlConfig(BaseModel):
    """
    Swing-leg reaction settings. Without explicit ``osc`` gains the OSC baseline
    uses Kp = K_a / M_a and Kd = D_a / M_a.
    """

    controller: Literal["ac", "osc"] = "ac"
    admittance: AdmittanceParams = Field(default_factory=AdmittanceParams)
    osc: Optional[OscGains] = None
    vertical: OscGains = Field(default_factory=lambda: OscGains(kp=400.0, kd=40.0))
    reflex: ReflexConfig = Field(default_factory=ReflexConfig)
    reflex_enabled: bool = True
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    ik_damping: float = 1e-3

    def osc_gains(self) -> OscGains:
        if self.osc is not None:
            return self.osc
        a = self.admittance
        return OscGains(kp=a.K_a / a.M_a, kd=a.D_a / a.M_a)


class ControlScenario(Scenario):
    control: ControlConfig = Field(default_factory=ControlConfig)


def admittance_accel(f_hat, r, rd, rdot, rdot_d, rddot_d, params: AdmittanceParams):
    """r_ddot = M_a^-1 (f_hat - D_a (r_dot - r_dot_d) - K_a (r - r_d)) + r_ddot_d, per axis"""
    return (f_hat - params.D_a * (rdot - rdot_d) - params.K_a * (r - rd)) / params.M_a + rddot_d


def osc_accel(r, rd, rdot, rdot_d, rddot_d, gains: OscGains):
    return gains.kp * (rd - r) + gains.kd * (rdot_d - rdot) + rddot_d


class Trajectory(Protocol):
    def target(self, t: float) -> FootTarget: ...


@dataclass
class NominalTrajectory:
    gait: GaitSchedule
    reference: SwingReference

    def target(self, t: float) -> FootTarget:
        return reference_trajectory(self.gait, self.reference, t)

    def foothold(self) -> np.ndarray:
        x_nom, y_nom, z_nom = self.reference.nominal_foot
        return np.array([x_nom + 0.5 * self.reference.step_length, y_nom, z_nom - self.reference.press_depth])


@dataclass
class ReflexTrajectory:
    """
    Rest of a swing after a reflex: x/y blend from the collision point to the
    original foothold, z rises to the raised apex and lands at the stance height.
    Outside [t_start, t_end) the base trajectory applies.
    """

    base: NominalTrajectory
    t_start: float
    t_end: float
    start: np.ndarray
    apex: float

    def target(self, t: float) -> FootTarget:
        if t < self.t_start or t >= self.t_end:
            return self.base.target(t)
        duration = self.t_end - self.t_start
        u = (t - self.t_start) / duration
        foothold = self.base.foothold()

        blend = (1.0 - np.cos(np.pi * u)) / 2.0
        d_blend = np.pi * np.sin(np.pi * u) / 2.0
        dd_blend = np.pi ** 2 * np.cos(np.pi * u) / 2.0
        span = foothold[:2] - self.start[:2]

        low = self.start[2] if u <= 0.5 else foothold[2]
        rise = self.apex - low
        angle = 2.0 * np.pi * u
        z = low + rise * (1.0 - np.cos(angle)) / 2.0
        dz = np.pi * rise * np.sin(angle)
        ddz = 2.0 * np.pi ** 2 * rise * np.cos(angle)

        return FootTarget(
            position=np.array([*(self.start[:2] + span * blend), z]),
            velocity=np.array([*(span * d_blend), dz]) / duration,
            acceleration=np.array([*(span * dd_blend), ddz]) / duration ** 2,
            planned_mode=ContactMode.SWING,
        )


def reflex_adjust(
    swing_phase: float, foot_pos, original: NominalTrajectory, cfg: ReflexConfig, t: float
) -> Trajectory:
    """
    Raise the swing after a collision detected early enough in the swing.
    Later collisions leave ``original`` untouched.
    """
    if swing_phase > cfg.trigger_window:
        return original
    foot_pos = np.asarray(foot_pos, dtype=float)
    t_end = t + (1.0 - swing_phase) * original.gait.swing_duration
    return ReflexTrajectory(
        base=original, t_start=t, t_end=t_end, start=foot_pos.copy(), apex=foot_pos[2] + cfg.height_increase
    )


def computed_torque(model: LegModel, q, qd, foot: FootState, foot_acc, damping: float = 1e-3) -> np.ndarray:
    """Joint torque realising a foot acceleration through a damped least-squares inverse"""
    qd = np.asarray(qd, dtype=float)
    terms = dynamics_terms(model, q, qd)
    J = foot.J
    rhs = np.asarray(foot_acc, dtype=float) - foot.Jdot @ qd
    qdd = J.T @ np.linalg.solve(J @ J.T + damping ** 2 * np.eye(J.shape[0]), rhs)
    return terms.M @ qdd + terms.C @ qd + terms.g + terms.tau_f


class ReactiveSwingController:
    """
    Computed-torque swing/stance tracking driven by an in-loop IMM estimator.
    A Collision decision in the early swing triggers the reflex; x/y then follow
    either the admittance law with the gated force estimate or plain OSC.
    """

    def __init__(self, model: LegModel, scenario: Scenario, control: Optional[ControlConfig] = None):
        self.scenario = scenario
        self.control = control or ControlConfig()
        self.model_hat = with_mismatch(model, scenario.model_mismatch.mass_scale)
        self.nominal = NominalTrajectory(scenario.gait, scenario.reference)
        self.estimator = ImmEstimator(self.control.estimator)
        self.reset()

    def reset(self) -> None:
        self.estimator.reset()
        self.trajectory: Trajectory = self.nominal
        self.cycle = -1
        self.f_hat = np.zeros(3)
        self.mode = ContactMode.SWING
        self.reflex_count = 0

    def observe(self, reading: JointReading) -> None:
        out = self.estimator.step(prepare_input(self.model_hat, reading), self.scenario.dt)
        self.f_hat, self.mode = out.f_ext_hat, out.mode

    def command(self, t: float, q: np.ndarray, qd: np.ndarray) -> ControlCommand:
        cycle, planned, fraction = gait_phase(self.scenario.gait, t)
        if cycle != self.cycle:
            self.cycle = cycle
            self.trajectory = self.nominal
        foot = foot_kinematics(self.model_hat, q, qd)

        if (
            self.control.reflex_enabled
            and planned == ContactMode.SWING
            and self.mode == ContactMode.COLLISION
            and self.trajectory is self.nominal
        ):
            adjusted = reflex_adjust(fraction, foot.position, self.nominal, self.control.reflex, t)
            if adjusted is not self.nominal:
                self.trajectory = adjusted
                self.reflex_count += 1
                logger.info(f"Reflex at t={t:.3f}s (swing phase {fraction:.2f}), apex {adjusted.apex:.3f} m")

        target = self.trajectory.target(t)
        acc = self.foot_acceleration(foot, target)
        tau = computed_torque(self.model_hat, q, qd, foot, acc, self.control.ik_damping)
        limit = self.scenario.gains.max_torque
        return ControlCommand(tau=np.clip(tau, -limit, limit), foot_acc=acc)

    def foot_acceleration(self, foot: FootState, target: FootTarget) -> np.ndarray:
        force = self.f_hat if self.mode == ContactMode.COLLISION else np.zeros(3)
        acc = np.empty(3)
        for axis in (0, 1):
            args = (
                foot.position[axis], target.position[axis], foot.velocity[axis],
                target.velocity[axis], target.acceleration[axis],
            )
            if self.control.controller == "ac":
                acc[axis] = admittance_accel(force[axis], *args, self.control.admittance)
            else:
                acc[axis] = osc_accel(*args, self.control.osc_gains())
        acc[2] = osc_accel(
            foot.position[2], target.position[2], foot.velocity[2],
            target.velocity[2], target.acceleration[2], self.control.vertical,
        )
        return acc


def velocity_rmse(trace: ScenarioTrace, gait: GaitSchedule, reference: SwingReference) -> float:
    """RMSE of the foot x-velocity against the nominal gait reference"""
    desired = np.array([reference_trajectory(gait, reference, t).velocity[0] for t in trace.t])
    return float(np.sqrt(np.mean((trace.foot_vel[:, 0] - desired) ** 2)))


@dataclass
class ControlRun:
    controller: str
    impulse_sum: float = 0.0
    duration_sum: float = 0.0
    collisions: int = 0
    velocity_sq: float = 0.0
    ticks: int = 0
    diverged: bool = False


def control_run(scenario: Scenario, model: LegModel, control: ControlConfig) -> ControlRun:
    run = ControlRun(controller=control.controller)
    controller = ReactiveSwingController(model, scenario, control)
    try:
        trace = simulate(scenario, model, controller)
    except SimulationDivergedError as e:
        logger.error(f"{control.controller} run diverged at tick {e.tick} (seed {scenario.seed})")
        run.diverged = True
        return run
    impulse, duration, count = impulse_and_duration(trace.f_ext, trace.mode, scenario.dt)
    run.impulse_sum = impulse * count
    run.duration_sum = duration * count
    run.collisions = count
    rmse = velocity_rmse(trace, scenario.gait, scenario.reference)
    run.velocity_sq = rmse ** 2 * len(trace)
    run.ticks = len(trace)
    return run


def run_ab_control(
    scenarios: Sequence[Scenario],
    model: LegModel,
    control: Optional[ControlConfig] = None,
    controllers: Sequence[str] = ("ac", "osc"),
    workers: int = 1,
) -> BenchReport:
    """
    Run every controller on the same scenarios and summarise collisions and
    tracking. Results merge in submission order, so the report does not
    depend on ``workers``.
    """
    base = control or ControlConfig()
    jobs = [(name, scenario) for name in controllers for scenario in scenarios]
    logger.info(f"Running {len(jobs)} control runs on {workers} workers")

    def work(job):
        name, scenario = job
        return control_run(scenario, model, base.model_copy(update={"controller": name}))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        runs: List[ControlRun] = list(pool.map(work, jobs))

    rows = []
    for name in controllers:
        mine = [r for r in runs if r.controller == name]
        collisions = sum(r.collisions for r in mine)
        ticks = sum(r.ticks for r in mine)
        diverged = sum(1 for r in mine if r.diverged)
        label = f"{name} (diverged {diverged})" if diverged else name
        rows.append(
            ControllerRow(
                controller=label,
                total_collisions=collisions,
                avg_duration_s=sum(r.duration_sum for r in mine) / collisions if collisions else 0.0,
                velocity_rmse=float(np.sqrt(sum(r.velocity_sq for r in mine) / ticks)) if ticks else None,
                avg_impulse_ns=sum(r.impulse_sum for r in mine) / collisions if collisions else 0.0,
            )
        )
    return BenchReport(controllers=rows)
