import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from imm_bench.leg_dynamics import JointReading, LegModel
from imm_bench.momentum_observers import (
    ContactMode,
    FrictionCone,
    InvalidMeasurementError,
    KfState,
    NoiseConfig,
    ObserverInput,
    build_process_model,
    classify_by_cones,
    default_cones,
    initial_kf_state,
    kf_predict,
    kf_update,
    mode_measurement,
    prepare_input,
    pseudo_wrench,
)

logger = logging.getLogger(__name__)

MODES: Tuple[ContactMode, ...] = (ContactMode.SWING, ContactMode.STANCE, ContactMode.COLLISION)
MIN_PREDICTED_PROBABILITY = 1e-12


class Tpm(BaseModel):
    """Row-stochastic mode transition matrix"""

    pi: List[List[float]]

    @field_validator("pi")
    @classmethod
    def check_stochastic(cls, value: List[List[float]]) -> List[List[float]]:
        arr = np.asarray(value, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition matrix rows must sum to 1")
        return value

    @classmethod
    def from_diagonal(cls, swing: float = 0.8, stance: float = 0.8, collision: float = 0.8) -> "Tpm":
        """
        Swing may go anywhere; stance and collision only return to swing
        """
        return cls(
            pi=[
                [swing, (1.0 - swing) / 2.0, (1.0 - swing) / 2.0],
                [1.0 - stance, stance, 0.0],
                [1.0 - collision, 0.0, collision],
            ]
        )

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.pi, dtype=float)


def _default_stance_cone() -> FrictionCone:
    return default_cones()[ContactMode.STANCE]


def _default_collision_cone() -> FrictionCone:
    return default_cones()[ContactMode.COLLISION]


class EstimatorConfig(BaseModel):
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    stance_cone: FrictionCone = Field(default_factory=_default_stance_cone)
    collision_cone: FrictionCone = Field(default_factory=_default_collision_cone)
    tpm: Tpm = Field(default_factory=Tpm.from_diagonal)
    mu0: List[float] = Field(default_factory=lambda: [1.0, 0.0, 0.0])
    p0_variance: float = 0.01
    f0_variance: float = 100.0
    mu_floor: float = 0.02
    threshold: float = 0.6
    dwell_ticks: int = 2
    fo_mbo_gain: float = 50.0
    pm_force_variance: float = 1.0

    @model_validator(mode="after")
    def check_consistency(self) -> "EstimatorConfig":
        if len(self.mu0) != len(self.tpm.pi):
            raise ValueError("mu0 must have one entry per mode")
        if any(m < 0 for m in self.mu0) or abs(sum(self.mu0) - 1.0) > 1e-12:
            raise ValueError("mu0 must be a probability vector")
        if not 1.0 / 3.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (1/3, 1)")
        if self.dwell_ticks < 1:
            raise ValueError("dwell_ticks must be at least 1")
        if not 0.0 <= self.mu_floor < 1.0 / len(self.mu0):
            raise ValueError("mu_floor out of range")
        for name in ("p0_variance", "f0_variance", "fo_mbo_gain", "pm_force_variance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        return self

    def cones(self) -> Dict[ContactMode, FrictionCone]:
        return {ContactMode.STANCE: self.stance_cone, ContactMode.COLLISION: self.collision_cone}

    def initial_covariance(self, n: int) -> np.ndarray:
        return np.diag(np.concatenate([np.full(n, self.p0_variance), np.full(3, self.f0_variance)]))


@dataclass
class ModeModel:
    """Discrete model and measurement one mode-matched filter runs on this tick"""

    A_d: np.ndarray
    B_d: np.ndarray
    Q_d: np.ndarray
    u: np.ndarray
    C: np.ndarray
    R: np.ndarray
    y: np.ndarray


@dataclass
class ModeDecision:
    mode: ContactMode
    candidate: Optional[ContactMode] = None
    streak: int = 0


@dataclass
class ImmState:
    filters: List[KfState]
    mu: np.ndarray
    combined: KfState
    prior: KfState
    modes: Tuple[ContactMode, ...] = MODES
    decision: Optional[ModeDecision] = None


@dataclass
class EstimateOutput:
    t: float
    f_ext_hat: np.ndarray
    p_hat: np.ndarray
    mu: np.ndarray
    mode: ContactMode
    per_mode_innovations: List[np.ndarray] = field(default_factory=list)


def initial_imm_state(prior: KfState, mu0: Sequence[float], modes: Sequence[ContactMode] = MODES) -> ImmState:
    mu = np.asarray(mu0, dtype=float)
    filters = [KfState(prior.xhat.copy(), prior.P.copy()) for _ in modes]
    return ImmState(
        filters=filters,
        mu=mu,
        combined=KfState(prior.xhat.copy(), prior.P.copy()),
        prior=KfState(prior.xhat.copy(), prior.P.copy()),
        modes=tuple(modes),
        decision=ModeDecision(tuple(modes)[int(np.argmax(mu))]),
    )


def _stack(filters: Sequence[KfState]) -> Tuple[np.ndarray, np.ndarray]:
    return np.stack([f.xhat for f in filters]), np.stack([f.P for f in filters])


def _symmetric(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def interaction_step(state: ImmState, pi: np.ndarray, mu_floor: float = 1e-6) -> Tuple[List[KfState], np.ndarray]:
    """
    Mix the filter estimates; returns the mixed initial conditions and the
    predicted mode probabilities c
    """
    mu = np.maximum(state.mu, mu_floor)
    mu = mu / mu.sum()
    c = pi.T @ mu
    reachable = c >= MIN_PREDICTED_PROBABILITY
    # weights[j, k]: share of filter j in the start of filter k
    weights = pi * mu[:, None] / np.where(reachable, c, 1.0)
    X, P = _stack(state.filters)
    x_mix = weights.T @ X
    spread = X[None, :, :] - x_mix[:, None, :]
    P_mix = _symmetric(
        np.einsum("jk,jab->kab", weights, P) + np.einsum("jk,kja,kjb->kab", weights, spread, spread)
    )
    mixed = []
    for k, own in enumerate(state.filters):
        if reachable[k]:
            mixed.append(KfState(x_mix[k], P_mix[k]))
        else:
            mixed.append(KfState(own.xhat.copy(), own.P.copy()))
    return mixed, c


def gaussian_log_likelihood(innovation: np.ndarray, S: np.ndarray) -> float:
    factor = cho_factor(S)
    mahalanobis = float(innovation @ cho_solve(factor, innovation))
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return -0.5 * (mahalanobis + log_det + len(innovation) * np.log(2.0 * np.pi))


def probability_update_from_log(c: np.ndarray, log_likelihoods: Sequence[float]) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_weights = np.log(c) + np.asarray(log_likelihoods, dtype=float)
    if not np.any(np.isfinite(log_weights)):
        logger.warning("All mode likelihoods underflowed; keeping predicted probabilities")
        return c / c.sum()
    log_weights[np.isnan(log_weights)] = -np.inf
    mu = np.exp(log_weights - logsumexp(log_weights))
    return mu / mu.sum()


def probability_update(c: np.ndarray, innovations: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """
    Bayes update of the mode probabilities from each filter's innovation
    """
    return probability_update_from_log(c, [gaussian_log_likelihood(y, S) for y, S in innovations])


def combination_step(filters: Sequence[KfState], mu: np.ndarray) -> KfState:
    X, P = _stack(filters)
    xhat = mu @ X
    spread = X - xhat
    combined = np.einsum("k,kab->ab", mu, P) + np.einsum("k,ka,kb->ab", mu, spread, spread)
    return KfState(xhat, _symmetric(combined))


def _filter_all_modes(
    mixed: Sequence[KfState], models: Sequence[ModeModel]
) -> Optional[Tuple[List[KfState], List[float], List[np.ndarray]]]:
    """
    Predict and update every mode-matched filter in one batch. Returns None when
    any mode fails, so the caller can handle the modes one by one.
    """
    if len({(m.A_d.shape, m.B_d.shape, m.C.shape) for m in models}) != 1:
        return None
    X, P = _stack(mixed)
    A = np.stack([m.A_d for m in models])
    C = np.stack([m.C for m in models])
    R = np.stack([m.R for m in models])
    Y = np.stack([m.y for m in models])
    if not np.all(np.isfinite(Y)):
        raise InvalidMeasurementError(f"Measurement contains non-finite entries: {Y}")

    B = np.stack([m.B_d for m in models])
    U = np.stack([m.u for m in models])
    X = np.einsum("kab,kb->ka", A, X) + np.einsum("kab,kb->ka", B, U)
    P = _symmetric(A @ P @ np.swapaxes(A, 1, 2) + np.stack([m.Q_d for m in models]))
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(P))):
        return None
    innovations = Y - np.einsum("kab,kb->ka", C, X)
    CP = C @ P
    S = _symmetric(CP @ np.swapaxes(C, 1, 2) + R)
    try:
        L = np.linalg.cholesky(S)
        K = np.swapaxes(np.linalg.solve(S, CP), 1, 2)
    except LinAlgError:
        return None
    X = X + np.einsum("kab,kb->ka", K, innovations)
    I_KC = np.eye(X.shape[1]) - K @ C
    P = _symmetric(I_KC @ P @ np.swapaxes(I_KC, 1, 2) + K @ R @ np.swapaxes(K, 1, 2))
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(P))):
        return None

    whitened = np.linalg.solve(L, innovations[..., None])[..., 0]
    log_det = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    log_likelihoods = -0.5 * (np.sum(whitened**2, axis=1) + log_det + Y.shape[1] * np.log(2.0 * np.pi))
    filters = [KfState(X[k], P[k]) for k in range(len(models))]
    return filters, log_likelihoods.tolist(), list(innovations)


def _filter_each_mode(
    state: ImmState, mixed: Sequence[KfState], models: Sequence[ModeModel]
) -> Tuple[List[KfState], List[float], List[np.ndarray]]:
    filters = []
    log_likelihoods = []
    innovations = []
    for k, (start, model) in enumerate(zip(mixed, models)):
        predicted = kf_predict(start, model.A_d, model.B_d, model.Q_d, model.u)
        updated = None
        if _finite(predicted):
            try:
                updated, innovation, S = kf_update(predicted, model.C, model.R, model.y)
            except LinAlgError as e:
                logger.warning(f"Update failed for {state.modes[k].name}: {e}")
        if updated is None or not _finite(updated):
            logger.warning(f"Filter for {state.modes[k].name} diverged; resetting to prior")
            filters.append(KfState(state.prior.xhat.copy(), state.prior.P.copy()))
            log_likelihoods.append(-np.inf)
            innovations.append(np.full(len(model.y), np.nan))
            continue
        filters.append(updated)
        log_likelihoods.append(gaussian_log_likelihood(innovation, S))
        innovations.append(innovation)
    return filters, log_likelihoods, innovations


def imm_cycle(
    state: ImmState, pi: np.ndarray, models: Sequence[ModeModel], mu_floor: float = 1e-6
) -> Tuple[ImmState, List[np.ndarray]]:
    """
    Interaction, mode-matched filtering, probability update and combination
    """
    mixed, c = interaction_step(state, pi, mu_floor)
    batch = _filter_all_modes(mixed, models)
    if batch is None:
        batch = _filter_each_mode(state, mixed, models)
    filters, log_likelihoods, innovations = batch
    mu = probability_update_from_log(c, log_likelihoods)
    combined = combination_step(filters, mu)
    updated = ImmState(
        filters=filters, mu=mu, combined=combined, prior=state.prior, modes=state.modes, decision=state.decision
    )
    return updated, innovations


def _finite(state: KfState) -> bool:
    return bool(np.all(np.isfinite(state.xhat)) and np.all(np.isfinite(state.P)))


def contact_mode_models(
    inp: ObserverInput,
    cfg: EstimatorConfig,
    dt: float,
    modes: Sequence[ContactMode],
    previous: Optional[ObserverInput] = None,
) -> List[ModeModel]:
    """
    Per-mode process model and stacked momentum/force measurement for one tick.
    The process model uses the Jacobian and input of ``previous`` when given,
    the measurement always comes from ``inp``.
    """
    n = len(inp.p_meas)
    source = previous if previous is not None else inp
    f_pse = pseudo_wrench(inp.terms.M, inp.J, inp.Jdot, inp.qd, inp.tau)
    cones = cfg.cones()
    u = source.u
    C = np.eye(n + 3)
    models = []
    for mode in modes:
        A_d, B_d, Q_d = build_process_model(mode, source.J, cfg.noise, dt)
        y_f, R_f = mode_measurement(mode, f_pse, cones, cfg.noise)
        R = np.zeros((n + 3, n + 3))
        R[:n, :n] = cfg.noise.v_p * np.eye(n)
        R[n:, n:] = R_f
        models.append(ModeModel(A_d=A_d, B_d=B_d, Q_d=Q_d, u=u, C=C, R=R, y=np.concatenate([inp.p_meas, y_f])))
    return models


def estimate_output(state: ImmState, t: float, innovations: List[np.ndarray]) -> EstimateOutput:
    n = len(state.combined.xhat) - 3
    return EstimateOutput(
        t=t,
        f_ext_hat=state.combined.xhat[n:].copy(),
        p_hat=state.combined.xhat[:n].copy(),
        mu=state.mu.copy(),
        mode=state.decision.mode,
        per_mode_innovations=innovations,
    )


def imm_step_prepared(
    state: ImmState,
    inp: ObserverInput,
    cfg: EstimatorConfig,
    dt: float,
    previous: Optional[ObserverInput] = None,
) -> Tuple[ImmState, EstimateOutput]:
    models = contact_mode_models(inp, cfg, dt, state.modes, previous)
    state, innovations = imm_cycle(state, cfg.tpm.matrix, models, cfg.mu_floor)
    previous_decision = state.decision or ModeDecision(state.modes[0])
    state.decision = classify_mode(state.mu, previous_decision, cfg.threshold, cfg.dwell_ticks, state.modes)
    return state, estimate_output(state, inp.t, innovations)


def imm_step(
    state: ImmState,
    reading: JointReading,
    model_hat: LegModel,
    cfg: EstimatorConfig,
    dt: float,
    previous: Optional[JointReading] = None,
) -> Tuple[ImmState, EstimateOutput]:
    """
    One full IMM cycle on a raw joint reading, followed by the mode decision
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    prev_inp = prepare_input(model_hat, previous) if previous is not None else None
    return imm_step_prepared(state, prepare_input(model_hat, reading), cfg, dt, prev_inp)


def classify_mode(
    mu: np.ndarray,
    prev: ModeDecision,
    threshold: float = 0.6,
    dwell_ticks: int = 2,
    modes: Sequence[ContactMode] = MODES,
) -> ModeDecision:
    """
    Switch to the most likely mode only after it has held at least `threshold`
    probability for `dwell_ticks` consecutive ticks
    """
    k = int(np.argmax(mu))
    candidate = modes[k]
    if candidate == prev.mode:
        return ModeDecision(prev.mode)
    if mu[k] < threshold:
        return ModeDecision(prev.mode)
    streak = prev.streak + 1 if prev.candidate == candidate else 1
    if streak >= dwell_ticks:
        return ModeDecision(candidate)
    return ModeDecision(prev.mode, candidate, streak)


class ImmEstimator:
    """
    Stateful IMM observer: one mode-matched momentum Kalman filter per contact mode.

    The first reading only initialises the filters. Every later reading runs
    one interaction/predict/update/combine cycle, predicting with the previous
    reading's input.
    """

    def __init__(self, cfg: Optional[EstimatorConfig] = None, modes: Sequence[ContactMode] = MODES):
        self.cfg = cfg or EstimatorConfig()
        self.modes = tuple(modes)
        self.state: Optional[ImmState] = None
        self._previous: Optional[ObserverInput] = None

    @property
    def decision(self) -> Optional[ModeDecision]:
        return self.state.decision if self.state is not None else None

    def reset(self):
        self.state = None
        self._previous = None

    def _start(self, inp: ObserverInput) -> None:
        prior = initial_kf_state(inp.p_meas)
        prior.P = self.cfg.initial_covariance(len(inp.p_meas))
        self.state = initial_imm_state(prior, self.cfg.mu0, self.modes)

    def step(self, inp: ObserverInput, dt: float) -> EstimateOutput:
        if self.state is None:
            self._start(inp)
            out = estimate_output(self.state, inp.t, [np.zeros(len(inp.p_meas) + 3) for _ in self.modes])
        else:
            self.state, out = imm_step_prepared(self.state, inp, self.cfg, dt, self._previous)
        self._previous = inp
        return out


class ConeModeTracker:
    """
    Mode decisions for force-only observers: cone membership of the force
    estimate, debounced with the same dwell rule as the IMM
    """

    def __init__(self, cones: Dict[ContactMode, FrictionCone], threshold: float = 0.6, dwell_ticks: int = 2):
        self.cones = cones
        self.threshold = threshold
        self.dwell_ticks = dwell_ticks
        self.decision = ModeDecision(ContactMode.SWING)

    def reset(self):
        self.decision = ModeDecision(ContactMode.SWING)

    def step(self, force: np.ndarray) -> ContactMode:
        mode = classify_by_cones(force, self.cones)
        one_hot = np.array([1.0 if m == mode else 0.0 for m in MODES])
        self.decision = classify_mode(one_hot, self.decision, self.threshold, self.dwell_ticks, MODES)
        return self.decision.mode
