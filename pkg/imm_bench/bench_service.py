import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from imm_bench.imm_estimator import ConeModeTracker, EstimatorConfig, ImmEstimator
from imm_bench.leg_dynamics import LegModel, SingularDynamicsError, default_leg, with_mismatch
from imm_bench.metrics import POST_WINDOW, BenchReport, ObserverTally
from imm_bench.momentum_observers import (
    ContactMode,
    FoMbo,
    InvalidMeasurementError,
    Mbko,
    ObserverInput,
    PmMbko,
    prepare_input,
)
from imm_bench.scenario_sim import Scenario, ScenarioTrace, SimulationDivergedError, default_batch, simulate

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

OBSERVER_NAMES = ("fo_mbo", "mbko", "pm_mbko", "imm_mbko")


class ObserverAdapter:
    """
    Uniform per-tick interface over the four observers. Force-only baselines get
    their mode from cone membership of the force estimate.
    """

    def __init__(self, name: str, observer, tracker: Optional[ConeModeTracker] = None):
        self.name = name
        self.observer = observer
        self.tracker = tracker

    def reset(self):
        self.observer.reset()
        if self.tracker is not None:
            self.tracker.reset()

    def step(
        self, inp: ObserverInput, dt: float
    ) -> Tuple[np.ndarray, np.ndarray, ContactMode, Optional[np.ndarray]]:
        """Returns (f_hat, p_hat, mode, mu); mu is None for the baselines"""
        if isinstance(self.observer, ImmEstimator):
            out = self.observer.step(inp, dt)
            return out.f_ext_hat, out.p_hat, out.mode, out.mu
        est = self.observer.step(inp, dt)
        return est.f_ext_hat, est.p_hat, self.tracker.step(est.f_ext_hat), None


def make_observer(name: str, cfg: Optional[EstimatorConfig] = None) -> ObserverAdapter:
    cfg = cfg or EstimatorConfig()
    if name == "imm_mbko":
        return ObserverAdapter(name, ImmEstimator(cfg))
    if name == "fo_mbo":
        observer = FoMbo(gain=cfg.fo_mbo_gain)
    elif name == "mbko":
        observer = Mbko(cfg.noise, p0_variance=cfg.p0_variance, f0_variance=cfg.f0_variance)
    elif name == "pm_mbko":
        observer = PmMbko(
            cfg.noise,
            force_variance=cfg.pm_force_variance,
            p0_variance=cfg.p0_variance,
            f0_variance=cfg.f0_variance,
        )
    else:
        raise ValueError(f"Unknown observer '{name}', expected one of {', '.join(OBSERVER_NAMES)}")
    return ObserverAdapter(name, observer, ConeModeTracker(cfg.cones(), cfg.threshold, cfg.dwell_ticks))


class BatchConfig(BaseModel):
    n_scenarios: int = 10
    n_collisions: int = 5
    seed: int = 0
    mass_scale: float = 1.0
    observers: List[str] = Field(default_factory=lambda: list(OBSERVER_NAMES))
    workers: int = 1
    post_window: float = POST_WINDOW

    @field_validator("observers")
    @classmethod
    def check_observers(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in OBSERVER_NAMES]
        if unknown:
            raise ValueError(f"unknown observers: {unknown}")
        if not value:
            raise ValueError("at least one observer is required")
        return value

    @field_validator("n_scenarios", "workers")
    @classmethod
    def check_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    def scenarios(self) -> List[Scenario]:
        return default_batch(self.n_scenarios, self.n_collisions, self.seed, self.mass_scale)


@dataclass
class ObserverRun:
    observer: str
    f_hat: np.ndarray
    modes: List[ContactMode]
    p_hat: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None
    diverged: bool = False


def run_observer(name: str, inputs: Sequence[ObserverInput], dt: float, cfg: Optional[EstimatorConfig] = None) -> ObserverRun:
    """Feed prepared inputs through one observer; numerical failure marks the run diverged"""
    adapter = make_observer(name, cfg)
    adapter.reset()
    forces, momenta, modes, mus = [], [], [], []
    try:
        for inp in inputs:
            f_hat, p_hat, mode, mu = adapter.step(inp, dt)
            if not np.all(np.isfinite(f_hat)):
                raise FloatingPointError(f"non-finite force estimate at t={inp.t:.3f}")
            forces.append(f_hat)
            momenta.append(p_hat)
            modes.append(mode)
            mus.append(mu)
    except (InvalidMeasurementError, SingularDynamicsError, FloatingPointError, np.linalg.LinAlgError) as e:
        logger.error(f"Observer {name} diverged: {e}")
        return ObserverRun(observer=name, f_hat=np.zeros((0, 3)), modes=[], diverged=True)
    mu = np.array(mus) if mus and mus[0] is not None else None
    return ObserverRun(observer=name, f_hat=np.array(forces), modes=modes, p_hat=np.array(momenta), mu=mu)


def prepare_inputs(trace: ScenarioTrace, model_hat: LegModel) -> List[ObserverInput]:
    return [prepare_input(model_hat, reading) for reading in trace.readings()]


def run_benchmark(
    observers: Sequence[str],
    scenarios: Sequence[Scenario],
    model: Optional[LegModel] = None,
    cfg: Optional[EstimatorConfig] = None,
    workers: int = 1,
    post_window: float = POST_WINDOW,
    cancelled: Optional[Callable[[], bool]] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> BenchReport:
    """
    Simulate every scenario once and run each observer on the same noisy
    readings. Scenarios fan out over ``workers`` threads; results merge in
    scenario order so the report is independent of scheduling.
    """
    if not scenarios:
        raise ValueError("run_benchmark needs at least one scenario")
    model = model or default_leg()
    cfg = cfg or EstimatorConfig()
    tallies = {name: ObserverTally(name) for name in observers}

    def work(indexed: Tuple[int, Scenario]):
        index, scenario = indexed
        if cancelled is not None and cancelled():
            return None
        try:
            trace = simulate(scenario, model)
        except SimulationDivergedError as e:
            logger.error(f"Scenario {index} (seed {scenario.seed}) diverged at tick {e.tick}, skipping")
            return None
        inputs = prepare_inputs(trace, with_mismatch(model, scenario.model_mismatch.mass_scale))
        runs = [run_observer(name, inputs, scenario.dt, cfg) for name in observers]
        if progress is not None:
            progress(f"Scenario {index + 1}/{len(scenarios)} done")
        return trace, runs

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, enumerate(scenarios)))

    for scenario, result in zip(scenarios, results):
        if result is None:
            continue
        trace, runs = result
        for run in runs:
            tally = tallies[run.observer]
            if run.diverged:
                tally.add_divergence(trace.mode, scenario.dt)
            else:
                tally.add_trace(run.f_hat, trace.f_ext, trace.mode, run.modes, scenario.dt, post_window)
    return BenchReport(observers=[tallies[name].row() for name in observers])


class BenchService:
    def __init__(self):
        self.active_sessions = {}  # session_id -> session_data
        self.output_queues = {}  # session_id -> Queue
        self.cancelled_sessions = set()

    def start_benchmark(self, batch: BatchConfig, cfg: Optional[EstimatorConfig] = None) -> str:
        """
        Start a benchmark run in a background thread and return its session ID
        """
        try:
            session_id = f"bench_{batch.seed}_{int(time.time() * 1000)}_{len(self.active_sessions)}"
            self.cancelled_sessions.discard(session_id)
            self.output_queues[session_id] = queue.Queue()
            self.active_sessions[session_id] = {
                "batch": batch.model_dump(),
                "status": "starting",
                "start_time": datetime.now(),
                "output": [],
                "report": None,
            }
            thread = threading.Thread(target=self._run_session, args=(session_id, batch, cfg), daemon=True)
            thread.start()
            logger.info(f"Started benchmark session {session_id}")
            return session_id
        except Exception as e:
            logger.error(f"Failed to start benchmark: {e}")
            raise

    def _run_session(self, session_id: str, batch: BatchConfig, cfg: Optional[EstimatorConfig]):
        try:
            if self.active_sessions[session_id]["status"] == "starting":
                self.active_sessions[session_id]["status"] = "running"
            scenarios = batch.scenarios()
            self._add_output(
                session_id, f"Running {len(batch.observers)} observers on {len(scenarios)} scenarios"
            )
            report = run_benchmark(
                batch.observers,
                scenarios,
                cfg=cfg,
                workers=batch.workers,
                post_window=batch.post_window,
                cancelled=lambda: session_id in self.cancelled_sessions,
                progress=lambda message: self._add_output(session_id, message),
            )
            if session_id in self.cancelled_sessions:
                self._add_output(session_id, "Benchmark cancelled by user")
                logger.info(f"Benchmark cancelled by user for {session_id}")
                return
            self.active_sessions[session_id]["report"] = report.to_dict()
            self._add_output(session_id, report.to_table())
            self._add_output(session_id, "Benchmark completed successfully!")
            self.active_sessions[session_id]["status"] = "completed"
        except Exception as e:
            logger.error(f"Benchmark error for {session_id}: {e}")
            if session_id in self.active_sessions:
                self._add_output(session_id, f"Benchmark failed: {str(e)}")
                self.active_sessions[session_id]["error"] = str(e)
                self.active_sessions[session_id]["status"] = "failed"

    def _add_output(self, session_id: str, message: str):
        if session_id in self.output_queues:
            output_data = {"timestamp": datetime.now().isoformat(), "message": message}
            self.output_queues[session_id].put(output_data)
            if session_id in self.active_sessions:
                self.active_sessions[session_id]["output"].append(message)
        else:
            logger.error(f"No output queue found for {session_id}")

    def stop_benchmark(self, session_id: str) -> bool:
        if session_id not in self.active_sessions:
            logger.warning(f"No benchmark session found for {session_id}")
            return False
        self.cancelled_sessions.add(session_id)
        session = self.active_sessions[session_id]
        if session["status"] in ("starting", "running"):
            session["status"] = "cancelled"
        logger.info(f"Marked session {session_id} as cancelled")
        return True

    def get_status(self, session_id: str) -> Optional[Dict]:
        session = self.active_sessions.get(session_id)
        if session is None:
            return None
        return {
            "session_id": session_id,
            "status": session["status"],
            "start_time": session["start_time"].isoformat(),
            "output": list(session["output"]),
            "report": session["report"],
            "error": session.get("error"),
        }

    async def is_running(self, session_id: str) -> bool:
        if session_id not in self.active_sessions:
            return False
        return self.active_sessions[session_id]["status"] in ["starting", "running"]

    async def get_all_output(self, session_id: str) -> List[str]:
        if session_id not in self.output_queues:
            return []
        outputs = []
        while not self.output_queues[session_id].empty():
            outputs.append(self.output_queues[session_id].get()["message"])
        return outputs


# Global instance
bench_service = BenchService()
