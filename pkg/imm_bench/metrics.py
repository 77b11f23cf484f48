import csv
import io
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from imm_bench.momentum_observers import ContactMode

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

POST_COLLISION = "post_collision"
EARLY_WINDOW = 0.010
POST_WINDOW = 0.100

OBSERVER_COLUMNS = [
    "Observer",
    "Success/Total",
    "False positive",
    "False negative",
    "Delay (ms)",
    "Abs error (%)",
    "Swing RMSE (N)",
    "Post-collision RMSE (N)",
]
CONTROLLER_COLUMNS = [
    "Controller",
    "Total collisions",
    "Average Duration (s)",
    "Velocity RMSE",
    "Average Impulse (Ns)",
]


@dataclass
class DetectionEvent:
    truth_start: float
    truth_end: float
    detected_at: Optional[float] = None
    delay: Optional[float] = None

    @property
    def success(self) -> bool:
        return self.detected_at is not None


@dataclass
class DetectionSummary:
    events: List[DetectionEvent]
    false_positives: int

    @property
    def total(self) -> int:
        return len(self.events)

    @property
    def success(self) -> int:
        return sum(1 for e in self.events if e.success)

    @property
    def false_negatives(self) -> int:
        return self.total - self.success

    @property
    def delays(self) -> List[float]:
        return [e.delay for e in self.events if e.delay is not None]


def mode_episodes(modes: Sequence, target: ContactMode = ContactMode.COLLISION) -> List[Tuple[int, int]]:
    """Maximal runs of ``target`` as [start, end) tick ranges"""
    flags = np.asarray([int(m) == int(target) for m in modes], dtype=np.int8)
    if flags.size == 0:
        return []
    edges = np.diff(np.concatenate([[0], flags, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), ends.tolist()))


def match_detections(
    mode_true: Sequence, mode_est: Sequence, dt: float, early_window: float = EARLY_WINDOW
) -> DetectionSummary:
    """
    Match every true collision episode with the first estimated Collision tick
    inside it, or up to ``early_window`` seconds before it. Estimated runs that
    touch no such window count as false positives, one per run.
    """
    if len(mode_true) != len(mode_est):
        raise ValueError(f"Mode sequences differ in length: {len(mode_true)} vs {len(mode_est)}")
    early = int(round(early_window / dt))
    estimated = np.asarray([int(m) == ContactMode.COLLISION for m in mode_est], dtype=bool)
    truth = mode_episodes(mode_true)

    events = []
    windows = []
    for start, end in truth:
        lo = max(0, start - early)
        windows.append((lo, end))
        hits = np.flatnonzero(estimated[lo:end])
        if hits.size:
            tick = lo + int(hits[0])
            events.append(DetectionEvent(start * dt, end * dt, tick * dt, max(0, tick - start) * dt))
        else:
            events.append(DetectionEvent(start * dt, end * dt))

    false_positives = 0
    for run_start, run_end in mode_episodes(mode_est):
        if not any(run_start < hi and lo < run_end for lo, hi in windows):
            false_positives += 1
    return DetectionSummary(events=events, false_positives=false_positives)


def force_abs_error(f_hat, f_true, window: Tuple[int, int]) -> Optional[float]:
    """
    Percent error of the estimated force magnitude at the tick of peak true
    force inside ``window``. None when the true force vanishes there.
    """
    f_hat = np.asarray(f_hat, dtype=float)
    f_true = np.asarray(f_true, dtype=float)
    start, end = window
    norms = np.linalg.norm(f_true[start:end], axis=1)
    if norms.size == 0 or norms.max() == 0.0:
        logger.warning(f"Zero true force over ticks [{start}, {end}), skipping force error")
        return None
    tick = start + int(np.argmax(norms))
    ratio = np.linalg.norm(f_hat[tick]) / norms[tick - start]
    return float(abs((ratio - 1.0) * 100.0))


def phase_mask(
    mode_true: Sequence, phase: Union[ContactMode, str], dt: float = 0.001, post_window: float = POST_WINDOW
) -> np.ndarray:
    modes = np.asarray([int(m) for m in mode_true])
    if phase != POST_COLLISION:
        return modes == int(phase)
    mask = np.zeros(len(modes), dtype=bool)
    width = int(round(post_window / dt))
    for _, end in mode_episodes(modes):
        mask[end : end + width] = True
    return mask & (modes != ContactMode.COLLISION)


def squared_error_sum(f_hat, f_true, mask: np.ndarray) -> Tuple[float, int]:
    err = np.asarray(f_hat, dtype=float)[mask] - np.asarray(f_true, dtype=float)[mask]
    return float(np.sum(err * err)), int(mask.sum())


def phase_rmse(
    f_hat,
    f_true,
    mode_true: Sequence,
    phase: Union[ContactMode, str],
    dt: float = 0.001,
    post_window: float = POST_WINDOW,
) -> Optional[float]:
    """Vector RMSE over the ticks of one phase, or None when the phase is empty"""
    total, count = squared_error_sum(f_hat, f_true, phase_mask(mode_true, phase, dt, post_window))
    if count == 0:
        return None
    return float(np.sqrt(total / count))


def impulse_and_duration(f_true, mode_true: Sequence, dt: float) -> Tuple[float, float, int]:
    """Average impulse and duration of the true collision episodes, plus their count"""
    f_true = np.asarray(f_true, dtype=float)
    episodes = mode_episodes(mode_true)
    if not episodes:
        return 0.0, 0.0, 0
    impulses = [float(np.sum(np.linalg.norm(f_true[s:e], axis=1)) * dt) for s, e in episodes]
    durations = [(e - s) * dt for s, e in episodes]
    return float(np.mean(impulses)), float(np.mean(durations)), len(episodes)


@dataclass
class ObserverTally:
    """Running totals for one observer across scenarios"""

    observer: str
    success: int = 0
    total: int = 0
    false_positive: int = 0
    delays: List[float] = field(default_factory=list)
    abs_errors: List[float] = field(default_factory=list)
    swing_sq: float = 0.0
    swing_n: int = 0
    post_sq: float = 0.0
    post_n: int = 0
    diverged: bool = False

    def add_trace(self, f_hat, f_true, mode_true, mode_est, dt: float, post_window: float = POST_WINDOW) -> None:
        summary = match_detections(mode_true, mode_est, dt)
        self.success += summary.success
        self.total += summary.total
        self.false_positive += summary.false_positives
        self.delays.extend(summary.delays)
        for window in mode_episodes(mode_true):
            error = force_abs_error(f_hat, f_true, window)
            if error is not None:
                self.abs_errors.append(error)
        sq, n = squared_error_sum(f_hat, f_true, phase_mask(mode_true, ContactMode.SWING, dt))
        self.swing_sq += sq
        self.swing_n += n
        sq, n = squared_error_sum(f_hat, f_true, phase_mask(mode_true, POST_COLLISION, dt, post_window))
        self.post_sq += sq
        self.post_n += n

    def add_divergence(self, mode_true, dt: float) -> None:
        """A diverged run misses every collision of its scenario"""
        self.diverged = True
        self.total += len(mode_episodes(mode_true))

    def row(self) -> "ObserverRow":
        return ObserverRow(
            observer=self.observer,
            success=self.success,
            total=self.total,
            false_positive=self.false_positive,
            false_negative=self.total - self.success,
            mean_delay_ms=float(np.mean(self.delays) * 1e3) if self.delays else None,
            abs_error_pct=float(np.mean(self.abs_errors)) if self.abs_errors else None,
            swing_rmse_n=float(np.sqrt(self.swing_sq / self.swing_n)) if self.swing_n else None,
            post_collision_rmse_n=float(np.sqrt(self.post_sq / self.post_n)) if self.post_n else None,
            diverged=self.diverged,
        )


@dataclass
class ObserverRow:
    observer: str
    success: int
    total: int
    false_positive: int
    false_negative: int
    mean_delay_ms: Optional[float] = None
    abs_error_pct: Optional[float] = None
    swing_rmse_n: Optional[float] = None
    post_collision_rmse_n: Optional[float] = None
    diverged: bool = False

    def cells(self) -> List[str]:
        name = f"{self.observer} (diverged)" if self.diverged else self.observer
        return [
            name,
            f"{self.success}/{self.total}",
            str(self.false_positive),
            str(self.false_negative),
            _fmt(self.mean_delay_ms, 2),
            _fmt(self.abs_error_pct, 2),
            _fmt(self.swing_rmse_n, 3),
            _fmt(self.post_collision_rmse_n, 3),
        ]


@dataclass
class ControllerRow:
    controller: str
    total_collisions: int
    avg_duration_s: float
    velocity_rmse: Optional[float]
    avg_impulse_ns: float

    def cells(self) -> List[str]:
        return [
            self.controller,
            str(self.total_collisions),
            _fmt(self.avg_duration_s, 4),
            _fmt(self.velocity_rmse, 4),
            _fmt(self.avg_impulse_ns, 4),
        ]


@dataclass
class BenchReport:
    observers: List[ObserverRow] = field(default_factory=list)
    controllers: List[ControllerRow] = field(default_factory=list)

    def row(self, observer: str) -> ObserverRow:
        for row in self.observers:
            if row.observer == observer:
                return row
        raise KeyError(observer)

    def to_dict(self) -> dict:
        return {
            "observers": [dict(zip(OBSERVER_COLUMNS, r.cells())) for r in self.observers],
            "controllers": [dict(zip(CONTROLLER_COLUMNS, r.cells())) for r in self.controllers],
        }

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        if self.observers:
            writer.writerow(OBSERVER_COLUMNS)
            for row in self.observers:
                writer.writerow(row.cells())
        if self.controllers:
            if self.observers:
                writer.writerow([])
            writer.writerow(CONTROLLER_COLUMNS)
            for row in self.controllers:
                writer.writerow(row.cells())
        return buffer.getvalue()

    def to_table(self) -> str:
        blocks = []
        if self.observers:
            blocks.append(_align(OBSERVER_COLUMNS, [r.cells() for r in self.observers]))
        if self.controllers:
            blocks.append(_align(CONTROLLER_COLUMNS, [r.cells() for r in self.controllers]))
        return "\n\n".join(blocks)


def _fmt(value: Optional[float], digits: int) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def _align(header: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(cell) for cell in column) for column in zip(header, *rows)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines)
