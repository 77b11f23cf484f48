import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from imm_bench.momentum_observers import ContactMode
from imm_bench.scenario_sim import ScenarioTrace

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
AXES = ("x", "y", "z")
MODE_NAMES = {ContactMode.SWING: "swing", ContactMode.STANCE: "stance", ContactMode.COLLISION: "collision"}

# (trace field, column prefix, joint-indexed or per-axis)
TRACE_LAYOUT = [
    ("q", "q", "joint"),
    ("qd", "qd", "joint"),
    ("qdd", "qdd", "joint"),
    ("tau_m", "tau_m", "joint"),
    ("f_ext", "f", "axis"),
    ("mode", "mode_true", None),
    ("foot_pos", "foot", "axis"),
    ("foot_vel", "foot_v", "axis"),
    ("q_meas", "q_meas", "joint"),
    ("qd_meas", "qd_meas", "joint"),
    ("tau_meas", "tau_meas", "joint"),
    ("acc_cmd", "acc_cmd", "axis"),
]


class TraceFormatError(ValueError):
    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


def _columns(prefix: str, kind: Optional[str], n_dof: int) -> List[str]:
    if kind == "joint":
        return [f"{prefix}_{i}" for i in range(n_dof)]
    if kind == "axis":
        return [f"{prefix}_{a}" for a in AXES]
    return [prefix]


def trace_columns(n_dof: int) -> List[str]:
    columns = ["t"]
    for _, prefix, kind in TRACE_LAYOUT:
        columns.extend(_columns(prefix, kind, n_dof))
    return columns


def _cell(value: float) -> str:
    return repr(float(value))


def write_trace_csv(trace: ScenarioTrace, path: Union[str, Path]) -> Path:
    """Write a trace with the fixed column order; floats keep full precision"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_dof = trace.q.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(trace_columns(n_dof))
        for k in range(len(trace)):
            row = [_cell(trace.t[k])]
            for name, _, kind in TRACE_LAYOUT:
                value = getattr(trace, name)[k]
                if kind is None:
                    row.append(str(int(value)))
                else:
                    row.extend(_cell(v) for v in value)
            writer.writerow(row)
    logger.info(f"Wrote {len(trace)} trace rows to {path}")
    return path


def read_trace_csv(path: Union[str, Path]) -> ScenarioTrace:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise TraceFormatError(1, "empty file")
    header = rows[0]
    n_dof = sum(1 for c in header if c.startswith("q_") and c[2:].isdigit())
    if n_dof == 0 or header != trace_columns(n_dof):
        raise TraceFormatError(1, "unexpected header")

    data = {name: [] for name, _, _ in TRACE_LAYOUT}
    times = []
    for number, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise TraceFormatError(number, f"expected {len(header)} cells, found {len(row)}")
        try:
            times.append(float(row[0]))
            pos = 1
            for name, prefix, kind in TRACE_LAYOUT:
                width = len(_columns(prefix, kind, n_dof))
                cells = row[pos : pos + width]
                if kind is None:
                    data[name].append(int(ContactMode(int(cells[0]))))
                else:
                    data[name].append([float(c) for c in cells])
                pos += width
        except ValueError as e:
            raise TraceFormatError(number, str(e)) from e
    return ScenarioTrace(t=np.array(times), **{name: np.array(values) for name, values in data.items()})


@dataclass
class EstimateRecord:
    t: float
    f_hat: np.ndarray
    p_hat: np.ndarray
    mode: ContactMode
    mu: Optional[np.ndarray] = None


def estimate_columns(n_dof: int) -> List[str]:
    return [
        "t",
        *_columns("fhat", "axis", n_dof),
        *_columns("p_hat", "joint", n_dof),
        *(f"mu_{MODE_NAMES[mode]}" for mode in ContactMode),
        "mode",
    ]


def write_estimates_csv(records: Sequence[EstimateRecord], path: Union[str, Path]) -> Path:
    """Estimator output; the mu columns stay blank for observers without mode probabilities"""
    if not records:
        raise ValueError("no estimate records to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_dof = len(records[0].p_hat)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(estimate_columns(n_dof))
        for r in records:
            mu = [_cell(v) for v in r.mu] if r.mu is not None else ["", "", ""]
            writer.writerow(
                [_cell(r.t), *(_cell(v) for v in r.f_hat), *(_cell(v) for v in r.p_hat), *mu, MODE_NAMES[r.mode]]
            )
    return path


def read_estimates_csv(path: Union[str, Path]) -> List[EstimateRecord]:
    names = {v: k for k, v in MODE_NAMES.items()}
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None) or []
        n_dof = sum(1 for c in header if c.startswith("p_hat_"))
        if n_dof == 0 or header != estimate_columns(n_dof):
            raise TraceFormatError(1, "unexpected header")
        mu_at = 4 + n_dof
        for number, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise TraceFormatError(number, f"expected {len(header)} cells, found {len(row)}")
            try:
                mu = None if row[mu_at] == "" else np.array([float(v) for v in row[mu_at : mu_at + 3]])
                records.append(
                    EstimateRecord(
                        t=float(row[0]),
                        f_hat=np.array([float(v) for v in row[1:4]]),
                        p_hat=np.array([float(v) for v in row[4:mu_at]]),
                        mode=names[row[-1]],
                        mu=mu,
                    )
                )
            except (ValueError, KeyError) as e:
                raise TraceFormatError(number, f"bad value: {e}") from e
    return records


def config_hash(config: Union[BaseModel, Dict[str, Any]]) -> str:
    """sha256 of the canonical JSON form of a config"""
    data = config.model_dump(mode="json") if isinstance(config, BaseModel) else config
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_metadata(path: Union[str, Path], seed: Optional[int], configs: Dict[str, BaseModel], **extra) -> Path:
    """The seed field is left out when the run has no seed of its own"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        **({"seed": seed} if seed is not None else {}),
        "rng": "numpy.random.default_rng (PCG64)",
        "config_hashes": {name: config_hash(cfg) for name, cfg in configs.items()},
        **extra,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def read_trace_seed(trace_path: Union[str, Path]) -> Optional[int]:
    """Seed recorded in the trace_meta.json beside a trace, if there is one"""
    meta = Path(trace_path).with_name("trace_meta.json")
    if not meta.exists():
        return None
    try:
        seed = json.loads(meta.read_text()).get("seed")
    except (json.JSONDecodeError, AttributeError) as e:
        logger.warning(f"Ignoring unreadable trace metadata {meta}: {e}")
        return None
    return int(seed) if seed is not None else None
