import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from imm_bench.bench_service import OBSERVER_NAMES, BatchConfig, prepare_inputs, run_benchmark, run_observer
from imm_bench.config_manager import ConfigError, get_run_settings, load_config, set_run_settings
from imm_bench.imm_estimator import EstimatorConfig
from imm_bench.leg_dynamics import LegModel, default_leg, with_mismatch
from imm_bench.reactive_control import ControlConfig, ControlScenario, ReactiveSwingController, run_ab_control
from imm_bench.scenario_sim import SimulationDivergedError, default_scenario, simulate
from imm_bench.trace_io import (
    EstimateRecord,
    TraceFormatError,
    read_trace_csv,
    read_trace_seed,
    write_estimates_csv,
    write_metadata,
    write_trace_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Bad command-line input that argparse cannot catch on its own"""


def parse_observers(value: Optional[str]) -> List[str]:
    if not value:
        return list(OBSERVER_NAMES)
    names = [name.strip() for name in value.split(",") if name.strip()]
    unknown = [name for name in names if name not in OBSERVER_NAMES]
    if unknown or not names:
        raise UsageError(f"Unknown observer(s) {unknown}; valid names: {', '.join(OBSERVER_NAMES)}")
    return names


def _load_model(path: Optional[str]) -> LegModel:
    return load_config(path, LegModel) if path else default_leg()


def _load_estimator(path: Optional[str]) -> EstimatorConfig:
    return load_config(path, EstimatorConfig) if path else EstimatorConfig()


def _output_dir(args) -> Path:
    out = Path(args.out or get_run_settings()["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    model = _load_model(args.model)
    if args.scenario:
        scenario = load_config(args.scenario, ControlScenario)
    else:
        scenario = ControlScenario(**default_scenario().model_dump())
    if args.seed is not None:
        scenario = scenario.model_copy(update={"seed": args.seed})

    controller = None
    if args.controller:
        control = scenario.control.model_copy(update={"controller": args.controller})
        controller = ReactiveSwingController(model, scenario, control)

    trace = simulate(scenario, model, controller)
    out = _output_dir(args)
    write_trace_csv(trace, out / "trace.csv")
    write_metadata(
        out / "trace_meta.json",
        scenario.seed,
        {"scenario": scenario, "model": model},
        command="simulate",
        controller=args.controller or "pd",
        ticks=len(trace),
    )
    print(f"Wrote {len(trace)} ticks to {out / 'trace.csv'}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    observers = parse_observers(args.observers)
    model_hat = with_mismatch(_load_model(args.model), args.mass_scale)
    cfg = _load_estimator(args.estimator_config)
    trace = read_trace_csv(args.trace)
    if len(trace) < 2:
        raise UsageError(f"{args.trace} holds fewer than two ticks")

    inputs = prepare_inputs(trace, model_hat)
    out = _output_dir(args)
    exit_code = EXIT_OK
    for name in observers:
        run = run_observer(name, inputs, trace.dt, cfg)
        if run.diverged:
            logger.error(f"Observer {name} diverged on {args.trace}")
            exit_code = EXIT_DIVERGED
            continue
        records = [
            EstimateRecord(
                t=float(trace.t[k]),
                f_hat=run.f_hat[k],
                p_hat=run.p_hat[k],
                mode=run.modes[k],
                mu=run.mu[k] if run.mu is not None else None,
            )
            for k in range(len(trace))
        ]
        path = write_estimates_csv(records, out / f"estimates_{name}.csv")
        print(f"{name}: {path}")
    write_metadata(
        out / "estimates_meta.json",
        read_trace_seed(args.trace),
        {"estimator": cfg},
        command="estimate",
        observers=observers,
    )
    return exit_code


def _batch_from_args(args, observers: Sequence[str]) -> BatchConfig:
    if getattr(args, "batch", None):
        batch = load_config(args.batch, BatchConfig)
        update = {"observers": list(observers)} if args.observers else {}
    else:
        batch = BatchConfig(
            n_scenarios=args.n_scenarios,
            n_collisions=args.n_collisions,
            mass_scale=args.mass_scale,
            observers=list(observers),
        )
        update = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.workers is not None:
        update["workers"] = args.workers
    else:
        update["workers"] = get_run_settings()["workers"]
    return BatchConfig.model_validate({**batch.model_dump(), **update})


def cmd_bench(args) -> int:
    observers = parse_observers(args.observers)
    batch = _batch_from_args(args, observers)
    model = _load_model(args.model)
    cfg = _load_estimator(args.estimator_config)
    scenarios = batch.scenarios()
    if not scenarios:
        raise UsageError("the scenario batch is empty")

    report = run_benchmark(
        batch.observers, scenarios, model, cfg, workers=batch.workers, post_window=batch.post_window
    )
    out = _output_dir(args)
    (out / "observer_report.csv").write_text(report.to_csv())
    write_metadata(out / "bench_meta.json", batch.seed, {"batch": batch, "estimator": cfg, "model": model}, command="bench")
    print(report.to_table())
    if any(row.diverged for row in report.observers):
        logger.error("At least one observer diverged")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_ab_control(args) -> int:
    model = _load_model(args.model)
    control = load_config(args.control_config, ControlConfig) if args.control_config else ControlConfig()
    if args.estimator_config:
        control = control.model_copy(update={"estimator": _load_estimator(args.estimator_config)})
    batch = _batch_from_args(args, list(OBSERVER_NAMES))
    controllers = [args.controller] if args.controller else ["ac", "osc"]

    report = run_ab_control(batch.scenarios(), model, control, controllers, workers=batch.workers)
    out = _output_dir(args)
    (out / "controller_report.csv").write_text(report.to_csv())
    write_metadata(
        out / "ab_control_meta.json", batch.seed, {"batch": batch, "control": control, "model": model}, command="ab-control"
    )
    print(report.to_table())
    if any("diverged" in row.controller for row in report.controllers):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("imm_bench.main:app", host=args.host, port=args.port)
    return EXIT_OK


def _add_batch_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--batch", help="BatchConfig JSON; flags below override its seed and workers")
    parser.add_argument("--n-scenarios", type=int, default=10, help="number of scripted scenarios")
    parser.add_argument("--n-collisions", type=int, default=5, help="obstacles per scenario")
    parser.add_argument("--mass-scale", type=float, default=1.0, help="link mass factor of the observer's model")
    parser.add_argument("--workers", type=int, default=None, help="worker threads (default from run settings)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imm-bench", description="Contact-mode classification and external force estimation benchmark"
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="LegModel JSON (default: built-in 3-DoF leg)")
    common.add_argument("--out", help="output directory (default from run settings)")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")

    p = sub.add_parser("simulate", parents=[common], help="roll out a scenario and write its trace")
    p.add_argument("--scenario", help="Scenario JSON (default: two seconds with two obstacles)")
    p.add_argument("--controller", choices=["ac", "osc"], default=None, help="reactive swing controller instead of PD")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[common], help="replay a trace through observers")
    p.add_argument("--trace", required=True, help="trace CSV written by simulate")
    p.add_argument("--estimator-config", help="EstimatorConfig JSON")
    p.add_argument("--observers", help=f"comma-separated subset of {','.join(OBSERVER_NAMES)}")
    p.add_argument("--mass-scale", type=float, default=1.0, help="link mass factor of the observer's model")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", parents=[common], help="observer benchmark over a scenario batch")
    p.add_argument("--estimator-config", help="EstimatorConfig JSON")
    p.add_argument("--observers", help=f"comma-separated subset of {','.join(OBSERVER_NAMES)}")
    _add_batch_arguments(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ab-control", parents=[common], help="admittance vs operational-space control comparison")
    p.add_argument("--control-config", help="ControlConfig JSON")
    p.add_argument("--estimator-config", help="EstimatorConfig JSON for the in-loop estimator")
    p.add_argument("--controller", choices=["ac", "osc"], default=None, help="run one controller only")
    p.set_defaults(observers=None)
    _add_batch_arguments(p)
    p.set_defaults(func=cmd_ab_control)

    p = sub.add_parser("serve", help="start the HTTP benchmark server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        set_run_settings(log_level=args.log_level)
    logging.basicConfig(level=get_run_settings()["log_level"])
    logging.getLogger().setLevel(get_run_settings()["log_level"])

    try:
        return args.func(args)
    except (ConfigError, TraceFormatError, UsageError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationDivergedError as e:
        print(f"error: simulation diverged at tick {e.tick}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
