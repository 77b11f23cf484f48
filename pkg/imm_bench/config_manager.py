import json
import logging
import os
from pathlib import Path
from typing import Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

ENV_OUTPUT_DIR = "IMM_BENCH_OUTPUT_DIR"
ENV_WORKERS = "IMM_BENCH_WORKERS"
ENV_LOG_LEVEL = "IMM_BENCH_LOG_LEVEL"

# Global run settings shared by the CLI, services and the server
run_settings = {
    "output_dir": "results",
    "workers": 1,
    "log_level": "INFO",
}


class ConfigError(ValueError):
    """Unreadable or invalid configuration file"""


def set_run_settings(output_dir: str = None, workers: int = None, log_level: str = None):
    """
    Store run settings globally and export them to the current process environment
    """
    global run_settings
    if output_dir:
        run_settings["output_dir"] = output_dir
        os.environ[ENV_OUTPUT_DIR] = output_dir
    if workers:
        if workers < 1:
            raise ConfigError(f"workers must be at least 1, got {workers}")
        run_settings["workers"] = workers
        os.environ[ENV_WORKERS] = str(workers)
    if log_level:
        run_settings["log_level"] = log_level.upper()
        os.environ[ENV_LOG_LEVEL] = log_level.upper()


def get_run_settings():
    """
    Current run settings; the system environment wins over stored values
    """
    system_output_dir = os.environ.get(ENV_OUTPUT_DIR, "")
    system_workers = os.environ.get(ENV_WORKERS, "")
    system_log_level = os.environ.get(ENV_LOG_LEVEL, "")

    workers = run_settings["workers"]
    if system_workers:
        try:
            workers = max(1, int(system_workers))
        except ValueError:
            logger.warning(f"Ignoring non-integer {ENV_WORKERS}={system_workers!r}")
            system_workers = ""

    return {
        "output_dir": system_output_dir or run_settings["output_dir"],
        "workers": workers,
        "log_level": (system_log_level or run_settings["log_level"]).upper(),
        "source": "system" if system_output_dir or system_workers or system_log_level else "stored",
    }


def load_config(path: Union[str, Path], model: Type[ModelT]) -> ModelT:
    """
    Parse a JSON file into a pydantic model. Every failure becomes a ConfigError
    naming the file and, for validation problems, the offending field.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read {path}: {e}") from e
    try:
        return model.model_validate(json.loads(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(f"{path}: field '{field}': {first['msg']}") from e


def save_config(path: Union[str, Path], config: BaseModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2))
    return path
