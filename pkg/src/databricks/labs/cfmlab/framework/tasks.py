import contextlib
import logging
import os
from collections.abc import Callable
from dataclasses import dataclass
from functools import wraps
from pathlib import Path

from databricks.labs.blueprint.logger import install_logger

from databricks.labs.cfmlab.__about__ import __version__
from databricks.labs.cfmlab.config import EXPERIMENTS, ExperimentConfig, load_config
from databricks.labs.cfmlab.errors import ConfigError

_TASKS: dict[str, "Task"] = {}

CONFIGS = Path(__file__).parent.parent / "configs"
DEFAULT_OUTPUT = "cfmlab-out"
OUTPUT_ENV = "CFMLAB_OUT"


@dataclass
class RunContext:
    output: Path
    threads: int


@dataclass
class Task:
    task_id: int
    name: str
    doc: str
    fn: Callable[[ExperimentConfig, RunContext], None]


def remove_extra_indentation(doc: str) -> str:
    lines = doc.splitlines()
    stripped = []
    for line in lines:
        if line.startswith(" " * 4):
            stripped.append(line[4:])
        else:
            stripped.append(line)
    return "\n".join(stripped)


def task(name: str):
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            logger = logging.getLogger(func.__name__)
            logger.info(f"Task '{name}' is starting...")
            result = func(*args, **kwargs)
            logger.info(f"Task '{name}' is completed!")
            return result

        if name not in EXPERIMENTS:
            msg = f"Task {func.__name__} registers unknown subcommand {name}"
            raise SyntaxError(msg)
        if not func.__doc__:
            msg = f"Task {func.__name__} must have documentation"
            raise SyntaxError(msg)

        _TASKS[name] = Task(
            task_id=len(_TASKS),
            name=name,
            doc=remove_extra_indentation(func.__doc__),
            fn=wrapper,
        )

        return wrapper

    return decorator


def tasks() -> dict[str, Task]:
    return dict(_TASKS)


class TaskLogger(contextlib.AbstractContextManager):
    def __init__(self, output: Path, task_name: str, run_id: str, log_level="INFO"):
        self._log_level = log_level
        self._task_name = task_name
        self._run_id = run_id
        self._databricks_logger = logging.getLogger("databricks")
        self._app_logger = logging.getLogger("databricks.labs.cfmlab")
        self._log_path = output / "logs" / task_name / f"run-{run_id}"
        self.log_file = self._log_path / f"{task_name}.log"

    def __repr__(self):
        return self.log_file.as_posix()

    def __enter__(self):
        self._log_path.mkdir(parents=True, exist_ok=True)
        self._init_debug_logfile()
        self._init_run_readme()
        self._databricks_logger.setLevel(logging.DEBUG)
        self._app_logger.setLevel(logging.DEBUG)
        console_handler = install_logger(self._log_level)
        self._databricks_logger.removeHandler(console_handler)
        self._databricks_logger.addHandler(self._file_handler)
        self._app_logger.info(f"cfmlab v{__version__} debug logs at {self.log_file}")
        return self

    def __exit__(self, _t, error, _tb):
        if error:
            self._app_logger.error(f"Task {self._task_name} failed, see {self.log_file} for details. {error}")
            self._databricks_logger.debug("Task crash details", exc_info=error)
        self._file_handler.flush()
        self._databricks_logger.removeHandler(self._file_handler)
        self._file_handler.close()

    def _init_debug_logfile(self):
        log_format = "%(asctime)s %(levelname)s [%(name)s] {%(threadName)s} %(message)s"
        log_formatter = logging.Formatter(fmt=log_format, datefmt="%H:%M:%S")
        self._file_handler = logging.FileHandler(self.log_file.as_posix(), encoding="utf-8")
        self._file_handler.setFormatter(log_formatter)
        self._file_handler.setLevel(logging.DEBUG)

    def _init_run_readme(self):
        log_readme = self._log_path.joinpath("README.md")
        if log_readme.exists():
            return
        with log_readme.open("w", encoding="utf8") as f:
            f.write(f"# Logs for the cfmlab {self._task_name} task\n")
            f.write("This folder contains cfmlab debug log files.\n\n")
            f.write(f"Run `{self._run_id}` is keyed by the master seed of the experiment.\n")


_FLAGS = frozenset({"quiet"})


def parse_args(*argv: str) -> dict[str, str]:
    """Splits ``subcommand --key value --key=value --flag`` into a dictionary.

    The first positional argument is stored under ``task``.
    """
    args: dict[str, str] = {}
    items = list(argv)
    i = 0
    while i < len(items):
        item = items[i]
        i += 1
        if not item.startswith("--"):
            if "task" in args:
                msg = f"unexpected argument: {item}"
                raise KeyError(msg)
            args["task"] = item
            continue
        key, sep, value = item[2:].partition("=")
        if not sep and key in _FLAGS:
            value = "true"
        elif not sep:
            if i >= len(items):
                msg = f"--{key} needs a value"
                raise KeyError(msg)
            value = items[i]
            i += 1
        args[key] = value
    return args


def resolve_output(args: dict[str, str], cfg: ExperimentConfig) -> Path:
    if "out" in args:
        return Path(args["out"])
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    if cfg.output:
        return Path(cfg.output)
    return Path(DEFAULT_OUTPUT)


def _int_flag(args: dict[str, str], name: str) -> int:
    try:
        return int(args[name])
    except ValueError:
        msg = f"--{name} must be an integer, got {args[name]!r}"
        raise ConfigError(msg) from None


def load_task_config(args: dict[str, str]) -> ExperimentConfig:
    task_name = args["task"]
    config_path = Path(args["config"]) if "config" in args else CONFIGS / f"{task_name}.yml"
    cfg = load_config(config_path)
    if cfg.experiment != task_name:
        cfg = cfg.replace(experiment=task_name)
    if "seed" in args:
        cfg = cfg.replace(master_seed=_int_flag(args, "seed"))
    if args.get("quiet") == "true":
        cfg = cfg.replace(log_level="WARNING")
    return cfg


def run_task(args: dict[str, str], cfg: ExperimentConfig, context: RunContext):
    task_name = args.get("task", "not specified")
    if task_name not in _TASKS:
        msg = f'task "{task_name}" not found. Valid tasks are: {", ".join(_TASKS.keys())}'
        raise KeyError(msg)
    current_task = _TASKS[task_name]
    with TaskLogger(
        context.output,
        task_name=task_name,
        run_id=str(cfg.master_seed),
        log_level=cfg.log_level,
    ) as task_logger:
        logging.getLogger("databricks.labs.cfmlab").debug(f"{current_task.doc}\nlogging to {task_logger}")
        current_task.fn(cfg, context)


def trigger(*argv: str):
    args = parse_args(*argv)
    if "task" not in args:
        msg = f"no subcommand given. Valid tasks are: {', '.join(_TASKS.keys())}"
        raise KeyError(msg)
    if args["task"] not in _TASKS:
        msg = f'task "{args["task"]}" not found. Valid tasks are: {", ".join(_TASKS.keys())}'
        raise KeyError(msg)
    cfg = load_task_config(args)
    threads = _int_flag(args, "threads") if "threads" in args else (os.cpu_count() or 1)
    if threads < 1:
        msg = f"--threads must be >= 1, got {threads}"
        raise KeyError(msg)
    run_task(args, cfg, RunContext(resolve_output(args, cfg), threads))
