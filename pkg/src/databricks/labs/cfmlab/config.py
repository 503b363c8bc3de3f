import dataclasses
import logging
import types
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml
from databricks.labs.blueprint.installation import Installation

from databricks.labs.cfmlab.core.ensemble import PopulationSpec
from databricks.labs.cfmlab.core.params import Family, ParameterPath
from databricks.labs.cfmlab.core.rng import RngHandle, Stream
from databricks.labs.cfmlab.errors import ConfigError
from databricks.labs.cfmlab.flow import IntegratorConfig
from databricks.labs.cfmlab.train import OgdConfig

logger = logging.getLogger(__name__)

__all__ = ["EXPERIMENTS", "ExperimentConfig", "PathSpec", "load_config"]

EXPERIMENTS = (
    "forward",
    "grad-check",
    "ogd",
    "poc-forward",
    "poc-backward",
    "stability",
    "lipschitz-audit",
    "support-growth",
    "wasserstein-lln",
    "selftest",
)
RATE_EXPERIMENTS = frozenset({"poc-forward", "poc-backward", "wasserstein-lln"})
MIN_RATE_REPEATS = 8
_VERSION_KEYS = frozenset({"version", "$version"})
# alternating attention and MLP layers, accepted in `families`
MIXED = "mixed"


@dataclass
class PathSpec:
    schedule: list[str] | None = None
    # Frobenius norm of every drawn block; 0 gives the all-zero path
    init_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = [Family.ATTENTION.value] * 4
        if not self.schedule:
            msg = "path.schedule must name at least one layer"
            raise ConfigError(msg)
        for family in self.schedule:
            try:
                Family(family)
            except ValueError:
                valid = ", ".join(f.value for f in Family)
                msg = f"path.schedule: unknown family {family!r}, expected one of {valid}"
                raise ConfigError(msg) from None
        if self.init_scale < 0:
            msg = f"path.init_scale must be non-negative, got {self.init_scale}"
            raise ConfigError(msg)

    @property
    def families(self) -> tuple[Family, ...]:
        assert self.schedule is not None
        return tuple(Family(f) for f in self.schedule)

    def build(self, dimension: int) -> ParameterPath:
        if self.init_scale == 0:
            return ParameterPath.zeros(self.families, dimension)
        rng = RngHandle(self.seed, (Stream.PARAMS,))
        return ParameterPath.random(self.families, dimension, rng, self.init_scale)


@dataclass
class ExperimentConfig:  # pylint: disable=too-many-instance-attributes
    __file__ = "config.yml"
    __version__ = 1

    experiment: str = "forward"
    dimension: int = 3
    n_list: list[int] | None = None
    n_ref: int = 8192
    repeats: int = 8
    population: PopulationSpec | None = None
    path: PathSpec | None = None
    integrator: IntegratorConfig | None = None
    ogd: OgdConfig | None = None
    master_seed: int = 0
    output: str | None = None
    # single runs
    context_size: int = 8
    token: list[float] | None = None
    target: list[float] | None = None
    # sliced W1
    projections: int = 128
    # audits
    samples: int = 10_000
    bound_m: float = 1.0
    # stability ladder
    rungs: int = 6
    perturbation: float = 0.1
    instances: int = 16
    pairs: int = 50
    # gradient checks
    directions: int = 4
    layers_list: list[int] | None = None
    families: list[str] | None = None
    substep_ladder: list[int] | None = None
    # empirical contexts are prefixes of the reference draws
    coupled: bool = False
    # backward uniformity window
    split_k: int = 50
    log_level: str = "INFO"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            msg = f"experiment: unknown id {self.experiment!r}, expected one of {', '.join(EXPERIMENTS)}"
            raise ConfigError(msg)
        if self.dimension < 1:
            msg = f"dimension must be >= 1, got {self.dimension}"
            raise ConfigError(msg)
        if self.population is None:
            self.population = PopulationSpec()
        self.population = self._resolve_population(self.population)
        if self.path is None:
            self.path = PathSpec()
        if self.integrator is None:
            self.integrator = IntegratorConfig()
        if self.ogd is not None and self.ogd.integrator is None:
            self.ogd.integrator = self.integrator
        if self.n_list is None:
            self.n_list = [16, 32, 64, 128]
        self._check_n_list()
        if self.experiment in RATE_EXPERIMENTS and self.repeats < MIN_RATE_REPEATS:
            msg = f"repeats must be >= {MIN_RATE_REPEATS} for a rate fit, got {self.repeats}"
            raise ConfigError(msg)
        for name in ("repeats", "context_size", "projections", "samples", "instances", "pairs", "directions", "n_ref"):
            if getattr(self, name) < 1:
                msg = f"{name} must be >= 1, got {getattr(self, name)}"
                raise ConfigError(msg)
        if not 0 <= self.master_seed < 2**64:
            msg = f"master_seed must be an unsigned 64-bit integer, got {self.master_seed}"
            raise ConfigError(msg)
        for name in ("token", "target"):
            value = getattr(self, name)
            if value is not None and len(value) != self.dimension:
                msg = f"{name} must have {self.dimension} coordinates, got {len(value)}"
                raise ConfigError(msg)
        known = {f.value for f in Family} | {MIXED}
        for family in self.families or []:
            if family not in known:
                msg = f"families: unknown family {family!r}"
                raise ConfigError(msg)
        if self.log_level.upper() not in {"DEBUG", "INFO", "WARNING", "ERROR"}:
            msg = f"log_level: unknown level {self.log_level!r}"
            raise ConfigError(msg)

    def _resolve_population(self, population: PopulationSpec) -> PopulationSpec:
        if population.dimension == 0:
            return dataclasses.replace(population, dimension=self.dimension)
        if population.dimension != self.dimension:
            msg = f"population.dimension={population.dimension} differs from dimension={self.dimension}"
            raise ConfigError(msg)
        return population

    def _check_n_list(self):
        assert self.n_list is not None
        if not self.n_list or any(n < 1 for n in self.n_list):
            msg = f"n_list must hold positive sizes, got {self.n_list}"
            raise ConfigError(msg)
        if any(b <= a for a, b in zip(self.n_list, self.n_list[1:])):
            msg = f"n_list must be strictly increasing, got {self.n_list}"
            raise ConfigError(msg)

    @property
    def population_spec(self) -> PopulationSpec:
        assert self.population is not None
        return self.population

    @property
    def path_spec(self) -> PathSpec:
        assert self.path is not None
        return self.path

    @property
    def integration(self) -> IntegratorConfig:
        assert self.integrator is not None
        return self.integrator

    @property
    def ogd_config(self) -> OgdConfig:
        if self.ogd is None:
            msg = f"{self.experiment}: the ogd section is required"
            raise ConfigError(msg)
        return self.ogd

    @property
    def sizes(self) -> list[int]:
        assert self.n_list is not None
        return self.n_list

    def rng(self) -> RngHandle:
        return RngHandle(self.master_seed)

    def build_path(self) -> ParameterPath:
        return self.path_spec.build(self.dimension)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _dataclass_type(hint: Any) -> type | None:
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        for arg in typing.get_args(hint):
            if dataclasses.is_dataclass(arg):
                return arg
        return None
    return hint if dataclasses.is_dataclass(hint) else None


def check_keys(raw: Any, klass: type, prefix: str = ""):
    """Rejects keys of ``raw`` that are not fields of ``klass``, at every nesting level."""
    if not isinstance(raw, dict):
        msg = f"{prefix or 'config'}: expected a mapping, got {type(raw).__name__}"
        raise ConfigError(msg)
    hints = typing.get_type_hints(klass)
    names = {f.name for f in dataclasses.fields(klass)}
    for key, value in raw.items():
        if not prefix and key in _VERSION_KEYS:
            continue
        dotted = f"{prefix}{key}"
        if key not in names:
            msg = f"unknown config key: {dotted}"
            raise ConfigError(msg)
        nested = _dataclass_type(hints[key])
        if nested is not None and value is not None:
            check_keys(value, nested, f"{dotted}.")


def _config_cause(err: BaseException) -> ConfigError | None:
    seen: BaseException | None = err
    while seen is not None:
        if isinstance(seen, ConfigError):
            return seen
        seen = seen.__cause__ or seen.__context__
    return None


def load_config(path: Path) -> ExperimentConfig:
    if not path.is_file():
        msg = f"config file not found: {path}"
        raise ConfigError(msg)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        check_keys(raw, ExperimentConfig)
        config = Installation.load_local(ExperimentConfig, path)
    except ConfigError as err:
        msg = f"{path}: {err}"
        raise ConfigError(msg) from err
    except (TypeError, ValueError, KeyError, AttributeError, yaml.YAMLError) as err:
        cause = _config_cause(err)
        msg = f"{path}: {cause if cause is not None else err}"
        raise ConfigError(msg) from err
    logger.debug(f"loaded {config.experiment} config from {path}")
    return config
