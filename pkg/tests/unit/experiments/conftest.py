from typing import Any

from databricks.labs.cfmlab.config import ExperimentConfig, PathSpec
from databricks.labs.cfmlab.flow import IntegratorConfig


def small_config(experiment: str, schedule: list[str] | None = None, **kwargs: Any) -> ExperimentConfig:
    """Reduced-scale configuration that keeps every study under a second."""
    defaults: dict[str, Any] = {
        "dimension": 3,
        "n_list": [4, 8, 16],
        "n_ref": 128,
        "repeats": 8,
        "context_size": 4,
        "instances": 2,
        "directions": 2,
        "samples": 40,
        "rungs": 3,
        "path": PathSpec(schedule=schedule or ["attention", "mlp"], init_scale=0.5, seed=3),
        "integrator": IntegratorConfig("rk4", 4),
        "master_seed": 11,
    }
    defaults.update(kwargs)
    return ExperimentConfig(experiment=experiment, **defaults)
