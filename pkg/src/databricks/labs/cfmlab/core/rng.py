from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from databricks.labs.cfmlab.errors import ConfigError

__all__ = ["RngHandle", "Stream"]

_MAX_SEED = 2**64


class Stream(IntEnum):
    """Stable identifiers for the first elements of a stream path.

    Values are part of the reproducibility contract: renumbering them changes every
    experiment output for a given master seed.
    """

    FORWARD = 1
    OGD = 2
    GRAD_CHECK = 3
    FORWARD_POC = 4
    BACKWARD_POC = 5
    STABILITY = 6
    LIPSCHITZ_AUDIT = 7
    SUPPORT_GROWTH = 8
    WASSERSTEIN_LLN = 9
    SELFTEST = 10
    FLOW_ENVELOPE = 11

    PARAMS = 101
    CONTEXT = 102
    REFERENCE = 103
    TOKEN = 104
    DIRECTIONS = 105
    PROJECTIONS = 106
    PERTURBATION = 107
    POPULATION_CONTEXT = 108
    EMPIRICAL_CONTEXT = 109
    WARMUP = 110


@dataclass(frozen=True)
class RngHandle:
    """Value-type handle on a counter-based random stream.

    The generator is Philox keyed by ``SeedSequence(master_seed, spawn_key=stream_path)``,
    so equal handles replay equal draws and distinct paths give independent streams.
    Handles are split with :meth:`child` before fanning work out to threads.
    """

    master_seed: int
    stream_path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.master_seed < _MAX_SEED:
            msg = f"master_seed must be an unsigned 64-bit integer, got {self.master_seed}"
            raise ConfigError(msg)
        for part in self.stream_path:
            if part < 0:
                msg = f"stream path entries must be non-negative: {self.stream_path}"
                raise ConfigError(msg)

    def child(self, *path: int) -> "RngHandle":
        return RngHandle(self.master_seed, (*self.stream_path, *(int(p) for p in path)))

    def generator(self) -> np.random.Generator:
        seed_sequence = np.random.SeedSequence(self.master_seed, spawn_key=self.stream_path)
        return np.random.Generator(np.random.Philox(seed_sequence))

    def __str__(self):
        path = "/".join(str(p) for p in self.stream_path)
        return f"seed={self.master_seed} stream={path or '-'}"
