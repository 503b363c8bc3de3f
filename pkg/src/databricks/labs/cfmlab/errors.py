__all__ = [
    "AcceptanceError",
    "BoundViolationError",
    "ConfigError",
    "DegenerateRateError",
    "NonFiniteStateError",
    "NumericalError",
    "OgdIterationError",
    "SamplingError",
    "TransportSizeError",
    "UnsupportedFamilyError",
]


class ConfigError(ValueError):
    """Invalid, missing or inconsistent configuration."""


class UnsupportedFamilyError(ConfigError):
    pass


class TransportSizeError(ValueError):
    pass


class DegenerateRateError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Base class for failures of the numerical pipeline (exit code 2)."""


class NonFiniteStateError(NumericalError):
    def __init__(self, what: str, step: int, layer: int):
        self.what = what
        self.step = step
        self.layer = layer
        super().__init__(f"non-finite {what} state at step {step} (layer {layer})")


class BoundViolationError(NumericalError):
    def __init__(self, bound: str, observed: float, limit: float, witness: str = ""):
        self.bound = bound
        self.observed = observed
        self.limit = limit
        self.witness = witness
        msg = f"{bound}: observed {observed:.6g} exceeds {limit:.6g}"
        if witness:
            msg = f"{msg} ({witness})"
        super().__init__(msg)


class SamplingError(NumericalError):
    pass


class OgdIterationError(NumericalError):
    def __init__(self, iteration: int, cause: NumericalError):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"iteration {iteration}: {cause}")


class AcceptanceError(AssertionError):
    def __init__(self, failed: list[str]):
        self.failed = failed
        super().__init__(f"{len(failed)} acceptance criteria failed: {', '.join(failed)}")
