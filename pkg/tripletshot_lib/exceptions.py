"""
Exception hierarchy shared by the tripletshot library.

Management commands map these onto exit codes: numeric failures exit 3,
everything else that is the caller's fault exits 2.
"""
from typing import Optional


class TripletShotError(Exception):
    """Base class for all library errors."""


class ShapeError(TripletShotError, ValueError):
    """Tensor or image shapes do not line up."""


class ContractError(TripletShotError):
    """An operation was called outside its precondition."""


class ConfigError(TripletShotError, ValueError):
    """Invalid or unknown configuration."""


class IngestionError(TripletShotError):
    """A dataset file could not be found, read or decoded."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path


class SamplingError(TripletShotError):
    """A sampler cannot satisfy its class/instance constraints."""


class DegenerateBatchError(ContractError):
    """Train-mode batch normalization on a batch of one."""


class NumericError(TripletShotError, ArithmeticError):
    """A NaN or Inf appeared in a loss, activation or gradient."""

    def __init__(self, message: str, parameter: Optional[str] = None, iteration: Optional[int] = None):
        details = []
        if parameter is not None:
            details.append(f"parameter={parameter}")
        if iteration is not None:
            details.append(f"iteration={iteration}")
        super().__init__(f"{message} ({', '.join(details)})" if details else message)
        self.parameter = parameter
        self.iteration = iteration
