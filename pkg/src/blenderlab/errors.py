"""Exception hierarchy.

Every error carries the process exit code the command line front-end uses
when it surfaces the error.
"""


class LabError(Exception):
    exit_code = 1
    kind = "error"

    def to_dict(self):
        return {"error": self.kind, "message": str(self), "exit_code": self.exit_code}


class ConfigError(LabError, ValueError):
    exit_code = 2
    kind = "config"


class PrecisionError(LabError, ArithmeticError):
    """A numerical estimate cannot be trusted at the requested resolution."""

    exit_code = 3
    kind = "precision"


class ResourceCapError(LabError, MemoryError):
    exit_code = 4
    kind = "resource-cap"


class InvariantViolation(LabError, ValueError):
    exit_code = 5
    kind = "invariant-violation"


class DomainError(InvariantViolation):
    """A point or parameter left the region where the maps are defined."""

    kind = "domain"

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class ContractError(InvariantViolation):
    kind = "contract"


class CapabilityError(InvariantViolation):
    """A derivative oracle of the required order is not available."""

    kind = "capability"


class NumericError(InvariantViolation):
    kind = "numeric"
