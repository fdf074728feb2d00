'''
Exception types raised by the planner package.
'''


class TriPlanError(Exception):
    """Base class for every planner failure."""


class SchemaError(TriPlanError):
    pass


class CycleError(TriPlanError):
    pass


class DanglingRefError(TriPlanError):
    pass


class StateError(TriPlanError):
    pass


class EmptyGraphError(TriPlanError):
    pass


class InfeasibleError(TriPlanError):
    pass


class CorruptCacheError(TriPlanError):
    pass


class PolicyError(TriPlanError):
    pass


class DomainError(TriPlanError):
    pass


class IndivisibleError(TriPlanError):
    pass


class DeadlockError(TriPlanError):
    def __init__(self, message: str, cycle: list | None = None):
        super().__init__(message)
        self.cycle = cycle or []


class CapacityError(TriPlanError):
    pass


class ConfigError(TriPlanError):
    pass


class NoFeasiblePlanError(TriPlanError):
    def __init__(self, message: str, reasons: dict | None = None):
        super().__init__(message)
        # configuration key -> binding constraint
        self.reasons = reasons or {}


class UnusedInputWarning(UserWarning):
    pass
