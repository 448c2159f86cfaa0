"""Exception types shared across the toolkit."""


class MembraneForgeError(Exception):
    """Base class for all toolkit errors."""


class ExtensionLimitExceeded(MembraneForgeError):
    """Stretch state past the material lock-up limit (I1 - 3 >= Jm)."""


class SingularRhs(MembraneForgeError):
    """Equilibrium ODE right-hand side is singular (W1 or W11 vanished)."""


class NoEquilibrium(MembraneForgeError):
    """No static membrane shape balances the requested force at this pressure."""


class ShootingFailed(MembraneForgeError):
    """Shooting method found no admissible bracket or exceeded its iteration cap."""


class NotReachable(MembraneForgeError):
    """No force in [0, F_cap] attains the requested contact height."""


class ParseError(MembraneForgeError):
    """Dataset file could not be parsed."""


class SchemaError(MembraneForgeError):
    """Dataset record does not match the JSONL schema."""


class InvariantViolation(MembraneForgeError):
    """Record parsed but violates a domain invariant."""


class TooFewDesigns(MembraneForgeError):
    """Not enough distinct membrane designs for the requested k-fold split."""


class EmptyDataset(MembraneForgeError):
    """Operation requires a non-empty dataset."""


class EmptyBatch(MembraneForgeError):
    """Loss evaluation requires a non-empty batch."""


class Divergence(MembraneForgeError):
    """Training loss became non-finite."""


class RankDeficient(MembraneForgeError):
    """Least-squares design matrix has insufficient rank."""


class AllStartsFailed(MembraneForgeError):
    """Every multistart optimization attempt failed."""


class ModelEvaluationFailed(MembraneForgeError):
    """Force model could not be evaluated at the requested point."""


class TargetUnreachable(MembraneForgeError):
    """A lift target cannot be met anywhere in the modeling box."""


class EmptyInput(MembraneForgeError):
    """Operation requires non-empty input sequences."""


class ConfigError(MembraneForgeError):
    """Run configuration is missing, malformed, or has unknown keys."""
