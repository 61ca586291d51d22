"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class MetastabError(Exception):
    """Base class for all library errors."""


class ConfigError(MetastabError, ValueError):
    """Invalid parameters, malformed configuration or inconsistent sets."""


class CapabilityError(MetastabError):
    """Request exceeds what exact enumeration can handle."""


class SolverError(MetastabError):
    """A linear or eigen solve failed to reach its residual target."""


class BudgetExhausted(MetastabError):
    """A simulation ran out of its jump budget."""


class InsufficientReplicas(ConfigError):
    """Too few replicas for a statistical report."""
