"""
Exception hierarchy shared by the lab modules, the CLI and the HTTP surface
"""


class HRFError(Exception):
    """Base class for every error raised by the lab."""


class ConfigError(HRFError, ValueError):
    """Invalid configuration, dimension mismatch or missing artifact."""


class UsageError(HRFError, RuntimeError):
    """An API was called with inputs produced under a different state (stale tape, wrong snapshot)."""


class NumericalError(HRFError, ArithmeticError):
    """Non-finite values, failed numeric guards or violated metric bounds."""


class RewardError(HRFError, RuntimeError):
    """Reward evaluation failed for at least one sample; the whole batch is discarded."""
