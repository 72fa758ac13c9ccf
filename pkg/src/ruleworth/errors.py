class RuleWorthError(Exception):
    exit_code = 1


class ConfigError(RuleWorthError, ValueError):
    exit_code = 1


class DataError(RuleWorthError, ValueError):
    exit_code = 2


class TrainingError(RuleWorthError, RuntimeError):
    exit_code = 3


class DerivativeOrderError(ValueError):
    """Requested input derivative is unsupported by the activation or too high."""
