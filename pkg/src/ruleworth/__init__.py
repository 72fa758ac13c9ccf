"""Rule importance for informed neural networks.

Trains one small surrogate per coalition of prior-knowledge rules and scores
each rule by its log10 MSE-ratio marginal contributions.
"""

import jax

jax.config.update("jax_enable_x64", True)

from ruleworth.autodiff import (  # noqa: E402
    AdamState,
    DerivativeRequest,
    NetworkSpec,
    NetworkState,
    adam_step,
    forward,
    init_network,
    input_derivative,
    loss_gradient,
)
from ruleworth.errors import (  # noqa: E402
    ConfigError,
    DataError,
    RuleWorthError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ConfigError",
    "DataError",
    "DerivativeRequest",
    "NetworkSpec",
    "NetworkState",
    "RuleWorthError",
    "TrainingError",
    "adam_step",
    "forward",
    "init_network",
    "input_derivative",
    "loss_gradient",
]
