"""flsim: a desk-scale federated learning workflow engine and simulator."""

from .core import (
    ConfigError,
    ParameterSet,
    TaskConfig,
    UploadEnvelope,
    congruence_check,
    linear_combine,
    load_config,
    parse_config,
    serialize_config,
)
from .runtime import (
    register_client,
    register_dataset,
    register_model,
    register_server,
    run_task,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ParameterSet",
    "TaskConfig",
    "UploadEnvelope",
    "congruence_check",
    "linear_combine",
    "load_config",
    "parse_config",
    "serialize_config",
    "register_client",
    "register_dataset",
    "register_model",
    "register_server",
    "run_task",
]
