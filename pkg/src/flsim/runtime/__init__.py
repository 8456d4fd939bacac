"""Workflow engine: scheduling, client selection, rounds and workflow variants."""

from .client import Client, WorkflowHooks, default_hooks
from .components import (
    ComponentRegistry,
    FederatedData,
    RegistryError,
    build_blobs,
    default_registry,
    fresh_registry,
    register_client,
    register_component,
    register_dataset,
    register_model,
    register_server,
)
from .continual import ContinualSchedule, ContinualTask, DriftState, detect_drift
from .scheduler import TaskQueueEntry, TaskScheduler
from .server import (
    ClientRegistry,
    Hub,
    InProcessHub,
    RoundSummary,
    RunReport,
    Server,
    TcpHub,
    join,
    run_clustered,
    run_continual,
    run_semi_server,
    run_split,
    run_standard,
    run_task,
    select_clients,
    serve,
)

__all__ = [
    "Client",
    "WorkflowHooks",
    "default_hooks",
    "ComponentRegistry",
    "FederatedData",
    "RegistryError",
    "build_blobs",
    "default_registry",
    "fresh_registry",
    "register_client",
    "register_component",
    "register_dataset",
    "register_model",
    "register_server",
    "ContinualSchedule",
    "ContinualTask",
    "DriftState",
    "detect_drift",
    "TaskQueueEntry",
    "TaskScheduler",
    "ClientRegistry",
    "Hub",
    "InProcessHub",
    "RoundSummary",
    "RunReport",
    "Server",
    "TcpHub",
    "join",
    "run_clustered",
    "run_continual",
    "run_semi_server",
    "run_split",
    "run_standard",
    "run_task",
    "select_clients",
    "serve",
]
