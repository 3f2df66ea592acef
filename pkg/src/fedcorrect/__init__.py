"""Federated optimization with restarted adaptive clients and delta correction."""

from fedcorrect.client_opt import ClientOptKind, ClientOptState, reset_state, run_local, step
from fedcorrect.correction import CorrectionMode, aggregate_global_norm, apply_global, apply_local, joint_aggregate
from fedcorrect.problems import (
    LogRegTask,
    NoiseModel,
    QuadraticFamily,
    fixed_point_closed_form,
    global_min,
    limiting_fixed_point,
    local_min,
    make_logreg,
    skew_residual,
)
from fedcorrect.server_opt import ServerOptKind, ServerState, aggregate, sample_clients, server_step
from fedcorrect.sim import ExperimentConfig, MetricsRecord, load_config, lr_at, run_experiment, write_metrics

__all__ = [
    "ClientOptKind",
    "ClientOptState",
    "CorrectionMode",
    "ExperimentConfig",
    "LogRegTask",
    "MetricsRecord",
    "NoiseModel",
    "QuadraticFamily",
    "ServerOptKind",
    "ServerState",
    "aggregate",
    "aggregate_global_norm",
    "apply_global",
    "apply_local",
    "fixed_point_closed_form",
    "global_min",
    "joint_aggregate",
    "limiting_fixed_point",
    "load_config",
    "local_min",
    "lr_at",
    "make_logreg",
    "reset_state",
    "run_experiment",
    "run_local",
    "sample_clients",
    "server_step",
    "skew_residual",
    "step",
    "write_metrics",
]
