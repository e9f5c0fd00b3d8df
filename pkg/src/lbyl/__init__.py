"""Data-free restoration of pruned convolutional networks."""

from .container import deserialize, load_dataset, load_model, save_dataset, save_model, serialize
from .errors import LBYLError
from .harness import (
    ExperimentConfig,
    GlobalPruneConfig,
    compare_batch,
    generate_probe_data,
    global_adaptive_prune,
    run_compare,
    run_pipeline,
    sweep_lambdas,
)
from .metrics import accuracy, ware, ware_profile
from .network import BatchNormParams, Layer, NetworkModel, forward, generate_synthetic
from .pruning import Criterion, PruningPlan, apply_pruning, plan_layerwise, plan_neurons, plan_resnet
from .restoration import Hyperparams, restore, restore_fc_neuron, restore_lbyl, restore_nm, solve_coefficients

__version__ = "0.1.0"

__all__ = [
    "BatchNormParams",
    "Criterion",
    "ExperimentConfig",
    "GlobalPruneConfig",
    "Hyperparams",
    "LBYLError",
    "Layer",
    "NetworkModel",
    "PruningPlan",
    "accuracy",
    "apply_pruning",
    "compare_batch",
    "deserialize",
    "forward",
    "generate_probe_data",
    "generate_synthetic",
    "global_adaptive_prune",
    "load_dataset",
    "load_model",
    "plan_layerwise",
    "plan_neurons",
    "plan_resnet",
    "restore",
    "restore_fc_neuron",
    "restore_lbyl",
    "restore_nm",
    "run_compare",
    "run_pipeline",
    "save_dataset",
    "save_model",
    "serialize",
    "solve_coefficients",
    "sweep_lambdas",
    "ware",
    "ware_profile",
]
