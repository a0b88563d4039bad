"""Decentralized federated learning through differentially private proxy models.

Each client trains a private model and a shareable proxy by mutual learning;
only the proxy, trained with DP-SGD, is exchanged over PushSum gossip.
"""
from .accountant import PrivacyLedger, check_budget, compose_and_convert, per_step_rdp
from .data import LabeledDataset, PartitionSpec, evaluate, partition, synth_blobs
from .dp import DpConfig, OptimizerConfig, apply_update, clip_gradient, privatize_batch
from .gossip import MixingMatrix, ProxyState, TopologyKind, TopologySchedule, debias, \
    generate_matrix, pushsum_step
from .nn import DmlConfig, ModelSpec, ParamVector, forward, per_example_gradients
from .protocols import Method, ProtocolConfig, comm_cost_model, run_experiment

__version__ = "0.1.0"

__all__ = [
    "PrivacyLedger", "check_budget", "compose_and_convert", "per_step_rdp",
    "LabeledDataset", "PartitionSpec", "evaluate", "partition", "synth_blobs",
    "DpConfig", "OptimizerConfig", "apply_update", "clip_gradient", "privatize_batch",
    "MixingMatrix", "ProxyState", "TopologyKind", "TopologySchedule", "debias",
    "generate_matrix", "pushsum_step",
    "DmlConfig", "ModelSpec", "ParamVector", "forward", "per_example_gradients",
    "Method", "ProtocolConfig", "comm_cost_model", "run_experiment",
]
