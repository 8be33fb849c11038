"""
Federated heterogeneity simulator.

A deterministic simulator of FedSGD, FedAVG, cyclical weight transfer and
centralized training under quantity, label-distribution and acquisition
skew, with the skew metrics and mitigation strategies used to study them.
"""

from .datasets import LabeledDataset, SynthSpec, load_idx, stratified_split, synth_generate
from .evaluation import RunResult, accuracy, cross_institution_matrix, drop_rate
from .experiment import ExperimentConfig, parse_config, run_experiment
from .federation import Method, ProtocolConfig, ProtocolRun, RoundLog, run_protocol, validate_shards
from .losses import CategoryWeights, class_weights, weighted_ce
from .network import Arch, ModelState, build_model, tiny_conv_arch
from .report import ExperimentReport, emit_report
from .skew import InstitutionShard, PartitionPlan, SkewReport, mean_pairwise_ks, quantity_std

__all__ = [
    'LabeledDataset', 'SynthSpec', 'load_idx', 'stratified_split', 'synth_generate',
    'RunResult', 'accuracy', 'cross_institution_matrix', 'drop_rate',
    'ExperimentConfig', 'parse_config', 'run_experiment',
    'Method', 'ProtocolConfig', 'ProtocolRun', 'RoundLog', 'run_protocol', 'validate_shards',
    'CategoryWeights', 'class_weights', 'weighted_ce',
    'Arch', 'ModelState', 'build_model', 'tiny_conv_arch',
    'ExperimentReport', 'emit_report',
    'InstitutionShard', 'PartitionPlan', 'SkewReport', 'mean_pairwise_ks', 'quantity_std',
]
