"""
Adversarial graph representation adaptation for cross-domain facial expression recognition.
"""

from agra.adversarial import AGRAModel, classify, discriminate, predict
from agra.benchmark import baseline_dt, baseline_plft, compute_mmd, dump_features, evaluate_accuracy
from agra.data import FaceDataset, load_manifest
from agra.distribution_bank import ClassDistributionBank, initialize_bank, kmeans
from agra.features import RegionFeatureExtractor, extract_region_stack, fused_feature
from agra.graph_adapter import GraphAdapter, build_prior_adjacency, propagate
from agra.training import train_stage1, train_stage2

__all__ = [
    "AGRAModel",
    "classify",
    "discriminate",
    "predict",
    "baseline_dt",
    "baseline_plft",
    "compute_mmd",
    "dump_features",
    "evaluate_accuracy",
    "FaceDataset",
    "load_manifest",
    "ClassDistributionBank",
    "initialize_bank",
    "kmeans",
    "RegionFeatureExtractor",
    "extract_region_stack",
    "fused_feature",
    "GraphAdapter",
    "build_prior_adjacency",
    "propagate",
    "train_stage1",
    "train_stage2",
]
