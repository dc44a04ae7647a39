"""Masked discrete interpolants on small enumerable token spaces."""
from .datasets import DatasetSpec, EnumerableDataset, build, build_shapes_pair
from .interpolant import CorruptionState, JointLayout, VocabSpec, corrupt
from .predictor import MaskedTokenNet, OraclePredictor, cfg_logits
from .sampler import SamplerConfig, conditional_sample, sample
from .schedule import CouplingSpec, Schedule, SmoothingSpec

__all__ = [
    "CorruptionState", "CouplingSpec", "DatasetSpec", "EnumerableDataset", "JointLayout",
    "MaskedTokenNet", "OraclePredictor", "SamplerConfig", "Schedule", "SmoothingSpec",
    "VocabSpec", "build", "build_shapes_pair", "cfg_logits", "conditional_sample", "corrupt",
    "sample",
]
