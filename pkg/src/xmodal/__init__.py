"""Cross-modal knowledge distillation and consistency-guided active learning on numpy."""
from .active import AcquisitionConfig, AlWeights, ConsistencyALClassifier, Pool, run_al_loop
from .datagen import SYNTH_3C, PairedDataset, SynthSpec, generate_synthetic_paired
from .distill import CrossModalKDClassifier, CrossModalKDRegressor, KdConfig, KdWeights
from .harness import ConfigError, ExperimentConfig, RunArtifact, run
from .metrics import classification_report, regression_report

__version__ = "0.1.0"

__all__ = [
    "AcquisitionConfig",
    "AlWeights",
    "ConfigError",
    "ConsistencyALClassifier",
    "CrossModalKDClassifier",
    "CrossModalKDRegressor",
    "ExperimentConfig",
    "KdConfig",
    "KdWeights",
    "PairedDataset",
    "Pool",
    "RunArtifact",
    "SYNTH_3C",
    "SynthSpec",
    "classification_report",
    "generate_synthetic_paired",
    "regression_report",
    "run",
    "run_al_loop",
]
