"""Progressive latent replay for class-incremental continual learning.

Rehearsal of intermediate classifier features at depth-dependent
frequencies, with an analytic model of the replay update cost.
"""

from latent_replay.arch import (
    ARCH_PRESETS,
    Classifier,
    ClassifierSpec,
    ExtractorSpec,
    FeatureTaps,
    build_classifier,
    get_preset,
)
from latent_replay.cost import CostModel, blocks_from_spec, relative_cost, updates
from latent_replay.errors import ConfigError, InputError, MissingDataError
from latent_replay.generator import Generator, build_generator
from latent_replay.replay import FeatureBuffer, ReplayStrategy, split_batch

__all__ = [
    "ARCH_PRESETS",
    "Classifier",
    "ClassifierSpec",
    "ConfigError",
    "CostModel",
    "ExtractorSpec",
    "FeatureBuffer",
    "FeatureTaps",
    "Generator",
    "InputError",
    "MissingDataError",
    "ReplayStrategy",
    "blocks_from_spec",
    "build_classifier",
    "build_generator",
    "get_preset",
    "relative_cost",
    "split_batch",
    "updates",
]

__version__ = "0.1.0"
