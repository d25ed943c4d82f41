"""Cross-domain recommendation via cluster transfer and translation-based factorization."""

from .data import (
    DatasetBundle,
    OverlapMatrix,
    RatingMatrix,
    RelevanceSets,
    SplitSpec,
    SyntheticSpec,
    label_relevance,
    load_overlap,
    load_ratings,
    split_target,
    synth_generate,
)
from .errors import (
    CdtrecError,
    ConfigError,
    DivergenceError,
    ParseError,
    SamplingError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CdtrecError",
    "ConfigError",
    "DatasetBundle",
    "DivergenceError",
    "OverlapMatrix",
    "ParseError",
    "RatingMatrix",
    "RelevanceSets",
    "SamplingError",
    "SplitSpec",
    "SyntheticSpec",
    "ValidationError",
    "label_relevance",
    "load_overlap",
    "load_ratings",
    "split_target",
    "synth_generate",
]
