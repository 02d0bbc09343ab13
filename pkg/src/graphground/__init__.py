"""Compositional temporal grounding at desk scale.

A library + CLI for hierarchical-semantic-graph grounding with variational
cross-graph correspondence, a compositional dataset splitter, and a seeded
synthetic world that makes compositional generalization measurable without
real video data.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    EmbeddingTable,
    GroundingExample,
    QueryAnnotation,
    QueryRecord,
    Segment,
    SrlStructure,
    Token,
    load_corpus,
    load_embeddings,
    load_query_corpus,
    phrase_embedding,
    save_corpus,
    save_embeddings,
)
from .encoder import EncoderConfig  # noqa: F401
from .errors import (  # noqa: F401
    ComputationError,
    ConfigError,
    ContractError,
    DataError,
    GraphGroundError,
)
from .evaluator import (  # noqa: F401
    MetricsReport,
    evaluate_model,
    evaluate_predictions,
    temporal_iou,
    word_order_sensitivity,
)
from .graphs import SemanticGraph, build_query_graph, build_video_graph  # noqa: F401
from .grounding import HeadConfig, IntervalPrediction  # noqa: F401
from .model import GroundingModel, ModelConfig, prepare_example  # noqa: F401
from .splitter import (  # noqa: F401
    Composition,
    SplitConfig,
    assign_splits,
    coverage_sample,
    extract_compositions,
    validate_splits,
)
from .tensor import ParameterStore, Tensor, grad_check  # noqa: F401
from .trainer import TrainConfig, TrainReport, train  # noqa: F401
from .world import WorldConfig, generate_annotated_corpus, generate_corpus, random_baseline_miou  # noqa: F401
