"""Zero-shot slot filling: CRF boundaries + similarity-based typing.

The public surface re-exported here covers the everyday workflow: describe
a domain split, fit a model, evaluate it on an unseen label set, and save
or restore checkpoints. Submodules stay importable for the finer-grained
pieces (autodiff, encoder internals, benchmark protocols).
"""

from .config import build_train_config, default_config, resolve
from .data import (
    AnnotatedUtterance,
    DomainSplit,
    LabelVocabulary,
    Vocabulary,
    build_vocabulary,
    generate_synthetic,
    load_manifest,
    parse_synthetic_spec,
)
from .errors import DataError, NumericError, SlotFillError, UsageError
from .evaluation import EvalReport, benchmark_latency, evaluate_zero_shot
from .model import ModelConfig, SlotFillModel
from .training import (
    TrainConfig,
    TrainResult,
    fit,
    load_checkpoint,
    load_into_model,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedUtterance",
    "DataError",
    "DomainSplit",
    "EvalReport",
    "LabelVocabulary",
    "ModelConfig",
    "NumericError",
    "SlotFillError",
    "SlotFillModel",
    "TrainConfig",
    "TrainResult",
    "UsageError",
    "Vocabulary",
    "benchmark_latency",
    "build_train_config",
    "build_vocabulary",
    "default_config",
    "evaluate_zero_shot",
    "fit",
    "generate_synthetic",
    "load_checkpoint",
    "load_into_model",
    "load_manifest",
    "parse_synthetic_spec",
    "resolve",
    "save_checkpoint",
    "__version__",
]
