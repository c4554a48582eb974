"""Federated unlearning simulator with disentangled causal / non-causal features."""
from .errors import (ConfigError, DegenerateBatchError, DegenerateVectorError, EvaluationError,
                     FedUnlearnError, LabelError, LookupFailure, NumericError, PartitionError,
                     ShapeError, WeightError)
from .experiment import (ExperimentConfig, RoundRecord, build_world, emit_metrics, load_config,
                         read_metrics, run_experiment, simulate, summarize)
from .model import DisentangledModel, ModelDims, forward, init_model, predict
from .numerics import ParamVector, RngStream, cosine_similarity, project_to_simplex

__version__ = "0.1.0"
