"""In-context time series prediction.

A transformer that consumes (lookback, future) forecasting-task pairs as
tokens, two reference architectures (temporal-wise and series-wise token
layouts), a similarity-based token-retrieval reducer, and the training and
evaluation protocols to compare them, all on a small numpy autodiff core.
"""

from .data import (
    MultiSpec,
    SeriesFrame,
    few_shot_truncate,
    gen_channels_independent,
    gen_multi,
    load_csv,
    split_standardize,
    write_csv,
)
from .errors import (
    CapacityError,
    ConfigError,
    ExperimentError,
    ICTSPError,
    ShapeError,
)
from .model import (
    ICTSPModel,
    ModelConfig,
    count_parameters,
    count_parameters_formula,
    linear_reduction_forecast,
)
from .experiments import (
    NoiseSpec,
    get_preset,
    make_comparison_spec,
    make_run_spec,
    run_ablation,
    run_architecture_comparison,
    run_experiment,
)
from .numerics import Tensor, check_gradients, mse_loss, no_grad
from .retrieval import RetrievalConfig, retrieval_count, retrieve_tokens
from .tokenizer import TokenMatrix, TokenMeta, build_tokens
from .training import (
    FitResult,
    RepeatLastBaseline,
    TrainConfig,
    evaluate,
    fit,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ConfigError",
    "ExperimentError",
    "FitResult",
    "ICTSPError",
    "ICTSPModel",
    "ModelConfig",
    "MultiSpec",
    "NoiseSpec",
    "RepeatLastBaseline",
    "RetrievalConfig",
    "SeriesFrame",
    "ShapeError",
    "Tensor",
    "TokenMatrix",
    "TokenMeta",
    "TrainConfig",
    "build_tokens",
    "check_gradients",
    "count_parameters",
    "count_parameters_formula",
    "evaluate",
    "few_shot_truncate",
    "fit",
    "gen_channels_independent",
    "gen_multi",
    "get_preset",
    "linear_reduction_forecast",
    "load_csv",
    "make_comparison_spec",
    "make_run_spec",
    "mse_loss",
    "no_grad",
    "retrieval_count",
    "retrieve_tokens",
    "run_ablation",
    "run_architecture_comparison",
    "run_experiment",
    "split_standardize",
    "write_csv",
    "__version__",
]
