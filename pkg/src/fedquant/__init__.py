"""Desk-scale federated averaging with quantization-robust client training."""

from .data import Dataset, FederatedDataset, dirichlet_partition, gen_synthetic
from .errors import (AggregationError, ConfigError, DegenerateTensorError,
                     DivergedError, FedQuantError, NumericError, ShapeError,
                     UsageError)
from .evaluation import BitConfig, EvalReport, evaluate, quantize_for_eval, sweep
from .federation import (FedConfig, ServerState, TrainingHistory, aggregate,
                         load_checkpoint, run, sample_clients, save_checkpoint,
                         server_step)
from .mlp import (Batch, ParamSet, QuantPlan, backward, forward, init_params,
                  kure_gradient, kure_loss, kurtosis)
from .quantize import (QuantSpec, StepTable, estimate_range_mse, make_spec,
                       pseudo_quantize, quantize, rescale_step, ste_backward)
from .rng import Purpose, RngStream, derive_stream
from .strategies import (ClientTask, ClientUpdate, StepTables, StrategyConfig,
                         calibrate_steps, local_train, sample_bitwidth)
from .theory import (BoundInputs, BoundReport, check_conditions, compute_bound,
                     empirical_bound_check, empirical_noise_bound, r_value)

__version__ = "0.1.0"
