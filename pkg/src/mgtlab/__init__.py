"""Delta-gated transformer experiments on a small numpy autodiff engine."""

from .errors import (ConfigParseError, ContractError, DegenerateInputError, DimensionError, IngestionError,
                     InvalidConfigurationError, MGTLabError, NumericalError, TrainingAbort)
from .linalg import DeltaSpec, SingularSpectrum, apply_delta_block, delta_matrix, householder_matrix
from .metrics import BetaStats, RankProfile, beta_stats, effective_rank, rank_profile, synergy_coefficient
from .model import ModelConfig, forward_model, init_params, mgt_block_forward
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"
