"""Convolutional deep kernel machines with stochastic kernel regularisation."""

from .errors import (ChecksumMismatch, ConfigError, ConvergenceFailure, DecompositionFailure,
                     FormatError, NonFiniteGradient, NonPositiveDiagonal, PrecisionMismatch,
                     ShapeMismatch)
from .kernels import KernelBlocks, KernelKind, apply_kernel, batch_kernel_normalise, skip_combine
from .linalg import cholesky, condition_number, solve_psd, sym_eigenvalues
from .network import LayerSpec, Model, ModelConfig, OutputHead, SpatialShape
from .objective import ObjectiveConfig, assemble_objective, kl_exact_core, kl_taylor_core, output_kl
from .skr import RegConfig, skr_sample
from .trainer import TrainConfig, adam_step, lr_schedule, train_loop

__version__ = "0.1.0"
