"""Image restoration by half-quadratic splitting with a single learned, task-independent prior."""

from .data_prox import (
    BinaryMask, ConvolutionPsf, DataProxInputs, DenseMatrix, Identity, TaskSpec,
    data_prox_backward, solve, solve_deconv, solve_dense, solve_identity, solve_mask,
)
from .hqs import (
    HqsConfig, HqsTrace, PluginPrior, consensus_gap, gaussian_denoiser, nearest_fill,
    restore, restore_with_plugins,
)
from .imaging import convolve, convolve_transpose, psnr
from .lbfgs import quasi_newton_minimize
from .params import ModelParams
from .prior import (
    DiffusionStage, PriorProx, diffusion_step, initial_prior, prior_prox_backward, prior_prox_forward,
)
from .rbf import RbfFunction, RbfGrid, rbf_eval, rbf_grad
from .synthesis import TrainingSample
from .training import TrainConfig, loss, loss_grad, train_progressive

__version__ = "0.1.0"
