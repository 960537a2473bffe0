"""Risk-averse optimal control of elliptic systems under uncertainty.

The package follows one pipeline: a P1 discretization (:mod:`.fem`), a
Matern-type Gaussian prior (:mod:`.prior`), forward models with
adjoint-based derivatives (:mod:`.models`), Hessian actions around a
linearization point (:mod:`.hessian`), randomized eigenpairs and trace
estimates (:mod:`.eig`), Taylor and sampling estimators of the cost
moments (:mod:`.estimators`), and the bound-constrained optimizer with
its five cost/gradient drivers (:mod:`.control`). The command line in
:mod:`.cli` wires these together.
"""

from .fem import build_mesh, Rng
from .prior import GaussianPrior, build_prior
from .models import EllipticControlModel, QuadraticToyModel, WellConfig
from .hessian import linearize
from .eig import hessian_eigenpairs, trace_error_sweep
from .estimators import draw_sample_batch, mse_summary, saa
from .control import CostConfig, run_chain

__all__ = [
    "build_mesh",
    "Rng",
    "GaussianPrior",
    "build_prior",
    "EllipticControlModel",
    "QuadraticToyModel",
    "WellConfig",
    "linearize",
    "hessian_eigenpairs",
    "trace_error_sweep",
    "draw_sample_batch",
    "mse_summary",
    "saa",
    "CostConfig",
    "run_chain",
]

__version__ = "0.1.0"
