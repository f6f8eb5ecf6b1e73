"""Non-Euclidean gradient descent with geometry-aware sharpness instrumentation."""

from .matrixfns import PolarMethod, nuclear_norm, polar_factor, svd_small
from .norms import (BlockL12Norm, EuclideanNorm, LinfNorm, NormSpec,
                    PreconditionedNorm, SpectralMaxNorm, SpectralSumNorm, make_norm)
from .objectives import (MlpObjective, Objective, QuadraticObjective,
                         TaylorObjective, make_taylor)
from .optimizers import (MeasureConfig, OptimizerSpec, RunResult, StepRecord,
                         block_cd_step, rmsprop_step, run, spectral_step, step)
from .params import (BlockLayout, LayoutError, ParamVector, RngState,
                     ZeroVectorError, axpy, gaussian_like, inner,
                     load_vector, save_vector)
from .quadlab import (QuadCase, locate_transition, oracle_constants,
                      random_pd_matrix, simulate, stability_diagram,
                      taylor_switch, verify_invariant_direction)
from .spectra import (FwConfig, SharpnessEstimate, directional_curvature,
                      directional_smoothness, fw_gap, projected_power_iteration,
                      sharpness_bruteforce_linf, sharpness_closed, sharpness_fw)

__version__ = "0.1.0"
