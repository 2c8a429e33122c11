"""Sparse nonnegative tensor completion with accelerated stochastic gradient."""
from .ao import AoConfig, MetricsRecord, ao_ntc, epoch_account, snr, term_cond
from .estimator import NonnegativeTensorCompletion
from .io import (
    SynthSpec, corrupt, image_to_tensor, read_tns, synth_generate, tensor_to_image, write_tns,
)
from .nmc import (
    NmcConfig, RowWorkspace, SampledRow, power_method, row_gradient, row_hessian, row_step,
    s_nmc, sample_row,
)
from .tensor import (
    FactorSet, ModeView, SparseTensor, build_mode_views, cpd_value, kr_row, objective,
    relative_error,
)

__version__ = "0.1.0"
