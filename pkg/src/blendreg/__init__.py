"""Non-rigid point-cloud registration with blended rigid transforms.

The deformation is a per-point blend of a few rigid motions, grown one
stage at a time and fitted by gradient descent on multi-view soft depth
and silhouette renders plus edge-length and sparsity regularizers.
"""

from .geometry import (
    BLENDED,
    RIGID,
    DeformationState,
    RigidTransform,
    advance_stage,
    apply_deformation,
    apply_rigid,
    normalize,
)
from .loss import LossWeights
from .metrics import MetricReport, chamfer, emd, pointwise_mse, pose_error
from .render import CameraView, RasterConfig, render_depth, render_mask, sample_views
from .solver import RegistrationResult, SolverConfig, register

__version__ = "0.1.0"
