"""Diffeomorphic registration of segmented regions via boundary surfaces.

Per-region surface point clouds drive a shared point-cloud network that
predicts velocities; kernel-convolved stationary velocity fields integrate
them into one invertible transformation of the ambient space.
"""

from .geometry import (LabelVolume, Mesh, RegionSurface, decimate_and_fix_counts,
                       extract_interfaces, extract_region_surface,
                       merge_and_stitch, preprocess_volume, smooth,
                       split_by_region)
from .model import AdamState, ModelParams, adam_step, backward, forward, init_params
from .pipeline import register, warp_labels
from .prealign import (CentroidSet, centroids_of_surfaces, centroids_of_volume,
                       fit_affine, polyaffine_residuals, silverman_bandwidth)
from .svf import (AffineLogTerm, GridField, SvfSample, SvfTerm, TransformChain,
                  apply_chain, bch_first_order, eval_velocity, exp_svf,
                  exp_svf_backward, fuse_regions, jacobian_determinant, negate)
from .synth import SyntheticSpec, synth_subject, template_volume
from .training import (Dataset, RegionPair, TrainConfig, chamfer,
                       chamfer_backward, simplex_regularizer, train, train_step)

__version__ = "0.1.0"
