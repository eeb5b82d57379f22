"""Flow matching on spatial snapshots with prior-regularized OT couplings."""

__version__ = "0.1.0"

from .geometry import (
    NeighborIndex,
    PlausibilityMatrix,
    SpatialSlice,
    build_neighbor_index,
    build_tpm,
    local_lr_score,
    lr_dissimilarity,
    neighborhood_mean_expression,
    spatial_smoothness,
)
from .metrics import (
    CentroidClassifier,
    TransitionRuleSet,
    celltype_kl,
    count_implausible,
    energy_distance,
    mmd_rbf_multi,
    w2,
    weighted_w2,
)
from .sampler import IntegrationConfig, integrate, ivp_sample, next_step_sample
from .trainer import LongitudinalDataset, TrainConfig, make_coupling, sample_conditional_path, train
from .transport import (
    Coupling,
    SinkhornConfig,
    euclidean_cost,
    exact_ot,
    pacm_cost,
    sample_pairs,
    sinkhorn_eot,
    sinkhorn_paer,
)
from .velocity import AdamState, VelocityField, adam_step, forward, init_field, loss_and_grad
