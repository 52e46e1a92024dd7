"""Generalized max pooling as a differentiable global pooling layer, with baselines,
gradients, triplet training and retrieval evaluation."""

from .errors import (
    DegenerateBatch,
    DGMPError,
    DimensionMismatch,
    NoRelevant,
    NotEnoughClasses,
    NotPositiveDefinite,
    UnknownOp,
    ZeroVector,
)
from .pooling import (
    ActivationVolume,
    DescriptorSet,
    GlobalDescriptor,
    GmpSolution,
    PoolingConfig,
    l2_normalize,
    pool,
    pool_avg,
    pool_gmp,
    pool_gmp_dual,
    pool_gmp_primal,
    pool_lse,
    pool_max,
    pool_mixed,
    volume_to_descriptors,
)

__version__ = "0.1.0"
