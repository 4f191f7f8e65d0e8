"""Regional prototype replay and null-space gradient projection on a toy
incremental learner."""

from .nsgp import (CovarianceAccumulator, LayerProjection, NullityPolicy, NumericalError,
                   accumulate_covariance, apply_update, commit_stage, compute_projection,
                   nullity_select, project_gradient)
from .prototypes import (DegenerateFeatureError, Prototype, PrototypeStore, build_store_for_stage,
                         compute_coarse_prototype, cosine_similarity_matrix, kmeans_prototypes,
                         replay_loss, select_fine_prototypes)

__version__ = "0.1.0"
