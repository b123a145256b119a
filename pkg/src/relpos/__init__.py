"""relpos: positional-encoding lab for a desk-scale vision transformer.

Compares a full learnable position embedding against two rank-one
alternatives built from fixed patch-to-center distance profiles (linear
sequence order, or concentric rings), in any combination, on top of a
self-contained float64 autodiff engine.
"""

import os as _os

# Arrays here are tiny; BLAS thread pools only add contention, and a single
# compute thread keeps runs bit-reproducible. Explicit settings win.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .autodiff import (
    Tensor,
    backward,
    cross_entropy_logits,
    finite_diff_check,
    gelu,
    layer_norm_last_axis,
    matmul,
    softmax_last_axis,
)
from .data import Dataset, LabeledImage, SyntheticSpec, gen_quadrant, gen_radial, load_images, split_dataset
from .embeddings import (
    CLASS_TOKEN_POLICIES,
    MODES,
    DistanceVector,
    PositionalConfig,
    circle_classes,
    circle_distance_vector,
    compose_positional,
    learnable_param_count,
    outer_embedding,
    sequence_distance_vector,
)
from .errors import RelposError
from .grid import (
    GridCoord,
    PatchGrid,
    center_point,
    central_indices,
    coords_to_index,
    dihedral_index_maps,
    four_neighbors,
    grid_from_patch_count,
    index_to_coords,
)
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    forward_from_patches,
    init_params,
    loss,
    named_parameters,
    parameter_count,
    patchify,
    unpatchify,
)
from .train import (
    MetricsRow,
    TrainConfig,
    adamw_step,
    average_over_seeds,
    cosine_lr,
    evaluate_top1,
    train,
    write_metrics_csv,
)

__version__ = "0.1.0"
