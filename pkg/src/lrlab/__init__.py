"""lrlab: a desk-scale training laboratory for low-rank regularization.

Layers and backpropagation are implemented from scratch on numpy arrays, and
the two low-rank regularization schemes (direct substitution and the adaptive
Tikhonov pull with damped layer selection) come with an oracle suite that
verifies their mathematical claims at small scale.
"""

from .linalg import (
    LrfPair,
    SvdResult,
    lrf,
    lrf_reconstruct,
    matrix_condition_number,
    matrix_rank,
    slice_tensor,
    svd,
    unslice_tensor,
)
from .netcore import (
    Conv2dLayer,
    DenseLayer,
    Network,
    SampleBatch,
    TrainingDiverged,
    accuracy,
    backward,
    forward,
    layer_condition_number,
    loss,
    sgd_step,
)
from .regularizers import (
    AlrSelection,
    ConditionProfile,
    DampingSequence,
    OverfitDetector,
    alr_regularized_gradient,
    alr_select,
    condition_profile,
    dlr_select_and_substitute,
    overfit_ratio,
    sncn,
)
from .training import (
    EpochMetrics,
    RunData,
    TrainSettings,
    run_training,
    train_alr,
    train_dlr,
    train_plain,
)

__version__ = "0.1.0"
