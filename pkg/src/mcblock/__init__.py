"""Block-masked Monte-Carlo inference for a toy detector and classifier."""

from .dropblock import (
    DropBlockConfig,
    DropMask,
    DropoutMask,
    apply_dropout,
    apply_mask,
    gamma_from_drop_prob,
    sample_dropout_mask,
    sample_mask,
    weight_space_equivalence,
)
from .mc_inference import Detection, McConfig, detection_entropy, mc_classify, mc_detect
from .metrics import MetricsReport, average_precision, brier, mean_entropy, nms
from .model import (
    GaussianBox,
    GtBox,
    ModelParams,
    classifier_forward,
    decode,
    detector_forward,
    gaussian_nll,
    giou,
    load_params,
    save_params,
    total_loss,
)
from .rng import Rng
from .tensor import Sgd, Tensor

__version__ = "0.1.0"
