"""Dual point-cloud transformer networks on a small numpy autodiff core."""

from .attention import (
    AttentionConfig,
    DpctLayer,
    HeadWeights,
    channel_wise_attention,
    dpct_forward,
    point_wise_attention,
)
from .model import (
    DTNet,
    NetworkSpec,
    SpecError,
    build_classification_net,
    build_segmentation_net,
    paper_classification_spec,
    paper_segmentation_spec,
)
from .tensor import Tensor, backward, no_grad, precision
from .train import Metrics, TrainConfig, evaluate, train

__version__ = "0.1.0"
