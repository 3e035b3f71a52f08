"""Joint skin-lesion segmentation and melanoma recognition on a small numpy autodiff engine.

The network segments the lesion, pools features separately over the lesion
center and periphery to diagnose it, and feeds the diagnosis back into the
segmentation features through a gated recalibration.  Stages can be cascaded.
"""

from .config import RunConfig, load_run_config
from .data import Sample, SynthConfig, generate_splits, generate_synthetic, load_isic
from .metrics import cls_metrics, roc_auc, seg_metrics
from .model import CascadeNet, ModelConfig, total_loss
from .train import TrainConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "CascadeNet",
    "ModelConfig",
    "RunConfig",
    "Sample",
    "SynthConfig",
    "TrainConfig",
    "cls_metrics",
    "evaluate",
    "generate_splits",
    "generate_synthetic",
    "load_isic",
    "load_run_config",
    "predict",
    "roc_auc",
    "seg_metrics",
    "total_loss",
    "train",
]
