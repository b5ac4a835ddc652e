"""Multi-scale dual-branch hand parsing on a small numpy autodiff core."""
from .tensor import Graph, GraphError, ShapeError, Tensor, grad_check, precision
from .nn import (
    BoundingBox,
    Conv2dParams,
    TransposedConv2dParams,
    bilinear_resize,
    conv2d,
    crop_spatial,
    pool2d,
    transposed_conv2d,
)
from .dbblock import DBBlockParams, fuse_multiscale, fuse_scale, init_dbblock
from .losses import LossConfig, cross_entropy, focal_loss, mcb_focal_loss, segmentation_loss
from .metrics import ConfusionMatrix, mean_accuracy, mean_iou
from .model import MSDBModel, ModelConfig, locate_hand
from .datagen import (
    AugmentConfig,
    ParsingSample,
    SceneSpec,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .trainer import Adam, Schedule, evaluate_model, load_checkpoint, save_checkpoint, train_stage
from .config import RunConfig, load_config

__version__ = "0.1.0"
