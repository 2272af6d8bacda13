"""Estimated-depth RGBD CIFAR-10: dataset construction and classification experiments."""
from .cifar_io import (
    CHANNELS,
    DatasetManifest,
    LabeledImage,
    RGBDRecord,
    extract_channels,
    parse_cifar_batch,
    read_rgbd_batch,
    write_rgbd_batch,
)
from .depth import (
    DepthMap,
    DepthProvider,
    ExternalDirectoryProvider,
    LuminanceDepthProvider,
    SyntheticDepthProvider,
    build_dataset,
    build_rgbd,
    downsample_depth,
    estimate_depth,
    quantize_depth,
    upsample_image,
)
from .experiments import compute_transfer_metric, emit_report, run_channel_ablation, run_comparison
from .models import MlpSpec, ResNetSpec, forward, loss_and_gradient, make_mlp, make_resnet
from .trainer import ImageSet, TrainConfig, TrainingHistory, evaluate, train

__version__ = "0.1.0"
