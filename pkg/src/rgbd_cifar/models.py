"""Classifiers: a two-layer MLP and CIFAR-style ResNet-20/56.

Both are parameterised by input channel count only; for the ResNet that
changes nothing but the stem convolution's weight tensor.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .cifar_io import NUM_CLASSES, SIDE
from .errors import ValidationError

HIDDEN_SWEEP = (64, 128, 256, 512)
CHECKPOINT_FORMAT = "rgbd-cifar-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_channels: int
    hidden_units: int = 256
    class_count: int = NUM_CLASSES

    def __post_init__(self):
        if self.input_channels not in (1, 3, 4):
            raise ValueError(f"MLP input_channels must be 1, 3 or 4, got {self.input_channels}")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        if self.class_count != NUM_CLASSES:
            raise ValueError("class_count is fixed at 10")

    @property
    def input_dim(self) -> int:
        return SIDE * SIDE * self.input_channels


@dataclass(frozen=True)
class ResNetSpec:
    depth: int = 20
    input_channels: int = 3
    class_count: int = NUM_CLASSES
    base_width: int = 16  # stage widths are base, 2*base, 4*base

    def __post_init__(self):
        if self.depth not in (20, 56):
            raise ValueError(f"unsupported ResNet depth {self.depth}; use 20 or 56")
        if self.input_channels not in (3, 4):
            raise ValueError(f"ResNet input_channels must be 3 or 4, got {self.input_channels}")
        if self.class_count != NUM_CLASSES:
            raise ValueError("class_count is fixed at 10")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // 6


class Mlp(nn.Module):
    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        self.hidden = nn.Linear(spec.input_dim, spec.hidden_units)
        self.out = nn.Linear(spec.hidden_units, spec.class_count)

    def forward(self, x):
        return self.out(F.relu(self.hidden(x.flatten(1))))


class BasicBlock(nn.Module):
    """Two 3x3 conv-BN layers with a parameter-free shortcut.

    When the block downsamples, the shortcut subsamples by 2 and zero-pads
    the new channels (the identity-shortcut variant used for CIFAR).
    """

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.stride = stride
        self.extra = planes - in_planes

    def shortcut(self, x):
        if self.stride != 1:
            x = x[:, :, :: self.stride, :: self.stride]
        if self.extra:
            lo = self.extra // 2
            x = F.pad(x, (0, 0, 0, 0, lo, self.extra - lo))
        return x

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet(nn.Module):
    def __init__(self, spec: ResNetSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.stem = nn.Conv2d(spec.input_channels, w, 3, padding=1, bias=False)
        self.stem_bn = nn.BatchNorm2d(w)
        stages = []
        in_planes = w
        for i, planes in enumerate((w, 2 * w, 4 * w)):
            blocks = []
            for j in range(spec.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(BasicBlock(in_planes, planes, stride))
                in_planes = planes
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(4 * w, spec.class_count)

    def forward(self, x):
        out = F.relu(self.stem_bn(self.stem(x)))
        out = self.stages(out)
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.fc(out)


def _initialise(model: nn.Module, seed: int) -> None:
    # He-normal for hidden weights, fan-in normal for the classifier, zero biases
    g = torch.Generator().manual_seed(int(seed))
    last = model.out if isinstance(model, Mlp) else model.fc
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                gain = 1.0 if m is last else 2.0
                m.weight.copy_(torch.randn(m.weight.shape, generator=g, dtype=m.weight.dtype) * math.sqrt(gain / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()


def make_mlp(spec: MlpSpec, seed: int = 0, dtype=torch.float32) -> Mlp:
    model = Mlp(spec).to(dtype)
    _initialise(model, seed)
    model.seed = int(seed)
    return model


def make_resnet(spec: ResNetSpec, seed: int = 0, dtype=torch.float32) -> ResNet:
    model = ResNet(spec).to(dtype)
    _initialise(model, seed)
    model.seed = int(seed)
    return model


def make_model(spec, seed: int = 0, dtype=torch.float32) -> nn.Module:
    if isinstance(spec, MlpSpec):
        return make_mlp(spec, seed, dtype)
    if isinstance(spec, ResNetSpec):
        return make_resnet(spec, seed, dtype)
    raise TypeError(f"unknown model spec {spec!r}")


def spec_for(name: str, input_channels: int, hidden_units: int = 256):
    """``mlp`` / ``resnet20`` / ``resnet56`` -> spec."""
    if name == "mlp":
        return MlpSpec(input_channels, hidden_units)
    if name in ("resnet20", "resnet56"):
        return ResNetSpec(int(name[6:]), input_channels)
    raise ValueError(f"unknown model {name!r}")


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _check_batch(model, batch) -> torch.Tensor:
    x = torch.as_tensor(batch)
    dtype = next(model.parameters()).dtype
    if x.ndim != 4 or x.shape[2:] != (SIDE, SIDE):
        raise ValueError(f"batch must be N x C x 32 x 32, got {tuple(x.shape)}")
    if x.shape[1] != model.spec.input_channels:
        raise ValueError(f"batch has {x.shape[1]} channels, model expects {model.spec.input_channels}")
    if not torch.isfinite(x).all():
        raise ValidationError("batch contains non-finite values")
    return x.to(dtype)


def forward(model: nn.Module, batch) -> torch.Tensor:
    """Inference-mode logits (running BN statistics, no autograd)."""
    x = _check_batch(model, batch)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(x)
    finally:
        model.train(was_training)


def probabilities(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def check_labels(labels) -> torch.Tensor:
    y = torch.as_tensor(labels, dtype=torch.long)
    if y.numel() and (y.min() < 0 or y.max() >= NUM_CLASSES):
        raise ValueError(f"labels must lie in [0, {NUM_CLASSES - 1}]")
    return y


def loss_and_gradient(model: nn.Module, batch, labels, weight_decay: float = 0.0):
    """Mean cross-entropy (+ ``weight_decay/2 * ||theta||^2``) and its gradient.

    Uses batch statistics for BN, like a training step, but leaves the
    model's running statistics untouched.
    """
    x = _check_batch(model, batch)
    y = check_labels(labels)
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("batch must be non-empty and match labels")
    params = {k: v.detach().requires_grad_(True) for k, v in model.named_parameters()}
    buffers = {k: v.detach().clone() for k, v in model.named_buffers()}
    was_training = model.training
    model.train()
    try:
        logits = functional_call(model, {**params, **buffers}, (x,))
    finally:
        model.train(was_training)
    loss = F.cross_entropy(logits, y)
    if weight_decay:
        loss = loss + 0.5 * weight_decay * sum((p * p).sum() for p in params.values())
    grads = torch.autograd.grad(loss, list(params.values()))
    return float(loss.detach()), dict(zip(params.keys(), grads))


def save_checkpoint(model: nn.Module, path) -> None:
    """Write a versioned checkpoint: family, spec fields, seed and the state dict."""
    family = "mlp" if isinstance(model, Mlp) else "resnet"
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "family": family,
            "spec": asdict(model.spec),
            "seed": getattr(model, "seed", None),
            "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> nn.Module:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    spec = MlpSpec(**blob["spec"]) if blob["family"] == "mlp" else ResNetSpec(**blob["spec"])
    model = make_model(spec, blob["seed"] or 0, getattr(torch, blob["dtype"]))
    model.load_state_dict(blob["state_dict"])
    return model
