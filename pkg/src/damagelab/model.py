"""Damage classifiers over a residual backbone, for the three input modalities.

Inputs are the post crop alone, or pre and post crops stacked channel-wise
(pre first). The type-aware variant appends the disaster one-hot to the pooled
features right before the final linear layer.
"""
from __future__ import annotations

import copy
import enum
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet18

from .errors import ConfigMismatch, IoFailure, ShapeMismatch, WeightLoadFailure
from .ingest import NUM_DISASTER_TYPES
from .losses import LossKind
from .preprocess import CROP_SIDE, BuildingRecord

# ImageNet statistics, used for both the pre and the post RGB triple
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

CACHE_ENV = "DAMAGE_LAB_CACHE"
RESNET18_WEIGHTS_NAME = "resnet18.pth"


class InputModality(str, enum.Enum):
    POST_ONLY = "post_only"
    PRE_POST = "pre_post"
    PRE_POST_TYPE = "pre_post_type"

    @property
    def channels(self) -> int:
        return 3 if self is InputModality.POST_ONLY else 6

    @property
    def uses_disaster_type(self) -> bool:
        return self is InputModality.PRE_POST_TYPE


class Backbone(str, enum.Enum):
    RESNET18_PRETRAINED = "resnet18_pretrained"
    TINY_RESNET = "tiny_resnet"


@dataclass(frozen=True)
class ModelConfig:
    modality: InputModality
    loss: LossKind
    backbone: Backbone = Backbone.TINY_RESNET
    crop_side: int = CROP_SIDE
    head_width: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "modality", InputModality(self.modality))
        object.__setattr__(self, "loss", LossKind.parse(self.loss) if isinstance(self.loss, str) else self.loss)
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        if self.head_width is None:
            object.__setattr__(self, "head_width", self.loss.head_width)
        elif self.head_width != self.loss.head_width:
            raise ConfigMismatch(
                f"head width {self.head_width} does not fit loss {self.loss.short} "
                f"(needs {self.loss.head_width})"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality"] = self.modality.value
        d["loss"] = self.loss.short
        d["backbone"] = self.backbone.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EncodedInput:
    tensor: np.ndarray           # C x S x S float32
    aux: np.ndarray | None = None  # disaster one-hot, type-aware modality only


def standardize(crop: np.ndarray) -> np.ndarray:
    """uint8 H x W x 3 -> standardized float32 3 x H x W."""
    x = crop.astype(np.float32) / 255.0
    x = (x - CHANNEL_MEAN) / CHANNEL_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def encode_input(record: BuildingRecord, modality: InputModality, crop_side: int | None = None) -> EncodedInput:
    modality = InputModality(modality)
    for crop in (record.crop_pre, record.crop_post):
        if crop.ndim != 3 or crop.shape[2] != 3 or crop.shape[0] != crop.shape[1]:
            raise ShapeMismatch(f"record {record.uid}: crop shape {crop.shape} is not S x S x 3")
        if crop_side is not None and crop.shape[0] != crop_side:
            raise ShapeMismatch(f"record {record.uid}: crop side {crop.shape[0]} != {crop_side}")
    if record.crop_pre.shape != record.crop_post.shape:
        raise ShapeMismatch(f"record {record.uid}: pre and post crops differ in shape")

    post = standardize(record.crop_post)
    if modality is InputModality.POST_ONLY:
        return EncodedInput(post)
    stacked = np.concatenate([standardize(record.crop_pre), post], axis=0)
    aux = record.disaster_type.one_hot() if modality.uses_disaster_type else None
    return EncodedInput(stacked, aux)


def encode_batch(records, modality: InputModality, crop_side: int | None = None):
    """Stacked ``(x, aux_or_None)`` tensors for a list of records."""
    encoded = [encode_input(r, modality, crop_side) for r in records]
    x = torch.from_numpy(np.stack([e.tensor for e in encoded]))
    aux = None
    if InputModality(modality).uses_disaster_type:
        aux = torch.from_numpy(np.stack([e.aux for e in encoded]))
    return x, aux


# --- stem adaptation -------------------------------------------------------------

def adapt_first_layer(weights3):
    """K x 3 x k x k kernels -> K x 6 x k x k, each triple a halved copy."""
    w = torch.as_tensor(weights3)
    if w.ndim != 4 or w.shape[1] != 3:
        raise ShapeMismatch(f"expected K x 3 x k x k kernels, got {tuple(w.shape)}")
    half = w / 2
    return torch.cat([half, half], dim=1)


class PairedConv(nn.Module):
    """Six-channel first convolution evaluated as two three-channel halves.

    Summing the two half-convolutions is the same linear map as one 6-channel
    convolution, but keeps ``forward([x, x])`` bit-identical to the source
    3-channel stem when the weights come from :func:`adapt_first_layer`.
    """

    def __init__(self, out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(torch.empty(out_channels, 6, kernel_size, kernel_size))
        nn.init.kaiming_normal_(self.weight, mode="fan_out", nonlinearity="relu")

    @classmethod
    def from_conv(cls, conv: nn.Conv2d) -> "PairedConv":
        if conv.bias is not None:
            raise ShapeMismatch("stem convolution with bias is not supported")
        paired = cls(conv.out_channels, conv.kernel_size[0], conv.stride[0], conv.padding[0])
        with torch.no_grad():
            paired.weight.copy_(adapt_first_layer(conv.weight))
        return paired

    def forward(self, x):
        if x.shape[1] != 6:
            raise ShapeMismatch(f"paired stem expects 6 channels, got {x.shape[1]}")
        w = self.weight
        pre = F.conv2d(x[:, :3], w[:, :3], stride=self.stride, padding=self.padding)
        post = F.conv2d(x[:, 3:], w[:, 3:], stride=self.stride, padding=self.padding)
        return pre + post


def make_stem_conv(in_channels: int, out_channels: int, kernel_size: int, stride: int, padding: int) -> nn.Module:
    conv = nn.Conv2d(3, out_channels, kernel_size, stride=stride, padding=padding, bias=False)
    nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
    if in_channels == 3:
        return conv
    if in_channels == 6:
        return PairedConv.from_conv(conv)
    raise ShapeMismatch(f"unsupported input channel count {in_channels}")


# --- backbones --------------------------------------------------------------------

class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class TinyResNet(nn.Module):
    """Four residual blocks (16/32/64/128 wide) behind a strided 3x3 stem."""

    widths = (16, 32, 64, 128)

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.conv1 = make_stem_conv(in_channels, self.widths[0], 3, stride=2, padding=1)
        self.bn1 = nn.BatchNorm2d(self.widths[0])
        self.layer1 = BasicBlock(self.widths[0], self.widths[0])
        self.layer2 = BasicBlock(self.widths[0], self.widths[1], stride=2)
        self.layer3 = BasicBlock(self.widths[1], self.widths[2], stride=2)
        self.layer4 = BasicBlock(self.widths[2], self.widths[3], stride=2)
        self.out_features = self.widths[-1]
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class ResNet18Features(nn.Module):
    """torchvision ResNet-18 without its classifier."""

    def __init__(self, in_channels: int = 3, state_dict: dict | None = None):
        super().__init__()
        net = resnet18(weights=None)
        if state_dict is not None:
            state_dict = {k: v for k, v in state_dict.items() if not k.startswith("fc.")}
            try:
                missing, unexpected = net.load_state_dict(state_dict, strict=False)
            except RuntimeError as exc:
                raise WeightLoadFailure(f"weight file does not fit ResNet-18: {exc}") from None
            missing = [k for k in missing if not k.startswith("fc.")]
            if missing or unexpected:
                raise WeightLoadFailure(f"weight file mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
        if in_channels == 6:
            net.conv1 = PairedConv.from_conv(net.conv1)
        elif in_channels != 3:
            raise ShapeMismatch(f"unsupported input channel count {in_channels}")
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.out_features = net.fc.in_features

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


# --- classifier -------------------------------------------------------------------

def fuse_disaster_type(pooled: torch.Tensor, one_hot: torch.Tensor) -> torch.Tensor:
    """Append the disaster one-hot after the pooled features."""
    if one_hot.shape[-1] != NUM_DISASTER_TYPES:
        raise ShapeMismatch(f"disaster one-hot must have width {NUM_DISASTER_TYPES}")
    if pooled.ndim != one_hot.ndim or pooled.shape[:-1] != one_hot.shape[:-1]:
        raise ShapeMismatch(f"cannot fuse {tuple(pooled.shape)} with {tuple(one_hot.shape)}")
    return torch.cat([pooled, one_hot.to(pooled.dtype)], dim=-1)


class DamageClassifier(nn.Module):
    def __init__(self, config: ModelConfig, backbone: nn.Module):
        super().__init__()
        self.config = config
        self.backbone = backbone
        fused = backbone.out_features + (NUM_DISASTER_TYPES if config.modality.uses_disaster_type else 0)
        self.fc = nn.Linear(fused, config.head_width)

    # Grad-CAM layer names, outermost last
    @property
    def feature_layers(self) -> list[str]:
        return [f"backbone.layer{i}" for i in range(1, 5)]

    def head_input(self, x: torch.Tensor, aux: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[1] != self.config.modality.channels:
            raise ShapeMismatch(f"expected {self.config.modality.channels} channels, got {x.shape[1]}")
        pooled = self.backbone(x)
        if self.config.modality.uses_disaster_type:
            if aux is None:
                raise ShapeMismatch("type-aware model needs the disaster one-hot")
            pooled = fuse_disaster_type(pooled, aux)
        return pooled

    def forward(self, x: torch.Tensor, aux: torch.Tensor | None = None) -> torch.Tensor:
        return self.fc(self.head_input(x, aux))


def widen_to_pre_post(model: DamageClassifier, modality: InputModality = InputModality.PRE_POST) -> DamageClassifier:
    """Copy of a post-only model whose stem accepts stacked pre/post channels.

    Everything except the first convolution is copied unchanged, so before any
    training the widened model scores ``[x, x]`` exactly as the source scores ``x``.
    """
    modality = InputModality(modality)
    if model.config.modality is not InputModality.POST_ONLY or modality is InputModality.POST_ONLY:
        raise ConfigMismatch("widening goes from a post-only model to a pre/post modality")
    if modality.uses_disaster_type:
        raise ConfigMismatch("widening cannot add the disaster-type inputs to the classifier layer")
    widened = copy.deepcopy(model)
    widened.config = ModelConfig(modality, model.config.loss, model.config.backbone, model.config.crop_side)
    widened.backbone.conv1 = PairedConv.from_conv(model.backbone.conv1)
    return widened


def _load_weight_file(weights) -> dict:
    try:
        state = torch.load(weights, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for bad archives
        raise WeightLoadFailure(f"cannot read weight file {weights}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise WeightLoadFailure(f"{weights} does not hold a parameter dictionary")
    return state


def default_weight_path() -> Path | None:
    cache = os.environ.get(CACHE_ENV)
    if not cache:
        return None
    path = Path(cache) / RESNET18_WEIGHTS_NAME
    return path if path.exists() else None


def build_model(config: ModelConfig, weights=None, seed: int | None = None) -> DamageClassifier:
    """Instantiate a fully trainable classifier; ``seed`` fixes the initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    channels = config.modality.channels
    if config.backbone is Backbone.TINY_RESNET:
        if weights is not None:
            raise ConfigMismatch("tiny_resnet takes no pretrained weight file")
        backbone = TinyResNet(channels)
    else:
        if weights is None:
            raise ConfigMismatch(f"resnet18_pretrained needs a weight file (or ${CACHE_ENV}/{RESNET18_WEIGHTS_NAME})")
        backbone = ResNet18Features(channels, _load_weight_file(weights))
    return DamageClassifier(config, backbone)


# --- checkpoints --------------------------------------------------------------------

def checkpoint_bytes(model: DamageClassifier, state_dict: dict | None = None) -> bytes:
    state = state_dict if state_dict is not None else model.state_dict()
    buf = io.BytesIO()
    torch.save(
        {"config": model.config.to_dict(), "config_hash": model.config.hash(), "state_dict": state},
        buf,
    )
    return buf.getvalue()


def save_checkpoint(model: DamageClassifier, path, state_dict: dict | None = None) -> str:
    """Write the checkpoint archive; returns its sha256."""
    data = checkpoint_bytes(model, state_dict)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, expect: ModelConfig | None = None) -> DamageClassifier:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        config = ModelConfig.from_dict(blob["config"])
        state = blob["state_dict"]
    except (OSError, KeyError, TypeError, RuntimeError) as exc:
        raise WeightLoadFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if blob.get("config_hash") != config.hash():
        raise WeightLoadFailure(f"checkpoint {path} has a corrupted config hash")
    if expect is not None and expect.hash() != config.hash():
        raise ConfigMismatch(
            f"checkpoint was built for {config.modality.value}/{config.loss.short}, "
            f"requested {expect.modality.value}/{expect.loss.short}"
        )
    if config.backbone is Backbone.TINY_RESNET:
        backbone = TinyResNet(config.modality.channels)
    else:
        backbone = ResNet18Features(config.modality.channels)
    model = DamageClassifier(config, backbone)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise WeightLoadFailure(f"checkpoint {path} does not fit its own config: {exc}") from None
    model.eval()
    return model
