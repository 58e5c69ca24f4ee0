"""Shared multi-scale residual feature encoder and per-box feature pooling.

The encoder is an 18-layer residual network (two basic blocks per stage)
emitting a four-level pyramid with channel widths (64, 128, 256, 512) at
strides (4, 8, 16, 32). Both task heads consume the same pyramid; the graph
head additionally reuses the encoder to embed per-box visual features.
"""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_arrays, load_module_state, module_state_arrays, save_arrays

logger = logging.getLogger(__name__)

ENCODER_CHANNELS = (64, 128, 256, 512)
MIN_INPUT_SIDE = 32
BOX_CROP_SIZE = 96
BOX_FEATURE_DIM = ENCODER_CHANNELS[-1]


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-scale encoder maps from one forward pass; strides 4/8/16/32."""

    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor

    def __post_init__(self):
        maps = (self.c2, self.c3, self.c4, self.c5)
        batches = {m.shape[0] for m in maps}
        if len(batches) != 1:
            raise ValueError(f"pyramid levels disagree on batch size: {batches}")
        widths = tuple(m.shape[1] for m in maps)
        if widths != ENCODER_CHANNELS:
            raise ValueError(
                f"pyramid channel widths must be {ENCODER_CHANNELS}, got {widths}"
            )

    @property
    def batch_size(self) -> int:
        return self.c2.shape[0]

    def levels(self) -> dict:
        return {"c2": self.c2, "c3": self.c3, "c4": self.c4, "c5": self.c5}


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with identity (or 1x1-projected) shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class ResNetEncoder(nn.Module):
    """18-layer residual encoder returning a FeaturePyramid."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = self._make_stage(64, 64, stride=1)
        self.layer2 = self._make_stage(64, 128, stride=2)
        self.layer3 = self._make_stage(128, 256, stride=2)
        self.layer4 = self._make_stage(256, 512, stride=2)

    @staticmethod
    def _make_stage(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
        return nn.Sequential(
            BasicBlock(in_ch, out_ch, stride=stride),
            BasicBlock(out_ch, out_ch),
        )

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        validate_images(images)
        x = F.relu(self.bn1(self.conv1(images)), inplace=True)
        x = self.maxpool(x)
        c2 = self.layer1(x)
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return FeaturePyramid(c2=c2, c3=c3, c4=c4, c5=c5)


def validate_images(images: torch.Tensor) -> None:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected images of shape B x 3 x H x W, got {tuple(images.shape)}")
    b, _, h, w = images.shape
    if b < 1:
        raise ValueError("batch must contain at least one image")
    if h < MIN_INPUT_SIDE or w < MIN_INPUT_SIDE:
        raise ValueError(
            f"input spatial size {h}x{w} is below the minimum of "
            f"{MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} (the coarsest map would vanish)"
        )
    if not torch.isfinite(images).all():
        raise ValueError("input images contain non-finite values")


def encode(encoder: ResNetEncoder, images: torch.Tensor) -> FeaturePyramid:
    """Validated forward pass; alias of ``encoder(images)``."""
    return encoder(images)


def _box_to_pixels(box, width: int, height: int, index: int):
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
        raise ValueError(
            f"box {index} is not a valid normalized [x1,y1,x2,y2] box: "
            f"[{x1}, {y1}, {x2}, {y2}]"
        )
    px1 = max(0, min(width, math.floor(x1 * width)))
    px2 = max(0, min(width, math.ceil(x2 * width)))
    py1 = max(0, min(height, math.floor(y1 * height)))
    py2 = max(0, min(height, math.ceil(y2 * height)))
    if px2 <= px1 or py2 <= py1:
        raise ValueError(f"box {index} degenerates to zero area after pixel rounding")
    return px1, py1, px2, py2


def extract_box_features(
    encoder: ResNetEncoder,
    image: torch.Tensor,
    boxes,
    crop_size: int = BOX_CROP_SIZE,
) -> torch.Tensor:
    """Crop each normalized box, resize to ``crop_size``, encode, and pool c5.

    Returns an ``M x 512`` tensor, one row per box in input order. ``M == 0``
    yields an empty ``0 x 512`` tensor.
    """
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a single 3 x H x W image, got {tuple(image.shape)}")
    boxes = list(boxes)
    if not boxes:
        return image.new_zeros((0, BOX_FEATURE_DIM))
    _, h, w = image.shape
    crops = []
    for idx, box in enumerate(boxes):
        px1, py1, px2, py2 = _box_to_pixels(box, w, h, idx)
        crop = image[:, py1:py2, px1:px2].unsqueeze(0)
        crops.append(
            F.interpolate(crop, size=(crop_size, crop_size), mode="bilinear", align_corners=False)
        )
    pyramid = encoder(torch.cat(crops, dim=0))
    return pyramid.c5.mean(dim=(2, 3))


def save_encoder_weights(encoder: ResNetEncoder, path, meta: dict | None = None) -> None:
    save_arrays(path, module_state_arrays(encoder), meta)


def load_encoder_weights(
    encoder: ResNetEncoder, path, allow_random: bool = False
) -> bool:
    """Replace all encoder parameters from a checkpoint file.

    With ``allow_random`` a missing file keeps the current (random)
    initialization and logs a warning instead of raising. Returns True when
    weights were loaded.
    """
    try:
        arrays, _ = load_arrays(path)
    except FileNotFoundError:
        if allow_random:
            logger.warning(
                "encoder checkpoint %s not found; keeping random initialization", path
            )
            return False
        raise
    load_module_state(encoder, arrays)
    return True
