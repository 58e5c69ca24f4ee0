"""Segmentation decoders, loss, and metrics.

Three head variants share one encoder pyramid:

* ``GR``     - latent global reasoning on the coarsest map only, one decoder
               path, bilinear upsample x32.
* ``MSGR``   - an independent reasoning unit at every pyramid scale, each
               followed by its scale-specific decoder block; decoder outputs
               are upsampled to the quarter-resolution grid, summed, and
               classified.
* ``MSLRGR`` - latent reasoning at the coarsest scale combined with per-scale
               3x3 convolutional neighborhood reasoning on the finer maps,
               aggregated the same way.

All variants expose the 64-dim summary vector of the coarsest-scale reasoning
unit and the pooled pre-classifier decoder feature (for the penultimate-feature
edge mode).
"""

from enum import Enum
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ENCODER_CHANNELS, FeaturePyramid
from .glore import GISF_DIM, GlobalReasoningUnit
from .labels import NUM_SEG_CLASSES


class SegVariant(str, Enum):
    GR = "GR"
    MSGR = "MSGR"
    MSLRGR = "MSLRGR"

    @classmethod
    def parse(cls, value) -> "SegVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(
                f"unknown segmentation variant {value!r}; expected one of "
                f"{[v.value for v in cls]}"
            ) from None


_LEVEL_CHANNELS = dict(zip(("c2", "c3", "c4", "c5"), ENCODER_CHANNELS))


class DecoderBlock(nn.Module):
    """conv-BatchNorm-ReLU, dropout, conv; spatial size preserved."""

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, dropout: float = 0.1):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout}")
        self.conv1 = nn.Conv2d(in_ch, mid_ch, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(mid_ch)
        self.dropout = nn.Dropout2d(dropout)
        self.conv2 = nn.Conv2d(mid_ch, out_ch, 3, padding=1)

    def forward(self, x):
        x = F.relu(self.bn(self.conv1(x)), inplace=True)
        return self.conv2(self.dropout(x))


class LocalReasoningBlock(nn.Module):
    """Channel-preserving 3x3 conv block mixing each cell with its neighborhood."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)), inplace=True)


class SegOutput(NamedTuple):
    logits: torch.Tensor       # B x K x H x W
    gisf: torch.Tensor         # B x 64
    penultimate: torch.Tensor  # B x decoder_channels (pooled pre-classifier map)


class SegmentationHead(nn.Module):
    def __init__(
        self,
        variant: SegVariant | str = SegVariant.MSLRGR,
        num_classes: int = NUM_SEG_CLASSES,
        decoder_channels: int = 64,
        latent_nodes: int = 16,
        dropout: float = 0.1,
        injection_dim: int | None = None,
        summary_from_reasoned: bool = True,
        share_scale_graph: bool = False,
    ):
        super().__init__()
        self.variant = SegVariant.parse(variant)
        self.num_classes = num_classes
        self.decoder_channels = decoder_channels

        # The coarsest-scale unit always exists and owns the summary/injection
        # ports; MSGR adds independent units for the finer scales.
        units = {
            "c5": GlobalReasoningUnit(
                _LEVEL_CHANNELS["c5"],
                num_nodes=latent_nodes,
                latent_channels=_LEVEL_CHANNELS["c5"] // 4,
                injection_dim=injection_dim,
                summary_from_reasoned=summary_from_reasoned,
            )
        }
        if self.variant is SegVariant.MSGR:
            shared_latent = _LEVEL_CHANNELS["c5"] // 4 if share_scale_graph else None
            for level in ("c2", "c3", "c4"):
                ch = _LEVEL_CHANNELS[level]
                units[level] = GlobalReasoningUnit(
                    ch,
                    num_nodes=latent_nodes,
                    latent_channels=shared_latent or ch // 4,
                    summary_from_reasoned=summary_from_reasoned,
                )
            if share_scale_graph:
                for level in ("c2", "c3", "c4"):
                    units[level].adjacency = units["c5"].adjacency
                    units[level].state_weight = units["c5"].state_weight
        self.glore = nn.ModuleDict(units)

        if self.variant is SegVariant.GR:
            decode_levels = ("c5",)
        else:
            decode_levels = ("c2", "c3", "c4", "c5")
        self.decoders = nn.ModuleDict(
            {
                level: DecoderBlock(
                    _LEVEL_CHANNELS[level], decoder_channels, decoder_channels, dropout
                )
                for level in decode_levels
            }
        )
        if self.variant is SegVariant.MSLRGR:
            self.local = nn.ModuleDict(
                {level: LocalReasoningBlock(_LEVEL_CHANNELS[level]) for level in ("c2", "c3", "c4")}
            )
        else:
            self.local = None
        self.classifier = nn.Conv2d(decoder_channels, num_classes, 3, padding=1)

    def forward(
        self,
        pyramid: FeaturePyramid,
        injection: torch.Tensor | None = None,
        output_size: tuple[int, int] | None = None,
    ) -> SegOutput:
        """Decode the pyramid to class logits at ``output_size``.

        ``output_size`` defaults to four times the quarter-scale map, which
        equals the input size whenever it is a multiple of four.
        """
        levels = pyramid.levels()
        if output_size is None:
            h4, w4 = levels["c2"].shape[-2:]
            output_size = (h4 * 4, w4 * 4)

        reasoned_c5, gisf = self.glore["c5"](levels["c5"], injection)

        if self.variant is SegVariant.GR:
            agg = self.decoders["c5"](reasoned_c5)
        else:
            target = levels["c2"].shape[-2:]
            parts = []
            for level in ("c2", "c3", "c4", "c5"):
                feat = levels[level]
                if level == "c5":
                    feat = reasoned_c5
                elif self.variant is SegVariant.MSGR:
                    feat, _ = self.glore[level](feat)
                else:
                    feat = self.local[level](feat)
                decoded = self.decoders[level](feat)
                if decoded.shape[-2:] != target:
                    decoded = F.interpolate(
                        decoded, size=target, mode="bilinear", align_corners=False
                    )
                parts.append(decoded)
            agg = torch.stack(parts).sum(dim=0)

        logits = self.classifier(agg)
        if logits.shape[-2:] != tuple(output_size):
            logits = F.interpolate(
                logits, size=tuple(output_size), mode="bilinear", align_corners=False
            )
        return SegOutput(logits=logits, gisf=gisf, penultimate=agg.mean(dim=(2, 3)))


def seg_loss(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel categorical cross-entropy."""
    if logits.dim() != 4 or mask.dim() != 3:
        raise ValueError(
            f"expected B x K x H x W logits and B x H x W mask, got "
            f"{tuple(logits.shape)} and {tuple(mask.shape)}"
        )
    if logits.shape[0] != mask.shape[0] or logits.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} disagree"
        )
    num_classes = logits.shape[1]
    bad = (mask < 0) | (mask >= num_classes)
    if bad.any():
        b, y, x = (int(v) for v in bad.nonzero()[0])
        raise ValueError(
            f"mask label {int(mask[b, y, x])} out of range [0, {num_classes - 1}] "
            f"at batch {b}, pixel ({y}, {x})"
        )
    return F.cross_entropy(logits, mask.long())


def _confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(
        gt.reshape(-1) * num_classes + pred.reshape(-1), minlength=num_classes**2
    ).reshape(num_classes, num_classes)


def seg_metrics(pred, gt, num_classes: int = NUM_SEG_CLASSES) -> dict:
    """Dataset-level IoU metrics from a single confusion matrix.

    ``per_class_iou`` covers every class (0.0 where a class never occurs);
    ``miou`` averages only over classes present in ground truth or prediction,
    so absent classes cannot contribute undefined 0/0 terms.
    """
    pred = np.asarray(pred.detach().cpu() if isinstance(pred, torch.Tensor) else pred)
    gt = np.asarray(gt.detach().cpu() if isinstance(gt, torch.Tensor) else gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} shapes disagree")
    pred = pred.astype(np.int64)
    gt = gt.astype(np.int64)
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} labels fall outside [0, {num_classes - 1}]")

    cm = _confusion_matrix(pred, gt, num_classes)
    inter = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - inter
    present = union > 0
    per_class = np.zeros(num_classes, dtype=np.float64)
    per_class[present] = inter[present] / union[present]
    miou = float(per_class[present].mean()) if present.any() else 0.0
    pixel_acc = float(inter.sum() / max(1, cm.sum()))
    return {
        "miou": miou,
        "per_class_iou": [float(v) for v in per_class],
        "pixel_acc": pixel_acc,
    }
