"""The assembled multi-task model: shared encoder, segmentation head, graph head.

Feature-sharing directions are wired here:

* GISF edge mode - the segmentation head's latent summary vector is appended
  to every scene-graph edge before readout.
* PF edge mode   - the pooled penultimate decoder feature is appended instead.
* sgfseg         - pooled scene-graph edge features are projected and injected
  into the latent nodes of the coarsest-scale reasoning unit, so graph
  context can influence segmentation. Requires a joint training regime.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import ResNetEncoder
from .glore import GISF_DIM, EdgeSummaryProjector
from .labels import NUM_INTERACTION_CLASSES, NUM_SEG_CLASSES
from .scenegraph import EDGE_MODES, SceneGraphHead, spatial_features
from .seghead import SegmentationHead, SegOutput, SegVariant


@dataclass
class FrameOutput:
    seg_logits: torch.Tensor   # 1 x K x H x W
    edge_logits: torch.Tensor  # E x 13
    gisf: torch.Tensor         # 64
    bundle: object = None
    spatial: torch.Tensor | None = None


class MultiTaskSceneModel(nn.Module):
    def __init__(
        self,
        variant: str | SegVariant = SegVariant.MSLRGR,
        edge_mode: str = "NONE",
        sgfseg: bool = False,
        num_seg_classes: int = NUM_SEG_CLASSES,
        num_interactions: int = NUM_INTERACTION_CLASSES,
        decoder_channels: int = 64,
        latent_nodes: int = 16,
        dropout: float = 0.1,
        trainable_semantics: bool = False,
    ):
        super().__init__()
        edge_mode = str(edge_mode).upper()
        if edge_mode not in EDGE_MODES:
            raise ValueError(f"edge_mode must be one of {EDGE_MODES}, got {edge_mode!r}")
        self.variant = SegVariant.parse(variant)
        self.edge_mode = edge_mode
        self.sgfseg = bool(sgfseg)

        self.encoder = ResNetEncoder()
        self.seg = SegmentationHead(
            variant=self.variant,
            num_classes=num_seg_classes,
            decoder_channels=decoder_channels,
            latent_nodes=latent_nodes,
            dropout=dropout,
            injection_dim=GISF_DIM if self.sgfseg else None,
        )
        self.graph = SceneGraphHead(
            edge_mode=edge_mode,
            num_interactions=num_interactions,
            penultimate_dim=decoder_channels,
            trainable_semantics=trainable_semantics,
        )
        if self.sgfseg:
            self.edge_port = EdgeSummaryProjector(self.graph.base_edge_dim, GISF_DIM)
        else:
            self.edge_port = None

    def config(self) -> dict:
        """Constructor arguments needed to rebuild this architecture."""
        return {
            "variant": self.variant.value,
            "edge_mode": self.edge_mode,
            "sgfseg": self.sgfseg,
            "num_seg_classes": self.seg.num_classes,
            "num_interactions": self.graph.num_interactions,
            "decoder_channels": self.seg.decoder_channels,
        }

    def segment_images(
        self, images: torch.Tensor, injection: torch.Tensor | None = None
    ) -> SegOutput:
        pyramid = self.encoder(images)
        return self.seg(pyramid, injection=injection, output_size=images.shape[-2:])

    def frame_graph(self, sample):
        """Graph bundle plus spatial edge features for one sample."""
        bundle = self.graph.build_graphs(sample, self.encoder)
        spatial = spatial_features(bundle.boxes, bundle.edges)
        return bundle, spatial

    def _edge_extra(self, seg_out: SegOutput, index: int):
        if self.edge_mode == "GISF":
            return seg_out.gisf[index]
        if self.edge_mode == "PF":
            return seg_out.penultimate[index]
        return None

    def forward_batch(self, samples: list) -> dict:
        """Joint forward over a list of SceneSamples.

        Returns seg logits for the stacked images, concatenated edge logits
        and targets, and the per-sample graph state. With sgfseg enabled the
        graphs are built first so their pooled edge features can steer the
        segmentation forward pass.
        """
        images = torch.stack([s.image for s in samples])
        graphs = [self.frame_graph(s) for s in samples]
        injection = None
        if self.sgfseg:
            vectors = [
                self.edge_port(self.graph.edge_features(bundle, spatial))
                for bundle, spatial in graphs
            ]
            injection = torch.stack(vectors)
        pyramid = self.encoder(images)
        seg_out = self.seg(pyramid, injection=injection, output_size=images.shape[-2:])
        edge_logits = [
            self.graph.edge_readout(bundle, spatial, self._edge_extra(seg_out, i))
            for i, (bundle, spatial) in enumerate(graphs)
        ]
        return {
            "seg": seg_out,
            "edge_logits": edge_logits,
            "graphs": graphs,
            "images": images,
            "pyramid": pyramid,
        }

    def forward_frame(self, sample) -> FrameOutput:
        """Full pipeline for a single frame (used by inference and evaluation)."""
        out = self.forward_batch([sample])
        bundle, spatial = out["graphs"][0]
        return FrameOutput(
            seg_logits=out["seg"].logits,
            edge_logits=out["edge_logits"][0],
            gisf=out["seg"].gisf[0],
            bundle=bundle,
            spatial=spatial,
        )

    def partition_modules(self) -> dict:
        """Named module groups for optimizer partitioning and freeze contracts."""
        w_seg = {"seg": self.seg}
        if self.edge_port is not None:
            w_seg["edge_port"] = self.edge_port
        return {
            "w_sh": {"encoder": self.encoder},
            "w_seg": w_seg,
            "w_sg": {"graph": self.graph},
        }


def build_model(**kwargs) -> MultiTaskSceneModel:
    return MultiTaskSceneModel(**kwargs)


def model_from_config(config: dict) -> MultiTaskSceneModel:
    """Rebuild a model from the dict produced by ``MultiTaskSceneModel.config``."""
    known = (
        "variant",
        "edge_mode",
        "sgfseg",
        "num_seg_classes",
        "num_interactions",
        "decoder_channels",
    )
    return MultiTaskSceneModel(**{k: config[k] for k in known if k in config})
